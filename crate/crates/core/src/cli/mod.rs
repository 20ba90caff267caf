pub mod commands;
pub mod config;
pub mod files;
pub mod shapes;
