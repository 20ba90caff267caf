// `!(x > 0.0)` guards are meant to reject NaN too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cascade;
pub mod cli;
pub mod error;
pub mod metrics;
pub mod network;
pub mod numerics;
pub mod oracle;
pub mod schedule;

pub use error::{Error, Result};
