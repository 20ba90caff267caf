//! Dense tensors, the differentiable primitives built on them, a recording
//! tape for reverse-mode gradients, and Adam.

pub mod gradcheck;
pub mod kernels;
pub mod ops;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use gradcheck::{autodiff_grad, grad_check};
pub use kernels::UpsampleMode;
pub use ops::{avg_pool2, conv2d, default_groups, dense_and_activation, upsample2, Activation};
pub use optim::{adam_step, AdamConfig, ParamEntry, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{DType, Real, Tensor};
