//! Eager (non-recording) versions of the differentiable primitives.

use crate::error::{Error, Result};

use super::kernels;
pub use super::kernels::UpsampleMode;
use super::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    None,
    Silu,
}

/// Stride-1 cross-correlation with zero padding `pad`.
pub fn conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, pad: usize) -> Result<Tensor<T>> {
    kernels::conv2d_forward(x, w, b, pad)?.check_finite(|| "conv2d".into())
}

/// Mean over non-overlapping 2x2 blocks.
pub fn avg_pool2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    kernels::avg_pool2_forward(x)?.check_finite(|| "avg_pool2".into())
}

pub fn upsample2<T: Real>(x: &Tensor<T>, mode: UpsampleMode) -> Result<Tensor<T>> {
    kernels::upsample2_forward(x, mode)?.check_finite(|| "upsample2".into())
}

/// `act(x @ w + b)` for `x: [M, K]`, `w: [K, N]`, `b: [N]`.
pub fn dense_and_activation<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    act: Activation,
) -> Result<Tensor<T>> {
    if w.rank() != 2 || b.shape() != [w.shape()[1]] {
        return Err(Error::shape("dense", w.shape(), b.shape()));
    }
    let y = kernels::add_bias_forward(&kernels::matmul_forward(x, w)?, b)?;
    let y = match act {
        Activation::None => y,
        Activation::Silu => kernels::silu_forward(&y),
    };
    y.check_finite(|| "dense".into())
}

pub fn silu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    kernels::silu_forward(x)
}

pub fn group_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    groups: usize,
) -> Result<Tensor<T>> {
    kernels::group_norm_forward(x, gamma, beta, groups)
        .map(|(y, _)| y)?
        .check_finite(|| "group_norm".into())
}

/// Group count used inside the network blocks: 8, or 4 for narrow layers.
pub fn default_groups(channels: usize) -> usize {
    let g = if channels < 8 { 4 } else { 8 };
    if channels.is_multiple_of(g) {
        g
    } else {
        // fall back to the largest divisor not above g
        (1..=g).rev().find(|d| channels.is_multiple_of(*d)).unwrap_or(1)
    }
}
