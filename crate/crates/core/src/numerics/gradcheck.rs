use crate::error::Result;

use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Builds a scalar from the parameter node `x` on a fresh tape.
pub trait ScalarFn: Fn(&mut Tape<f64>, Var) -> Result<Var> {}
impl<F: Fn(&mut Tape<f64>, Var) -> Result<Var>> ScalarFn for F {}

const PARAM: &str = "__gradcheck_x";

fn eval(f: &impl ScalarFn, x: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.param(PARAM, x);
    let y = f(&mut tape, xv)?;
    Ok(tape.value(y).data()[0])
}

/// Tape gradient of `f` at `x`.
pub fn autodiff_grad(f: &impl ScalarFn, x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let xv = tape.param(PARAM, x);
    let y = f(&mut tape, xv)?;
    let mut grads = tape.backward(y)?;
    Ok(grads
        .remove(PARAM)
        .unwrap_or_else(|| Tensor::zeros(x.shape())))
}

/// Largest `|autodiff - central difference| / max(1, |central difference|)` over coordinates.
pub fn grad_check(f: impl ScalarFn, x: &Tensor<f64>, h: f64) -> Result<f64> {
    let analytic = autodiff_grad(&f, x)?;
    let mut probe = x.clone();
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let err = (analytic.data()[i] - fd).abs() / fd.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
