//! Finite-difference check of a conv -> group norm -> silu -> pool chain.

use ladderdiff::numerics::{grad_check, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> ladderdiff::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::randn(&[2, 4, 8, 8], 1.0, &mut rng);
    let w = Tensor::randn(&[8, 4, 3, 3], 0.3, &mut rng);
    let b = Tensor::randn(&[8], 0.1, &mut rng);
    let gamma = Tensor::ones(&[8]);
    let beta = Tensor::zeros(&[8]);

    for (name, h) in [("h = 1e-3", 1e-3), ("h = 1e-4", 1e-4), ("h = 1e-6", 1e-6)] {
        let err = grad_check(
            |t: &mut Tape<f64>, w| {
                let xv = t.constant(x.clone());
                let bv = t.constant(b.clone());
                let (g, be) = (t.constant(gamma.clone()), t.constant(beta.clone()));
                let y = t.conv2d(xv, w, bv, 1)?;
                let y = t.group_norm(y, g, be, 4)?;
                let y = t.silu(y);
                let y = t.avg_pool2(y)?;
                let y = t.mul(y, y)?;
                Ok(t.sum(y))
            },
            &w,
            h,
        )?;
        println!("{name}: max relative error over {} weights = {err:.2e}", w.numel());
    }
    Ok(())
}
