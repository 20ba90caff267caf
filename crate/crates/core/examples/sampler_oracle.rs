//! Heun sampling with the exact denoiser of a known Gaussian, compared with
//! the true moments.

use ladderdiff::cascade::{sample_cascade, CascadeConfig, Integrator, StageSchedule};
use ladderdiff::metrics::fit_tensor;
use ladderdiff::network::ResolutionLadder;
use ladderdiff::oracle::{rbf_covariance, GaussianMixture, OracleCascade};
use nalgebra::DVector;

fn main() -> ladderdiff::Result<()> {
    let cov = rbf_covariance(1, 2, 0.25, 1.0, 1e-4);
    let law = GaussianMixture::gaussian(DVector::zeros(4), cov.clone())?;
    let ladder = ResolutionLadder::new(vec![2])?;

    for steps in [4, 8, 16, 64] {
        let sched = StageSchedule::new(1, steps, 0, 0.002, 80.0, 7.0, Integrator::Heun)?;
        let cfg = CascadeConfig::new(ladder.clone(), vec![sched], (1.0, 1.0))?;
        let oracle = OracleCascade::new(&law, 1, &cfg)?;
        let out = sample_cascade::<f64>(&oracle, &cfg, 1, 10_000, 1)?;
        let fit = fit_tensor(&out.images)?;
        let var_err = (0..4).map(|i| (fit.cov[(i, i)] / cov[(i, i)] - 1.0).abs()).fold(0.0, f64::max);
        println!(
            "{steps:>3} steps, NFE {:>3}: max |mean| {:.4}, max variance error {:.2}%",
            out.stages[0].nfe,
            fit.mean.amax(),
            100.0 * var_err
        );
    }
    Ok(())
}
