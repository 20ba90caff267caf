//! Two-stage 8 -> 16 cascade driven by exact conditional denoisers, against a
//! full-resolution run, both scored by Fréchet distance to the true law.

use ladderdiff::cascade::{sample_cascade, CascadeConfig, Integrator, StageSchedule};
use ladderdiff::metrics::{fit_tensor, frechet, MomentFit};
use ladderdiff::network::ResolutionLadder;
use ladderdiff::oracle::{rbf_covariance, GaussianMixture, OracleCascade};
use nalgebra::DVector;

fn main() -> ladderdiff::Result<()> {
    let n = 4000;
    let cov = rbf_covariance(1, 16, 0.25, 4.0, 1e-4);
    let law = GaussianMixture::gaussian(DVector::zeros(256), cov.clone())?;
    let truth = MomentFit::exact(DVector::zeros(256), cov)?;

    println!("truncation  low NFE  FD");
    for trunc in [0, 10, 19, 28] {
        let stages = vec![
            StageSchedule::new(1, 18, 0, 0.01, 50.0, 7.0, Integrator::Heun)?,
            StageSchedule::new(2, 35, trunc, 0.002, 80.0, 7.0, Integrator::Heun)?,
        ];
        let cfg = CascadeConfig::new(ResolutionLadder::new(vec![16, 8])?, stages, (1.0, 1.0))?;
        let out = sample_cascade::<f64>(&OracleCascade::new(&law, 1, &cfg)?, &cfg, 3, n, 1)?;
        let fd = frechet(&fit_tensor(&out.images)?, &truth)?;
        println!("{trunc:>6}/35  {:>7}  {fd:.4}", out.stages[0].nfe);
    }

    let single = StageSchedule::new(1, 22, 0, 0.002, 80.0, 7.0, Integrator::Heun)?;
    let cfg = CascadeConfig::new(ResolutionLadder::new(vec![16])?, vec![single], (1.0, 1.0))?;
    let out = sample_cascade::<f64>(&OracleCascade::new(&law, 1, &cfg)?, &cfg, 3, n, 1)?;
    println!(
        "full resolution only, NFE {}: FD {:.4}",
        out.stages[0].nfe,
        frechet(&fit_tensor(&out.images)?, &truth)?
    );
    Ok(())
}
