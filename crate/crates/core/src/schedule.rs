//! Noise levels: Karras sigma ladders, training-noise draws, loss weighting,
//! forward perturbation and the EDM preconditioning coefficients.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Descending noise levels with a terminal zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaSchedule {
    sigmas: Vec<f64>,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
}

impl SigmaSchedule {
    /// All levels including the trailing 0; `len() == steps() + 1`.
    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    /// Number of integrator steps needed to walk the full ladder.
    pub fn steps(&self) -> usize {
        self.sigmas.len() - 1
    }
}

/// `n` levels interpolated linearly in `sigma^(1/rho)` from `sigma_max` to `sigma_min`, then 0.
pub fn karras_sigmas(n: usize, sigma_min: f64, sigma_max: f64, rho: f64) -> Result<SigmaSchedule> {
    if n < 2 {
        return Err(Error::invalid("karras_sigmas", format!("need n >= 2, got {n}")));
    }
    if !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max.is_finite()) {
        return Err(Error::invalid(
            "karras_sigmas",
            format!("need 0 < sigma_min < sigma_max, got ({sigma_min}, {sigma_max})"),
        ));
    }
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::invalid("karras_sigmas", format!("rho must be positive, got {rho}")));
    }
    let (lo, hi) = (sigma_min.powf(1.0 / rho), sigma_max.powf(1.0 / rho));
    let mut sigmas: Vec<f64> = (0..n)
        .map(|i| (hi + i as f64 / (n - 1) as f64 * (lo - hi)).powf(rho))
        .collect();
    // endpoints exact rather than round-tripped through powf
    sigmas[0] = sigma_max;
    sigmas[n - 1] = sigma_min;
    sigmas.push(0.0);
    if sigmas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::invalid(
            "karras_sigmas",
            "levels are not strictly decreasing (sigma_min too close to sigma_max)",
        ));
    }
    Ok(SigmaSchedule {
        sigmas,
        sigma_min,
        sigma_max,
        rho,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeightConfig {
    pub sigma_data: f64,
    pub p_mean: f64,
    pub p_std: f64,
}

impl Default for LossWeightConfig {
    fn default() -> Self {
        LossWeightConfig {
            sigma_data: 0.5,
            p_mean: -1.2,
            p_std: 1.2,
        }
    }
}

impl LossWeightConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_data > 0.0) || !(self.p_std > 0.0) || !self.p_mean.is_finite() {
            return Err(Error::Config(format!(
                "need sigma_data > 0 and p_std > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Log-normal training noise level for a given standard-normal draw.
pub fn training_sigma_from_normal(z: f64, cfg: &LossWeightConfig) -> f64 {
    (cfg.p_mean + cfg.p_std * z).exp()
}

pub fn sample_training_sigma<R: Rng + ?Sized>(rng: &mut R, cfg: &LossWeightConfig) -> f64 {
    training_sigma_from_normal(rng.sample(StandardNormal), cfg)
}

/// `(sigma^2 + sigma_data^2) / (sigma * sigma_data)^2`.
pub fn loss_weight(sigma: f64, cfg: &LossWeightConfig) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::invalid("loss_weight", format!("sigma must be > 0, got {sigma}")));
    }
    let sd = cfg.sigma_data;
    Ok((sigma * sigma + sd * sd) / (sigma * sd).powi(2))
}

/// `x = x0 + sigma * eps` with fresh standard-normal `eps`.
pub fn perturb<T: Real, R: Rng + ?Sized>(
    x0: &Tensor<T>,
    sigma: f64,
    rng: &mut R,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let n = x0.shape().first().copied().unwrap_or(1);
    perturb_per_sample(x0, &vec![sigma; n], rng)
}

/// Like [`perturb`] with one noise level per batch element.
pub fn perturb_per_sample<T: Real, R: Rng + ?Sized>(
    x0: &Tensor<T>,
    sigmas: &[f64],
    rng: &mut R,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let n = x0.shape().first().copied().unwrap_or(1);
    if sigmas.len() != n {
        return Err(Error::invalid(
            "perturb",
            format!("{} noise levels for batch of {n}", sigmas.len()),
        ));
    }
    if let Some(s) = sigmas.iter().find(|s| !(**s >= 0.0)) {
        return Err(Error::invalid("perturb", format!("sigma must be >= 0, got {s}")));
    }
    let eps = Tensor::<T>::randn(x0.shape(), 1.0, rng);
    let per = x0.numel() / n;
    let mut x = x0.clone();
    for ((chunk, e), &s) in x
        .data_mut()
        .chunks_mut(per)
        .zip(eps.data().chunks(per))
        .zip(sigmas)
    {
        if s == 0.0 {
            continue;
        }
        let s = T::from_f64_lossy(s);
        for (v, &z) in chunk.iter_mut().zip(e) {
            *v = *v + s * z;
        }
    }
    Ok((x, eps))
}

/// EDM preconditioning coefficients at one noise level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Precond {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

pub fn precond(sigma: f64, sigma_data: f64) -> Precond {
    let s2 = sigma * sigma + sigma_data * sigma_data;
    Precond {
        c_skip: sigma_data * sigma_data / s2,
        c_out: sigma * sigma_data / s2.sqrt(),
        c_in: 1.0 / s2.sqrt(),
        c_noise: sigma.ln() / 4.0,
    }
}
