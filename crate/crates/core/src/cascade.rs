//! Bottom-up cascaded sampling with truncation, the ODE integrators it runs
//! on, and per-resolution training with truncation augmentation.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::network::{ResolutionLadder, UnifiedNet};
use crate::numerics::{adam_step, avg_pool2, upsample2, AdamConfig, Real, Tape, Tensor, UpsampleMode, Var};
use crate::schedule::{
    karras_sigmas, loss_weight, perturb_per_sample, sample_training_sigma, LossWeightConfig,
    SigmaSchedule,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Integrator {
    Euler,
    Heun,
}

impl Integrator {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Integrator::Euler),
            "heun" => Ok(Integrator::Heun),
            _ => Err(Error::Config(format!("unknown integrator {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Integrator::Euler => "euler",
            Integrator::Heun => "heun",
        }
    }
}

/// One stage's walk down its sigma ladder.
///
/// `steps` is the number of levels before the terminal zero. The stage takes
/// `steps - trunc` integrator steps and stops at `sigmas[steps - trunc]`, so
/// `trunc == 0` lands on clean data.
#[derive(Debug, Clone, PartialEq)]
pub struct StageSchedule {
    pub stage: usize,
    pub steps: usize,
    pub trunc: usize,
    pub sigmas: SigmaSchedule,
    pub integrator: Integrator,
}

impl StageSchedule {
    pub fn new(
        stage: usize,
        steps: usize,
        trunc: usize,
        sigma_min: f64,
        sigma_max: f64,
        rho: f64,
        integrator: Integrator,
    ) -> Result<Self> {
        if trunc >= steps {
            return Err(Error::Config(format!(
                "stage {stage}: truncation {trunc} must be below step count {steps}"
            )));
        }
        Ok(StageSchedule {
            stage,
            steps,
            trunc,
            sigmas: karras_sigmas(steps, sigma_min, sigma_max, rho)?,
            integrator,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.steps - self.trunc
    }

    /// Noise level of this stage's output.
    pub fn end_sigma(&self) -> f64 {
        self.sigmas.sigmas()[self.steps_taken()]
    }

    /// Denoiser evaluations this stage will consume.
    pub fn nfe(&self) -> usize {
        let n = self.steps_taken();
        match self.integrator {
            Integrator::Euler => n,
            Integrator::Heun if self.trunc == 0 => 2 * n - 1,
            Integrator::Heun => 2 * n,
        }
    }
}

/// Default truncation point for a stage of `steps` levels.
pub fn default_trunc(steps: usize) -> usize {
    ((0.54 * steps as f64).round() as usize).min(steps - 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeConfig {
    pub ladder: ResolutionLadder,
    /// Indexed by `stage - 1`.
    pub stages: Vec<StageSchedule>,
    pub jitter: (f64, f64),
}

impl CascadeConfig {
    pub fn new(ladder: ResolutionLadder, stages: Vec<StageSchedule>, jitter: (f64, f64)) -> Result<Self> {
        let cfg = CascadeConfig { ladder, stages, jitter };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Heun everywhere; the lowest stage uses (0.002, 80), the others (0.01, 50);
    /// non-final stages truncate at `default_trunc`.
    pub fn with_defaults(ladder: ResolutionLadder, steps: &[usize]) -> Result<Self> {
        if steps.len() != ladder.len() {
            return Err(Error::Config(format!(
                "{} step counts for a {}-stage ladder",
                steps.len(),
                ladder.len()
            )));
        }
        let n = ladder.len();
        let stages = steps
            .iter()
            .enumerate()
            .map(|(k, &t)| {
                let stage = k + 1;
                let (lo, hi) = if stage == n { (0.002, 80.0) } else { (0.01, 50.0) };
                let trunc = if stage == 1 || t < 2 { 0 } else { default_trunc(t) };
                StageSchedule::new(stage, t, trunc, lo, hi, 7.0, Integrator::Heun)
            })
            .collect::<Result<_>>()?;
        Self::new(ladder, stages, (0.8, 1.25))
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != self.ladder.len() {
            return Err(Error::Config(format!(
                "{} stage schedules for a {}-stage ladder",
                self.stages.len(),
                self.ladder.len()
            )));
        }
        for (k, s) in self.stages.iter().enumerate() {
            if s.stage != k + 1 {
                return Err(Error::Config(format!("schedule {k} is labelled stage {}", s.stage)));
            }
            if s.trunc >= s.steps {
                return Err(Error::Config(format!("stage {}: trunc >= steps", s.stage)));
            }
        }
        if self.stages[0].trunc != 0 {
            return Err(Error::Config("the full-resolution stage must not truncate".into()));
        }
        let (lo, hi) = self.jitter;
        if !(lo > 0.0 && lo <= 1.0 && hi >= 1.0 && hi.is_finite()) {
            return Err(Error::Config(format!("jitter range ({lo}, {hi}) must bracket 1")));
        }
        Ok(())
    }

    pub fn stage(&self, stage: usize) -> Result<&StageSchedule> {
        self.ladder.resolution(stage)?;
        Ok(&self.stages[stage - 1])
    }

    /// Noise level of the condition fed to `stage`: the truncation level of the
    /// stage below. `None` for the lowest stage.
    pub fn condition_sigma(&self, stage: usize) -> Result<Option<f64>> {
        self.ladder.resolution(stage)?;
        Ok(self.stages.get(stage).map(StageSchedule::end_sigma))
    }

    pub fn nfes(&self) -> Vec<usize> {
        self.stages.iter().map(StageSchedule::nfe).collect()
    }
}

/// Anything that maps a noisy image to a clean estimate at one stage.
pub trait Denoiser<T: Real> {
    fn denoise(&self, x: &Tensor<T>, cond: Option<&Tensor<T>>, sigma: f64, stage: usize) -> Result<Tensor<T>>;
}

impl<T: Real> Denoiser<T> for UnifiedNet<T> {
    fn denoise(&self, x: &Tensor<T>, cond: Option<&Tensor<T>>, sigma: f64, stage: usize) -> Result<Tensor<T>> {
        self.forward(x, cond, sigma, stage, None)
    }
}

/// A class-conditional network with one label per batch element.
pub struct Labeled<'a, T: Real> {
    pub net: &'a UnifiedNet<T>,
    pub labels: Vec<usize>,
}

impl<T: Real> Denoiser<T> for Labeled<'_, T> {
    fn denoise(&self, x: &Tensor<T>, cond: Option<&Tensor<T>>, sigma: f64, stage: usize) -> Result<Tensor<T>> {
        let b = x.shape()[0];
        self.net
            .forward_batch(x, cond, &vec![sigma; b], stage, Some(&self.labels))
    }
}

/// One integrator step from `sigma_t` to `sigma_next`. Returns the new state
/// and the number of denoiser calls made.
pub fn sampler_step<T: Real>(
    mut denoise: impl FnMut(&Tensor<T>, f64) -> Result<Tensor<T>>,
    x: &Tensor<T>,
    sigma_t: f64,
    sigma_next: f64,
    integrator: Integrator,
) -> Result<(Tensor<T>, usize)> {
    if !(sigma_t > sigma_next && sigma_next >= 0.0) {
        return Err(Error::invalid(
            "sampler_step",
            format!("need sigma_t > sigma_next >= 0, got {sigma_t} -> {sigma_next}"),
        ));
    }
    let slope = |x: &Tensor<T>, den: &Tensor<T>, s: f64| -> Result<Tensor<T>> {
        let inv = T::from_f64_lossy(1.0 / s);
        x.zip_map(den, |a, b| (a - b) * inv)
    };
    let h = T::from_f64_lossy(sigma_next - sigma_t);
    let d = slope(x, &denoise(x, sigma_t)?, sigma_t)?;
    let mut next = x.clone();
    next.axpy(h, &d)?;
    if integrator == Integrator::Euler || sigma_next == 0.0 {
        return Ok((next, 1));
    }
    let d2 = slope(&next, &denoise(&next, sigma_next)?, sigma_next)?;
    let half = h * T::from_f64_lossy(0.5);
    let mut out = x.clone();
    out.axpy(half, &d)?;
    out.axpy(half, &d2)?;
    Ok((out, 2))
}

/// Standard-normal initial state; element `b` draws from its own stream so
/// results do not depend on the batch size.
pub fn initial_noise<T: Real>(seed: u64, stage: usize, shape: &[usize]) -> Tensor<T> {
    let batch = shape[0];
    let per: usize = shape[1..].iter().product();
    let mut data = Vec::with_capacity(batch * per);
    for b in 0..batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(((stage as u64) << 32) | b as u64);
        data.extend((0..per).map(|_| T::from_f64_lossy(rng.sample::<f64, _>(StandardNormal))));
    }
    Tensor::from_parts(shape.to_vec(), data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput<T: Real> {
    pub x: Tensor<T>,
    pub nfe: usize,
}

/// Runs one stage from pure noise down to its truncation level.
pub fn sample_stage<T: Real>(
    denoiser: &dyn Denoiser<T>,
    sched: &StageSchedule,
    cond: Option<&Tensor<T>>,
    seed: u64,
    shape: &[usize],
) -> Result<StageOutput<T>> {
    let sig = sched.sigmas.sigmas();
    let mut x = initial_noise::<T>(seed, sched.stage, shape).scale(T::from_f64_lossy(sig[0]));
    let mut nfe = 0;
    for k in 0..sched.steps_taken() {
        let (next, used) = sampler_step(
            |x, s| denoiser.denoise(x, cond, s, sched.stage),
            &x,
            sig[k],
            sig[k + 1],
            sched.integrator,
        )?;
        x = next;
        nfe += used;
    }
    let x = x.check_finite(|| format!("sampling stage {}", sched.stage))?;
    Ok(StageOutput { x, nfe })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub stage: usize,
    pub resolution: usize,
    pub nfe: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct CascadeOutput<T: Real> {
    pub images: Tensor<T>,
    /// Lowest resolution first, in the order the stages ran.
    pub stages: Vec<StageRecord>,
}

/// Samples stage N unconditionally, then each higher stage conditioned on the
/// bilinear upsampling of the previous stage's truncated output.
pub fn sample_cascade<T: Real>(
    denoiser: &dyn Denoiser<T>,
    config: &CascadeConfig,
    seed: u64,
    batch: usize,
    channels: usize,
) -> Result<CascadeOutput<T>> {
    config.validate()?;
    if batch == 0 || channels == 0 {
        return Err(Error::invalid("sample_cascade", "batch and channels must be positive"));
    }
    let n = config.ladder.len();
    let mut prev: Option<Tensor<T>> = None;
    let mut records = Vec::with_capacity(n);
    for stage in (1..=n).rev() {
        let r = config.ladder.resolution(stage)?;
        let sched = config.stage(stage)?;
        let start = Instant::now();
        let cond = prev.as_ref().map(|p| upsample2(p, UpsampleMode::Bilinear)).transpose()?;
        let out = sample_stage(denoiser, sched, cond.as_ref(), seed, &[batch, channels, r, r])?;
        records.push(StageRecord {
            stage,
            resolution: r,
            nfe: out.nfe,
            seconds: start.elapsed().as_secs_f64(),
        });
        prev = Some(out.x);
    }
    Ok(CascadeOutput {
        images: prev.expect("ladder is non-empty"),
        stages: records,
    })
}

/// `upsample2(avg_pool2(x0) + sigma_c * eps_c)` with fresh `eps_c`.
pub fn prepare_condition_train<T: Real, R: Rng + ?Sized>(
    x0: &Tensor<T>,
    sigma_c: f64,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if !(sigma_c >= 0.0) {
        return Err(Error::invalid("prepare_condition_train", format!("sigma_c = {sigma_c}")));
    }
    let mut low = avg_pool2(x0)?;
    let eps = Tensor::<T>::randn(low.shape(), 1.0, rng);
    if sigma_c > 0.0 {
        low.axpy(T::from_f64_lossy(sigma_c), &eps)?;
    }
    upsample2(&low, UpsampleMode::Bilinear)
}

/// How stage losses are combined within one training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// Backward and masked optimizer update per stage, lowest stage first.
    PerStage,
    /// One backward through the sum of all stage losses, one update.
    Summed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub cascade: CascadeConfig,
    pub loss: LossWeightConfig,
    pub adam: AdamConfig,
    pub mode: LossMode,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T: Real> {
    pub net: UnifiedNet<T>,
    pub step: u64,
    pub config: TrainConfig,
}

impl<T: Real> TrainState<T> {
    pub fn new(net: UnifiedNet<T>, config: TrainConfig) -> Result<Self> {
        config.cascade.validate()?;
        config.loss.validate()?;
        if net.config().ladder != config.cascade.ladder {
            return Err(Error::Config("network and cascade ladders differ".into()));
        }
        if net.config().sigma_data != config.loss.sigma_data {
            return Err(Error::Config("network and loss sigma_data differ".into()));
        }
        Ok(TrainState { net, step: 0, config })
    }

    /// RNG for the current step; a function of (seed, step) only, so a resumed
    /// run continues the same sequence.
    fn step_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.step);
        rng
    }

    fn pyramid(&self, batch: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let ladder = &self.config.cascade.ladder;
        let (_, c, h, w) = batch.dims4()?;
        let top = ladder.top();
        if h != top || w != top || c != self.net.config().image_channels {
            return Err(Error::shape(
                "train_step",
                batch.shape(),
                &[batch.shape()[0], self.net.config().image_channels, top, top],
            ));
        }
        let mut levels = vec![batch.clone()];
        for _ in 1..ladder.len() {
            let next = avg_pool2(levels.last().expect("non-empty"))?;
            levels.push(next);
        }
        Ok(levels)
    }

    fn record_stage_loss(
        &self,
        tape: &mut Tape<T>,
        x0: &Tensor<T>,
        stage: usize,
        labels: Option<&[usize]>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let b = x0.shape()[0];
        let cfg = &self.config;
        let sigmas: Vec<f64> = (0..b).map(|_| sample_training_sigma(rng, &cfg.loss)).collect();
        let weights = sigmas
            .iter()
            .map(|&s| loss_weight(s, &cfg.loss).map(T::from_f64_lossy))
            .collect::<Result<Vec<_>>>()?;
        let (x, _) = perturb_per_sample(x0, &sigmas, rng)?;
        let cond = match cfg.cascade.condition_sigma(stage)? {
            Some(base) => {
                let (lo, hi) = cfg.cascade.jitter;
                let jitter = if hi > lo { rng.random_range(lo.ln()..hi.ln()).exp() } else { lo };
                Some(prepare_condition_train(x0, base * jitter, rng)?)
            }
            None => None,
        };
        let pred = self.net.record(tape, &x, cond.as_ref(), &sigmas, stage, labels)?;
        tape.weighted_mse(pred, x0, &weights)
    }

    fn check_loss(tape: &Tape<T>, loss: Var, stage: usize) -> Result<f64> {
        let v = tape.value(loss).data()[0].as_f64();
        if !v.is_finite() {
            return Err(Error::Stage {
                stage,
                reason: format!("non-finite loss {v}"),
            });
        }
        Ok(v)
    }

    /// Loss, backward and masked update for one stage only. Does not advance
    /// the step counter.
    pub fn train_stage(&mut self, batch: &Tensor<T>, stage: usize, labels: Option<&[usize]>) -> Result<f64> {
        self.config.cascade.ladder.resolution(stage)?;
        let levels = self.pyramid(batch)?;
        let mut rng = self.step_rng();
        let mut tape = Tape::new();
        let loss = self.record_stage_loss(&mut tape, &levels[stage - 1], stage, labels, &mut rng)?;
        let value = Self::check_loss(&tape, loss, stage)?;
        let grads = tape.backward(loss)?;
        adam_step(self.net.params_mut(), &grads, &self.config.adam)?;
        Ok(value)
    }

    /// One full training step over every stage. Returns losses indexed by
    /// `stage - 1`.
    pub fn train_step(&mut self, batch: &Tensor<T>, labels: Option<&[usize]>) -> Result<Vec<f64>> {
        let levels = self.pyramid(batch)?;
        let n = levels.len();
        let mut rng = self.step_rng();
        let mut losses = vec![0.0; n];
        match self.config.mode {
            LossMode::PerStage => {
                for stage in (1..=n).rev() {
                    let mut tape = Tape::new();
                    let loss = self.record_stage_loss(&mut tape, &levels[stage - 1], stage, labels, &mut rng)?;
                    losses[stage - 1] = Self::check_loss(&tape, loss, stage)?;
                    let grads = tape.backward(loss)?;
                    adam_step(self.net.params_mut(), &grads, &self.config.adam)?;
                }
            }
            LossMode::Summed => {
                let mut tape = Tape::new();
                let mut total: Option<Var> = None;
                for stage in (1..=n).rev() {
                    let loss = self.record_stage_loss(&mut tape, &levels[stage - 1], stage, labels, &mut rng)?;
                    losses[stage - 1] = Self::check_loss(&tape, loss, stage)?;
                    total = Some(match total {
                        Some(t) => tape.add(t, loss)?,
                        None => loss,
                    });
                }
                let grads = tape.backward(total.expect("non-empty ladder"))?;
                adam_step(self.net.params_mut(), &grads, &self.config.adam)?;
            }
        }
        self.step += 1;
        Ok(losses)
    }
}
