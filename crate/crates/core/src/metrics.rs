//! Moment-matched Fréchet distance, latency-scaled effective NFE, and a
//! wall-clock benchmark loop.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::cascade::StageRecord;
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Mean and covariance of a sample set, or exact moments when `count` is `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentFit {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: Option<usize>,
}

impl MomentFit {
    pub fn exact(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.shape() != (mean.len(), mean.len()) {
            return Err(Error::shape("moments", &[cov.nrows(), cov.ncols()], &[mean.len(), mean.len()]));
        }
        Ok(MomentFit { mean, cov, count: None })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased covariance; one sample per column.
pub fn fit_gaussian(samples: &DMatrix<f64>) -> Result<MomentFit> {
    let n = samples.ncols();
    if n < 2 {
        return Err(Error::invalid("fit_gaussian", format!("need at least 2 samples, got {n}")));
    }
    let mean = samples.column_mean();
    let mut centered = samples.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    let cov = &centered * centered.transpose() / (n as f64 - 1.0);
    Ok(MomentFit {
        mean,
        cov: (&cov + cov.transpose()) * 0.5,
        count: Some(n),
    })
}

/// Fits moments to a `[B, ...]` tensor, one flattened sample per batch item.
pub fn fit_tensor<T: Real>(t: &Tensor<T>) -> Result<MomentFit> {
    let b = *t.shape().first().ok_or_else(|| Error::invalid("fit_tensor", "scalar tensor"))?;
    fit_gaussian(&DMatrix::from_column_slice(t.numel() / b, b, &t.to_f64_vec()))
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)`.
pub fn frechet(a: &MomentFit, b: &MomentFit) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape("frechet", &[a.dim()], &[b.dim()]));
    }
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let ra = psd_sqrt(&a.cov);
    let cross = psd_sqrt(&(&ra * &b.cov * &ra));
    let d = mean_term + a.cov.trace() + b.cov.trace() - 2.0 * cross.trace();
    // rounding can leave a tiny negative value for matching moments
    Ok(d.max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    pub stage: usize,
    pub resolution: usize,
    pub nfe: usize,
    /// Mean wall-clock seconds per denoiser evaluation.
    pub latency_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaEntry {
    pub stage: usize,
    pub eta: f64,
    pub scaled_nfe: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffNfeReport {
    pub stages: Vec<StageCost>,
    pub highest_stage: usize,
    pub eta: Vec<EtaEntry>,
    pub effective_nfe: usize,
}

/// `ceil` that ignores floating-point dust just above an integer.
fn ceil_guarded(v: f64) -> usize {
    (v - 1e-9).ceil().max(0.0) as usize
}

/// `sum_i ceil(eta_i * NFE_i) + NFE_high` with `eta_i = latency_i / latency_high`.
pub fn effective_nfe(stages: &[StageCost], highest_stage: usize) -> Result<EffNfeReport> {
    let high = stages
        .iter()
        .find(|s| s.stage == highest_stage)
        .ok_or_else(|| Error::invalid("effective_nfe", format!("no entry for stage {highest_stage}")))?;
    if let Some(bad) = stages.iter().find(|s| !(s.latency_s > 0.0 && s.latency_s.is_finite())) {
        return Err(Error::invalid(
            "effective_nfe",
            format!("stage {} latency must be positive, got {}", bad.stage, bad.latency_s),
        ));
    }
    let eta: Vec<EtaEntry> = stages
        .iter()
        .filter(|s| s.stage != highest_stage)
        .map(|s| {
            let eta = s.latency_s / high.latency_s;
            EtaEntry {
                stage: s.stage,
                eta,
                scaled_nfe: ceil_guarded(eta * s.nfe as f64),
            }
        })
        .collect();
    let effective_nfe = eta.iter().map(|e| e.scaled_nfe).sum::<usize>() + high.nfe;
    Ok(EffNfeReport {
        stages: stages.to_vec(),
        highest_stage,
        eta,
        effective_nfe,
    })
}

/// Per-evaluation latency `base * 4^-(stage - 1)`: the cost of a stage falls
/// with its pixel count.
pub fn ideal_quadratic_costs(nfes: &[usize], top: usize, base: f64) -> Vec<StageCost> {
    nfes.iter()
        .enumerate()
        .map(|(k, &nfe)| StageCost {
            stage: k + 1,
            resolution: top >> k,
            nfe,
            latency_s: base / 4f64.powi(k as i32),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub label: String,
    pub batch: usize,
    pub warmup: usize,
    pub reps: usize,
    pub latency_s: f64,
    pub throughput_img_per_s: f64,
    /// Per-stage costs averaged over the timed reps; empty for opaque workloads.
    pub stages: Vec<StageCost>,
    pub hardware: String,
}

pub fn hardware_note() -> String {
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!("{}-{}, {threads} hardware threads, single-threaded run", std::env::consts::ARCH, std::env::consts::OS)
}

struct Timing {
    total: f64,
    stages: Vec<(StageRecord, f64)>,
}

impl Timing {
    fn new() -> Self {
        Timing { total: 0.0, stages: Vec::new() }
    }

    fn run(&mut self, sample_fn: &mut impl FnMut() -> Result<Vec<StageRecord>>) -> Result<()> {
        let start = Instant::now();
        let records = sample_fn()?;
        self.total += start.elapsed().as_secs_f64();
        if self.stages.is_empty() {
            self.stages = records.iter().map(|r| (r.clone(), 0.0)).collect();
        }
        for (slot, r) in self.stages.iter_mut().zip(&records) {
            slot.1 += r.seconds;
        }
        Ok(())
    }

    fn report(self, label: &str, batch: usize, warmup: usize, reps: usize) -> BenchReport {
        let latency = self.total / reps as f64;
        let stages = self
            .stages
            .into_iter()
            .map(|(r, secs)| StageCost {
                stage: r.stage,
                resolution: r.resolution,
                nfe: r.nfe,
                latency_s: secs / reps as f64 / r.nfe.max(1) as f64,
            })
            .collect();
        BenchReport {
            label: label.to_string(),
            batch,
            warmup,
            reps,
            latency_s: latency,
            throughput_img_per_s: batch as f64 / latency,
            stages,
            hardware: hardware_note(),
        }
    }
}

fn check_bench_args(batch: usize, reps: usize) -> Result<()> {
    if reps == 0 || batch == 0 {
        return Err(Error::invalid("bench", "reps and batch must be positive"));
    }
    Ok(())
}

/// Runs `warmup` discarded and `reps` timed calls of `sample_fn`, which
/// generates `batch` images per call and may report per-stage timings.
pub fn bench(
    label: &str,
    mut sample_fn: impl FnMut() -> Result<Vec<StageRecord>>,
    batch: usize,
    warmup: usize,
    reps: usize,
) -> Result<BenchReport> {
    check_bench_args(batch, reps)?;
    for _ in 0..warmup {
        sample_fn()?;
    }
    let mut t = Timing::new();
    for _ in 0..reps {
        t.run(&mut sample_fn)?;
    }
    Ok(t.report(label, batch, warmup, reps))
}

/// Like [`bench`] for two workloads, alternating them call by call so that
/// both see the same machine conditions.
pub fn bench_pair(
    (label_a, mut fa): (&str, impl FnMut() -> Result<Vec<StageRecord>>),
    (label_b, mut fb): (&str, impl FnMut() -> Result<Vec<StageRecord>>),
    batch: usize,
    warmup: usize,
    reps: usize,
) -> Result<(BenchReport, BenchReport)> {
    check_bench_args(batch, reps)?;
    for _ in 0..warmup {
        fa()?;
        fb()?;
    }
    let (mut ta, mut tb) = (Timing::new(), Timing::new());
    for i in 0..reps {
        // alternate which one goes first as well
        if i % 2 == 0 {
            ta.run(&mut fa)?;
            tb.run(&mut fb)?;
        } else {
            tb.run(&mut fb)?;
            ta.run(&mut fa)?;
        }
    }
    Ok((ta.report(label_a, batch, warmup, reps), tb.report(label_b, batch, warmup, reps)))
}

/// `T_single / T_cascade - 1`.
pub fn speedup(single: &BenchReport, cascade: &BenchReport) -> f64 {
    single.latency_s / cascade.latency_s - 1.0
}
