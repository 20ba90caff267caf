use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{DatasetSource, RunConfig};
use super::files::{load_tensor_any, save_tensor, write_bytes, Checkpoint};
use super::shapes::gen_shapes;
use crate::cascade::{
    sample_cascade, sample_stage, Denoiser, Integrator, Labeled, StageRecord, StageSchedule, TrainState,
};
use crate::error::{Error, Result};
use crate::metrics::{bench_pair, effective_nfe, fit_tensor, frechet, speedup, BenchReport, EffNfeReport, MomentFit, StageCost};
use crate::network::UnifiedNet;
use crate::numerics::{Real, Tensor};
use crate::oracle::OracleCascade;

pub const SCHEMA_VERSION: u32 = 1;

/// One JSONL line: `body`'s fields plus `schema` and `kind`.
pub fn jsonl<S: Serialize>(kind: &str, body: &S) -> Result<String> {
    let mut value = serde_json::to_value(body)?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| Error::invalid("jsonl", "record body must be an object"))?;
    obj.insert("schema".into(), SCHEMA_VERSION.into());
    obj.insert("kind".into(), kind.into());
    Ok(serde_json::to_string(&value)?)
}

fn emit<S: Serialize>(out: &mut dyn Write, kind: &str, body: &S) -> Result<()> {
    writeln!(out, "{}", jsonl(kind, body)?).map_err(|e| Error::io("<output>", e))
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    write_bytes(path, text.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: u64,
    pub resolutions: Vec<usize>,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub final_losses: Vec<f64>,
}

struct Dataset {
    images: Tensor<f32>,
    labels: Option<Vec<usize>>,
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let r = cfg.net.ladder.top();
    let c = cfg.net.image_channels;
    let (images, labels) = match &cfg.dataset {
        DatasetSource::Shapes { count } => {
            let s = gen_shapes(cfg.seed, *count, r, &cfg.palette)?;
            (s.images, Some(s.labels))
        }
        DatasetSource::Mixture { count } => {
            let m = cfg.mixture_at_top()?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let xs = m.sample(&mut rng, *count)?;
            (Tensor::<f64>::from_f64_slice(&[*count, c, r, r], xs.as_slice())?.cast(), None)
        }
        DatasetSource::File { path, labels } => {
            let images = load_tensor_any::<f32>(path)?;
            let labels = labels
                .as_ref()
                .map(|p| -> Result<Vec<usize>> {
                    let t = load_tensor_any::<f64>(p)?;
                    t.data()
                        .iter()
                        .map(|&v| {
                            if v >= 0.0 && v.fract() == 0.0 {
                                Ok(v as usize)
                            } else {
                                Err(Error::Format {
                                    what: "label file",
                                    reason: format!("label {v} is not a non-negative integer"),
                                })
                            }
                        })
                        .collect()
                })
                .transpose()?;
            (images, labels)
        }
    };
    let want = [images.shape()[0], c, r, r];
    if images.shape() != want {
        return Err(Error::shape("dataset", images.shape(), &want));
    }
    let labels = match (cfg.net.label_count, labels) {
        (None, _) => None,
        (Some(_), None) => return Err(Error::Config("label_count is set but the dataset has no labels".into())),
        (Some(k), Some(l)) => {
            if l.len() != want[0] || l.iter().any(|&v| v >= k) {
                return Err(Error::Config(format!("dataset labels must be {} values below {k}", want[0])));
            }
            Some(l)
        }
    };
    Ok(Dataset { images, labels })
}

fn init_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    rng
}

/// Batch indices for one step; depends on (seed, step) only.
fn batch_indices(seed: u64, step: u64, batch: usize, len: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX - 1);
    rng.set_word_pos(step as u128 * (batch as u128) * 2);
    (0..batch).map(|_| rng.random_range(0..len)).collect()
}

fn gather(data: &Dataset, idx: &[usize]) -> Result<(Tensor<f32>, Option<Vec<usize>>)> {
    let items = idx.iter().map(|&i| data.images.batch_item(i)).collect::<Result<Vec<_>>>()?;
    let labels = data.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect());
    Ok((Tensor::concat_batch(&items)?, labels))
}

fn load_net(cfg: &RunConfig, path: &Path, allow_mismatch: bool) -> Result<(UnifiedNet<f32>, u64)> {
    let ckpt = Checkpoint::<f32>::load(path)?;
    ckpt.check_config(&cfg.net, allow_mismatch)?;
    let net = UnifiedNet::from_params(cfg.net.clone(), ckpt.params)?;
    Ok((net, ckpt.step))
}

/// Trains for `cfg.train_steps` total steps, writing `checkpoint.ldif` and
/// `train.jsonl` into `out_dir`.
pub fn cmd_train(
    cfg: &RunConfig,
    out_dir: &Path,
    resume: Option<&Path>,
    allow_mismatch: bool,
    out: &mut dyn Write,
) -> Result<TrainSummary> {
    let data = load_dataset(cfg)?;
    let (net, start) = match resume {
        Some(p) => load_net(cfg, p, allow_mismatch)?,
        None => (UnifiedNet::build(cfg.net.clone(), &mut init_rng(cfg.seed))?, 0),
    };
    let mut state = TrainState::new(net, cfg.train_config())?;
    state.step = start;

    let ckpt_path = out_dir.join("checkpoint.ldif");
    let log_path = out_dir.join("train.jsonl");
    let resolutions = cfg.net.ladder.resolutions().to_vec();
    let mut lines = Vec::new();
    let mut last = Vec::new();
    let save = |state: &TrainState<f32>| {
        Checkpoint::new(&cfg.net, state.step, state.net.params().clone()).save(&ckpt_path)
    };
    while state.step < cfg.train_steps {
        let idx = batch_indices(cfg.seed, state.step, cfg.batch, data.images.shape()[0]);
        let (batch, labels) = gather(&data, &idx)?;
        let losses = state.train_step(&batch, labels.as_deref())?;
        lines.push(jsonl(
            "train",
            &TrainRecord {
                step: state.step,
                resolutions: resolutions.clone(),
                losses: losses.clone(),
            },
        )?);
        last = losses;
        if state.step % cfg.checkpoint_every == 0 {
            save(&state)?;
            write_lines(&log_path, &lines)?;
        }
    }
    save(&state)?;
    write_lines(&log_path, &lines)?;
    let summary = TrainSummary {
        steps: state.step,
        checkpoint: ckpt_path,
        log: log_path,
        final_losses: last,
    };
    emit(out, "train_summary", &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NfeRecord {
    pub stage: usize,
    pub resolution: usize,
    pub nfe: usize,
    pub seconds: f64,
}

/// Where sampling gets its denoiser from.
pub enum SampleSource<'a> {
    Checkpoint(&'a Path),
    Oracle,
}

fn sample_chunks<T: Real>(
    den: &dyn Denoiser<T>,
    cfg: &RunConfig,
    count: usize,
    batch: usize,
) -> Result<(Tensor<T>, Vec<StageRecord>)> {
    let mut parts = Vec::new();
    let mut records: Vec<StageRecord> = Vec::new();
    let mut done = 0;
    let mut chunk = 0u64;
    while done < count {
        let b = batch.min(count - done);
        let seed = cfg.seed ^ chunk.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let out = sample_cascade(den, &cfg.cascade, seed, b, cfg.net.image_channels)?;
        if records.is_empty() {
            records = out.stages.clone();
        } else {
            for (acc, r) in records.iter_mut().zip(&out.stages) {
                acc.nfe += r.nfe;
                acc.seconds += r.seconds;
            }
        }
        parts.push(out.images);
        done += b;
        chunk += 1;
    }
    // NFE is per image batch, not summed over chunks
    for r in &mut records {
        r.nfe /= chunk as usize;
    }
    Ok((Tensor::concat_batch(&parts)?, records))
}

/// Writes `samples.ldtn` and `sample.jsonl` (one NFE record per stage).
pub fn cmd_sample(
    cfg: &RunConfig,
    source: SampleSource<'_>,
    count: usize,
    batch: usize,
    out_dir: &Path,
    allow_mismatch: bool,
    out: &mut dyn Write,
) -> Result<Vec<NfeRecord>> {
    if count == 0 || batch == 0 {
        return Err(Error::Config("count and batch must be positive".into()));
    }
    let records = match source {
        SampleSource::Oracle => {
            let oracle = OracleCascade::new(&cfg.mixture_at_top()?, cfg.net.image_channels, &cfg.cascade)?;
            let (images, records) = sample_chunks::<f64>(&oracle, cfg, count, batch)?;
            save_tensor(&out_dir.join("samples.ldtn"), &images)?;
            records
        }
        SampleSource::Checkpoint(path) => {
            if cfg.net.label_count.is_some() {
                return Err(Error::Config("sampling a class-conditional network needs labels; use the library API".into()));
            }
            let (net, _) = load_net(cfg, path, allow_mismatch)?;
            let (images, records) = sample_chunks::<f32>(&net, cfg, count, batch)?;
            save_tensor(&out_dir.join("samples.ldtn"), &images)?;
            records
        }
    };
    let nfe: Vec<NfeRecord> = records
        .iter()
        .map(|r| NfeRecord {
            stage: r.stage,
            resolution: r.resolution,
            nfe: r.nfe,
            seconds: r.seconds,
        })
        .collect();
    let lines = nfe.iter().map(|r| jsonl("nfe", r)).collect::<Result<Vec<_>>>()?;
    write_lines(&out_dir.join("sample.jsonl"), &lines)?;
    for line in &lines {
        writeln!(out, "{line}").map_err(|e| Error::io("<output>", e))?;
    }
    Ok(nfe)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrechetRecord {
    pub frechet: f64,
    pub dim: usize,
    pub samples: usize,
    /// `"file"` or `"mixture"`.
    pub reference: String,
}

pub enum Reference<'a> {
    File(&'a Path),
    Mixture(&'a RunConfig),
}

pub fn cmd_eval(samples: &Path, reference: Reference<'_>, out: &mut dyn Write) -> Result<FrechetRecord> {
    let xs = load_tensor_any::<f64>(samples)?;
    let fit = fit_tensor(&xs)?;
    let (refit, kind) = match reference {
        Reference::File(p) => (fit_tensor(&load_tensor_any::<f64>(p)?)?, "file"),
        Reference::Mixture(cfg) => {
            let (mean, cov) = cfg.mixture_at_top()?.moments();
            (MomentFit::exact(mean, cov)?, "mixture")
        }
    };
    if refit.dim() != fit.dim() {
        return Err(Error::shape("eval", &[fit.dim()], &[refit.dim()]));
    }
    let rec = FrechetRecord {
        frechet: frechet(&fit, &refit)?,
        dim: fit.dim(),
        samples: xs.shape()[0],
        reference: kind.into(),
    };
    emit(out, "frechet", &rec)?;
    Ok(rec)
}

/// Runs a conditional stage-1 network as an unconditional one by feeding an
/// all-zero condition.
pub struct ZeroCondition<'a, T: Real> {
    pub inner: &'a dyn Denoiser<T>,
    pub stages: usize,
}

impl<T: Real> Denoiser<T> for ZeroCondition<'_, T> {
    fn denoise(&self, x: &Tensor<T>, _: Option<&Tensor<T>>, sigma: f64, stage: usize) -> Result<Tensor<T>> {
        let zeros = (stage < self.stages).then(|| Tensor::zeros(x.shape()));
        self.inner.denoise(x, zeros.as_ref(), sigma, stage)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupRecord {
    pub single_latency_s: f64,
    pub cascade_latency_s: f64,
    pub single_nfe: usize,
    pub cascade_nfe: Vec<usize>,
    pub speedup: f64,
}

pub struct BenchOutcome {
    pub single: BenchReport,
    pub cascade: BenchReport,
    pub speedup: f64,
}

/// Times full-resolution single-stage sampling against the configured cascade
/// on the same network, alternating the two.
pub fn bench_net<T: Real>(
    den: &dyn Denoiser<T>,
    cfg: &RunConfig,
    batch: usize,
    warmup: usize,
    reps: usize,
) -> Result<BenchOutcome> {
    let n = cfg.net.ladder.len();
    let r = cfg.net.ladder.top();
    let c = cfg.net.image_channels;
    let single_sched = StageSchedule::new(1, cfg.bench_single_steps, 0, 0.002, 80.0, 7.0, Integrator::Heun)?;
    let zero = ZeroCondition { inner: den, stages: n };
    let (single, cascade) = bench_pair(
        (
            "single",
            || {
                let start = std::time::Instant::now();
                let out = sample_stage(&zero, &single_sched, None, cfg.seed, &[batch, c, r, r])?;
                Ok(vec![StageRecord {
                    stage: 1,
                    resolution: r,
                    nfe: out.nfe,
                    seconds: start.elapsed().as_secs_f64(),
                }])
            },
        ),
        ("cascade", || Ok(sample_cascade(den, &cfg.cascade, cfg.seed, batch, c)?.stages)),
        batch,
        warmup,
        reps,
    )?;
    let s = speedup(&single, &cascade);
    Ok(BenchOutcome {
        single,
        cascade,
        speedup: s,
    })
}

pub fn cmd_bench(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    batch: usize,
    warmup: usize,
    reps: usize,
    allow_mismatch: bool,
    out: &mut dyn Write,
) -> Result<BenchOutcome> {
    let net = match checkpoint {
        Some(p) => load_net(cfg, p, allow_mismatch)?.0,
        None => UnifiedNet::build(cfg.net.clone(), &mut init_rng(cfg.seed))?,
    };
    let labels;
    let den: &dyn Denoiser<f32> = match cfg.net.label_count {
        Some(_) => {
            labels = Labeled {
                net: &net,
                labels: vec![0; batch],
            };
            &labels
        }
        None => &net,
    };
    let outcome = bench_net(den, cfg, batch, warmup, reps)?;
    emit(out, "bench", &outcome.single)?;
    emit(out, "bench", &outcome.cascade)?;
    emit(
        out,
        "speedup",
        &SpeedupRecord {
            single_latency_s: outcome.single.latency_s,
            cascade_latency_s: outcome.cascade.latency_s,
            single_nfe: outcome.single.stages.iter().map(|s| s.nfe).sum(),
            cascade_nfe: outcome.cascade.stages.iter().map(|s| s.nfe).collect(),
            speedup: outcome.speedup,
        },
    )?;
    Ok(outcome)
}

/// Reads the last cascade bench record in `bench_jsonl` and computes the
/// effective NFE, optionally with per-stage NFEs (stage 1 first) replaced.
pub fn cmd_effnfe(bench_jsonl: &Path, nfes: Option<&[usize]>, out: &mut dyn Write) -> Result<EffNfeReport> {
    let text = std::fs::read_to_string(bench_jsonl).map_err(|e| Error::io(bench_jsonl, e))?;
    let mut stages: Option<Vec<StageCost>> = None;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line)?;
        if v.get("kind").and_then(|k| k.as_str()) != Some("bench") || v.get("label").and_then(|l| l.as_str()) != Some("cascade") {
            continue;
        }
        let raw = v.get("stages").ok_or_else(|| Error::Format {
            what: "bench record",
            reason: format!("line {}: missing per-stage latencies", i + 1),
        })?;
        let parsed: Vec<StageCost> = serde_json::from_value(raw.clone()).map_err(|e| Error::Format {
            what: "bench record",
            reason: format!("line {}: {e}", i + 1),
        })?;
        if parsed.is_empty() {
            return Err(Error::Format {
                what: "bench record",
                reason: format!("line {}: no stage latencies", i + 1),
            });
        }
        stages = Some(parsed);
    }
    let mut stages = stages.ok_or_else(|| Error::Format {
        what: "bench record",
        reason: "no cascade bench record found".into(),
    })?;
    stages.sort_by_key(|s| s.stage);
    if let Some(nfes) = nfes {
        if nfes.len() != stages.len() {
            return Err(Error::Config(format!("{} NFEs for {} stages", nfes.len(), stages.len())));
        }
        for (s, &n) in stages.iter_mut().zip(nfes) {
            s.nfe = n;
        }
    }
    let report = effective_nfe(&stages, 1)?;
    emit(out, "effnfe", &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapesRecord {
    pub path: PathBuf,
    pub labels: PathBuf,
    pub count: usize,
    pub resolution: usize,
    pub channels: usize,
}

/// Writes `count` shape images at the top ladder resolution to `path`, and
/// their labels to `path` with a `.labels` extension appended.
pub fn cmd_gen_shapes(cfg: &RunConfig, count: usize, path: &Path, out: &mut dyn Write) -> Result<ShapesRecord> {
    let r = cfg.net.ladder.top();
    let shapes = gen_shapes(cfg.seed, count, r, &cfg.palette)?;
    let labels: Vec<f32> = shapes.labels.iter().map(|&l| l as f32).collect();
    let mut label_path = path.as_os_str().to_owned();
    label_path.push(".labels");
    let label_path = PathBuf::from(label_path);
    save_tensor(path, &shapes.images)?;
    save_tensor(&label_path, &Tensor::new(vec![count], labels)?)?;
    let rec = ShapesRecord {
        path: path.to_path_buf(),
        labels: label_path,
        count,
        resolution: r,
        channels: cfg.net.image_channels,
    };
    emit(out, "shapes", &rec)?;
    Ok(rec)
}
