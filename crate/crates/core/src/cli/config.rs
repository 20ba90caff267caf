//! Flat `key = value` run configuration.
//!
//! ```text
//! # comments start with '#'
//! ladder = 16,8
//! image_channels = 1
//! steps_stage1 = 17
//! sigma_min_stage2 = 0.002
//! ```
//!
//! Per-stage keys carry a `_stage{i}` suffix and mixture components a
//! `_comp{k}` suffix. Every key is optional except `ladder`; unknown keys are
//! an error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::cascade::{default_trunc, CascadeConfig, Integrator, LossMode, StageSchedule, TrainConfig};
use crate::error::{Error, Result};
use crate::network::{NetConfig, ResolutionLadder};
use crate::numerics::AdamConfig;
use crate::oracle::{ComponentSpec, GaussianMixture};
use crate::schedule::LossWeightConfig;

/// Where training images come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    /// Procedural rectangles and blobs generated in memory.
    Shapes { count: usize },
    /// Draws from the configured mixture.
    Mixture { count: usize },
    /// A tensor file on disk, optionally with a label file.
    File { path: PathBuf, labels: Option<PathBuf> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub net: NetConfig,
    pub cascade: CascadeConfig,
    pub loss: LossWeightConfig,
    pub adam: AdamConfig,
    pub loss_mode: LossMode,
    pub train_steps: u64,
    pub batch: usize,
    pub checkpoint_every: u64,
    pub dataset: DatasetSource,
    pub mixture: Option<Vec<ComponentSpec>>,
    /// Colours for `gen-shapes`, each with `image_channels` components.
    pub palette: Vec<Vec<f64>>,
    /// Heun steps of the full-resolution baseline in `bench`.
    pub bench_single_steps: usize,
    pub out_dir: Option<PathBuf>,
}

struct Keys {
    map: BTreeMap<String, (usize, String)>,
}

impl Keys {
    fn take<V: FromStr>(&mut self, key: &str) -> Result<Option<V>>
    where
        V::Err: std::fmt::Display,
    {
        match self.map.remove(key) {
            None => Ok(None),
            Some((line, raw)) => raw
                .parse()
                .map(Some)
                .map_err(|e| Error::Config(format!("line {line}: {key} = {raw:?}: {e}"))),
        }
    }

    fn take_or<V: FromStr>(&mut self, key: &str, default: V) -> Result<V>
    where
        V::Err: std::fmt::Display,
    {
        Ok(self.take(key)?.unwrap_or(default))
    }

    fn take_list<V: FromStr>(&mut self, key: &str, sep: char) -> Result<Option<Vec<V>>>
    where
        V::Err: std::fmt::Display,
    {
        match self.map.remove(key) {
            None => Ok(None),
            Some((line, raw)) => raw
                .split(sep)
                .map(|p| p.trim().parse::<V>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(Some)
                .map_err(|e| Error::Config(format!("line {line}: {key} = {raw:?}: {e}"))),
        }
    }
}

fn parse_lines(text: &str) -> Result<BTreeMap<String, (usize, String)>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if map.insert(k.clone(), (i + 1, v)).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {k}", i + 1)));
        }
    }
    Ok(map)
}

fn default_palette(channels: usize) -> Vec<Vec<f64>> {
    let levels = [0.9, -0.2, 0.5, 0.1, 0.75, -0.5];
    (0..6)
        .map(|k| (0..channels).map(|c| levels[(k + 2 * c) % levels.len()]).collect())
        .collect()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut keys = Keys { map: parse_lines(text)? };
        let ladder_list: Vec<usize> = keys
            .take_list("ladder", ',')?
            .ok_or_else(|| Error::Config("missing required key ladder".into()))?;
        let ladder = ResolutionLadder::new(ladder_list)?;
        let n = ladder.len();

        let mut net = NetConfig::new(ladder.clone(), keys.take_or("image_channels", 1)?);
        net.base_channels = keys.take_or("base_channels", net.base_channels)?;
        if let Some(m) = keys.take_list("channel_mults", ',')? {
            net.channel_mults = m;
        }
        net.blocks_per_level = keys.take_or("blocks_per_level", net.blocks_per_level)?;
        net.embed_dim = keys.take_or("embed_dim", net.embed_dim)?;
        net.label_count = keys.take("label_count")?;
        net.sigma_data = keys.take_or("sigma_data", net.sigma_data)?;
        net.validate()?;

        let loss = LossWeightConfig {
            sigma_data: net.sigma_data,
            p_mean: keys.take_or("p_mean", -1.2)?,
            p_std: keys.take_or("p_std", 1.2)?,
        };
        loss.validate()?;
        let d = AdamConfig::default();
        let adam = AdamConfig {
            lr: keys.take_or("lr", d.lr)?,
            beta1: keys.take_or("beta1", d.beta1)?,
            beta2: keys.take_or("beta2", d.beta2)?,
            eps: keys.take_or("eps", d.eps)?,
        };
        if !(adam.lr > 0.0 && (0.0..1.0).contains(&adam.beta1) && (0.0..1.0).contains(&adam.beta2) && adam.eps > 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {adam:?}")));
        }

        let rho: f64 = keys.take_or("rho", 7.0)?;
        let mut stages = Vec::with_capacity(n);
        for stage in 1..=n {
            let lowest = stage == n;
            let steps: usize = keys.take_or(&format!("steps_stage{stage}"), if lowest { 18 } else { 17 })?;
            let trunc_default = if stage == 1 || steps < 2 { 0 } else { default_trunc(steps) };
            let trunc = keys.take_or(&format!("trunc_stage{stage}"), trunc_default)?;
            let (lo, hi) = if lowest { (0.002, 80.0) } else { (0.01, 50.0) };
            let sigma_min = keys.take_or(&format!("sigma_min_stage{stage}"), lo)?;
            let sigma_max = keys.take_or(&format!("sigma_max_stage{stage}"), hi)?;
            let integrator = match keys.take::<String>(&format!("integrator_stage{stage}"))? {
                Some(s) => Integrator::parse(&s)?,
                None => Integrator::Heun,
            };
            stages.push(StageSchedule::new(stage, steps, trunc, sigma_min, sigma_max, rho, integrator)?);
        }
        let jitter = (keys.take_or("jitter_lo", 0.8)?, keys.take_or("jitter_hi", 1.25)?);
        let cascade = CascadeConfig::new(ladder.clone(), stages, jitter)?;

        let loss_mode = match keys.take::<String>("loss_mode")?.as_deref() {
            None | Some("per_stage") => LossMode::PerStage,
            Some("summed") => LossMode::Summed,
            Some(other) => return Err(Error::Config(format!("unknown loss_mode {other:?}"))),
        };

        let components: usize = keys.take_or("mixture_components", 0)?;
        let mixture = if components == 0 {
            None
        } else {
            let mut specs = Vec::with_capacity(components);
            for k in 1..=components {
                specs.push(ComponentSpec {
                    weight: keys.take_or(&format!("mixture_weight_comp{k}"), 1.0)?,
                    mean: keys.take_or(&format!("mixture_mean_comp{k}"), 0.0)?,
                    variance: keys.take_or(&format!("mixture_variance_comp{k}"), 0.25)?,
                    lengthscale: keys.take_or(&format!("mixture_lengthscale_comp{k}"), 2.0)?,
                    nugget: keys.take_or(&format!("mixture_nugget_comp{k}"), 1e-3)?,
                });
            }
            Some(specs)
        };

        let dataset_count: usize = keys.take_or("dataset_count", 2048)?;
        let dataset = match keys.take::<String>("dataset")?.as_deref() {
            None | Some("shapes") => DatasetSource::Shapes { count: dataset_count },
            Some("mixture") => DatasetSource::Mixture { count: dataset_count },
            Some(path) => DatasetSource::File {
                path: PathBuf::from(path),
                labels: keys.take::<String>("dataset_labels")?.map(PathBuf::from),
            },
        };
        if dataset == (DatasetSource::Mixture { count: dataset_count }) && mixture.is_none() {
            return Err(Error::Config("dataset = mixture needs mixture_components".into()));
        }

        let palette = match keys.take_list::<String>("palette", ',')? {
            None => default_palette(net.image_channels),
            Some(colors) => colors
                .iter()
                .map(|c| {
                    let v = c
                        .split(':')
                        .map(|p| p.trim().parse::<f64>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|e| Error::Config(format!("palette colour {c:?}: {e}")))?;
                    if v.len() != net.image_channels || v.iter().any(|x| !(-1.0..=1.0).contains(x)) {
                        return Err(Error::Config(format!(
                            "palette colour {c:?} needs {} components in [-1, 1]",
                            net.image_channels
                        )));
                    }
                    Ok(v)
                })
                .collect::<Result<_>>()?,
        };
        if palette.is_empty() {
            return Err(Error::Config("palette is empty".into()));
        }

        let cfg = RunConfig {
            seed: keys.take_or("seed", 0)?,
            train_steps: keys.take_or("steps", 1000)?,
            batch: keys.take_or("batch", 32)?,
            checkpoint_every: keys.take_or("checkpoint_every", 500)?,
            bench_single_steps: keys.take_or("bench_single_steps", 18)?,
            out_dir: keys.take::<String>("out_dir")?.map(PathBuf::from),
            net,
            cascade,
            loss,
            adam,
            loss_mode,
            dataset,
            mixture,
            palette,
        };
        if let Some(key) = keys.map.keys().next() {
            let line = keys.map[key].0;
            return Err(Error::Config(format!("line {line}: unknown key {key}")));
        }
        if cfg.batch == 0 || cfg.checkpoint_every == 0 || cfg.bench_single_steps < 2 {
            return Err(Error::Config("batch, checkpoint_every must be positive and bench_single_steps >= 2".into()));
        }
        if let Some(specs) = &cfg.mixture {
            // surface component errors before any work starts
            cfg.mixture_at_top_with(specs)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn mixture_at_top_with(&self, specs: &[ComponentSpec]) -> Result<GaussianMixture> {
        let r = self.net.ladder.top();
        if self.net.image_channels * r * r > 768 {
            return Err(Error::Config(format!(
                "mixture oracles are limited to 768 dimensions, got {}x{r}x{r}",
                self.net.image_channels
            )));
        }
        GaussianMixture::from_specs(self.net.image_channels, r, specs)
    }

    /// The configured mixture over full-resolution images.
    pub fn mixture_at_top(&self) -> Result<GaussianMixture> {
        let specs = self
            .mixture
            .as_ref()
            .ok_or_else(|| Error::Config("no mixture_components configured".into()))?;
        self.mixture_at_top_with(specs)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            cascade: self.cascade.clone(),
            loss: self.loss,
            adam: self.adam,
            mode: self.loss_mode,
            seed: self.seed,
        }
    }
}
