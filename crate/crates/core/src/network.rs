//! The weight-shared multi-resolution denoiser.
//!
//! One U-Net trunk is indexed by spatial level: level `l` works at
//! `r_1 / 2^l`. Stage `i` (1-based, stage 1 is the full resolution) enters the
//! trunk at level `i - 1` through its own input convolution and leaves through
//! its own output convolution, so every level at or below `r_i` is reused by
//! all coarser stages. Parameters live in a single [`ParamStore`] keyed by
//! name; sharing is by name identity, never by copy.
//!
//! Naming scheme:
//!
//! ```text
//! io.in.r{res}.{weight,bias}            per-stage input conv
//! io.out.r{res}.{norm.gamma,norm.beta,weight,bias}
//! trunk.r{size}.{enc,dec}{j}.*          residual blocks at one spatial size
//! trunk.r{size}.{down,up}.*             1x1 transitions to/from size/2
//! embed.sigma.{fc1,fc2}.*               noise-level MLP
//! embed.res.map                         [embed_dim, N], column i = stage i
//! embed.label.map                       [label_count, embed_dim]
//! ```

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{default_groups, Activation, ParamStore, Real, Tape, Tensor, UpsampleMode, Var};
use crate::schedule::precond;

/// Image sides `r_1 > r_2 > ... > r_N`, each half the previous.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ResolutionLadder {
    resolutions: Vec<usize>,
}

impl ResolutionLadder {
    pub fn new(resolutions: Vec<usize>) -> Result<Self> {
        if resolutions.is_empty() {
            return Err(Error::Config("resolution ladder is empty".into()));
        }
        for &r in &resolutions {
            if r == 0 || !r.is_power_of_two() {
                return Err(Error::Config(format!("resolution {r} is not a power of two")));
            }
        }
        for w in resolutions.windows(2) {
            if w[0] != 2 * w[1] {
                return Err(Error::Config(format!(
                    "consecutive resolutions must halve: {} -> {}",
                    w[0], w[1]
                )));
            }
        }
        Ok(ResolutionLadder { resolutions })
    }

    /// Ladder of `levels` resolutions starting at `top`.
    pub fn halving(top: usize, levels: usize) -> Result<Self> {
        Self::new((0..levels).map(|i| top >> i).collect())
    }

    pub fn len(&self) -> usize {
        self.resolutions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.resolutions.is_empty()
    }

    pub fn resolutions(&self) -> &[usize] {
        &self.resolutions
    }

    /// Side length of 1-based `stage`.
    pub fn resolution(&self, stage: usize) -> Result<usize> {
        if stage == 0 || stage > self.len() {
            return Err(Error::invalid(
                "ladder",
                format!("stage {stage} outside 1..={}", self.len()),
            ));
        }
        Ok(self.resolutions[stage - 1])
    }

    pub fn top(&self) -> usize {
        self.resolutions[0]
    }

    pub fn bottom(&self) -> usize {
        *self.resolutions.last().expect("non-empty")
    }
}

impl fmt::Display for ResolutionLadder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.resolutions.iter().map(|r| r.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub ladder: ResolutionLadder,
    pub image_channels: usize,
    pub base_channels: usize,
    /// One entry per trunk level; `len() >= ladder.len()`.
    pub channel_mults: Vec<usize>,
    pub blocks_per_level: usize,
    pub embed_dim: usize,
    pub label_count: Option<usize>,
    pub sigma_data: f64,
}

impl NetConfig {
    pub fn new(ladder: ResolutionLadder, image_channels: usize) -> Self {
        NetConfig {
            ladder,
            image_channels,
            base_channels: 32,
            channel_mults: vec![1, 2, 2, 2],
            blocks_per_level: 2,
            embed_dim: 64,
            label_count: None,
            sigma_data: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let depth = self.channel_mults.len();
        if depth < self.ladder.len() {
            return Err(Error::Config(format!(
                "trunk depth {depth} is shallower than the {}-stage ladder",
                self.ladder.len()
            )));
        }
        if self.ladder.top() >> (depth - 1) == 0 {
            return Err(Error::Config(format!(
                "trunk depth {depth} too deep for resolution {}",
                self.ladder.top()
            )));
        }
        if self.image_channels == 0 || self.base_channels == 0 || self.blocks_per_level == 0 {
            return Err(Error::Config("channel and block counts must be positive".into()));
        }
        if self.channel_mults.contains(&0) {
            return Err(Error::Config("channel multipliers must be positive".into()));
        }
        if self.embed_dim < 2 || !self.embed_dim.is_multiple_of(2) {
            return Err(Error::Config("embed_dim must be even and >= 2".into()));
        }
        if self.label_count == Some(0) {
            return Err(Error::Config("label_count must be positive when set".into()));
        }
        if !(self.sigma_data > 0.0) {
            return Err(Error::Config("sigma_data must be positive".into()));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.channel_mults.len()
    }

    pub fn stages(&self) -> usize {
        self.ladder.len()
    }

    fn level_size(&self, level: usize) -> usize {
        self.ladder.top() >> level
    }

    fn level_channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mults[level]
    }

    /// Canonical text used for checkpoint digests.
    pub fn canonical(&self) -> String {
        format!(
            "ladder={};image_channels={};base_channels={};channel_mults={:?};blocks={};embed_dim={};labels={:?};sigma_data={:e}",
            self.ladder,
            self.image_channels,
            self.base_channels,
            self.channel_mults,
            self.blocks_per_level,
            self.embed_dim,
            self.label_count,
            self.sigma_data
        )
    }
}

/// Which part of the network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Io { resolution: usize },
    Trunk { size: usize },
    Embed,
}

pub fn param_group(name: &str) -> Option<ParamGroup> {
    let mut parts = name.split('.');
    let parse_r = |s: Option<&str>| s.and_then(|s| s.strip_prefix('r')).and_then(|s| s.parse().ok());
    match parts.next()? {
        "io" => {
            parts.next()?;
            Some(ParamGroup::Io {
                resolution: parse_r(parts.next())?,
            })
        }
        "trunk" => Some(ParamGroup::Trunk {
            size: parse_r(parts.next())?,
        }),
        "embed" => Some(ParamGroup::Embed),
        _ => None,
    }
}

/// Parameter names that take part in one stage's forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveSet {
    pub stage: usize,
    pub names: BTreeSet<String>,
}

impl ActiveSet {
    pub fn contains(&self, name: &str) -> bool {
        self.names.contains(name)
    }

    /// The trunk portion only.
    pub fn trunk(&self) -> BTreeSet<&str> {
        self.names
            .iter()
            .filter(|n| matches!(param_group(n), Some(ParamGroup::Trunk { .. })))
            .map(String::as_str)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedNet<T: Real> {
    config: NetConfig,
    params: ParamStore<T>,
}

fn he_normal<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

impl<T: Real> UnifiedNet<T> {
    /// Builds and initializes every parameter. Initialization order is fixed, so
    /// the same seed gives bit-identical weights.
    pub fn build<R: Rng + ?Sized>(config: NetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut p = ParamStore::new();
        let c = config.image_channels;
        let e = config.embed_dim;
        let n = config.stages();

        p.insert("embed.sigma.fc1.weight", he_normal(&[e, e], e, rng))?;
        p.insert("embed.sigma.fc1.bias", Tensor::zeros(&[e]))?;
        p.insert("embed.sigma.fc2.weight", he_normal(&[e, e], e, rng))?;
        p.insert("embed.sigma.fc2.bias", Tensor::zeros(&[e]))?;
        p.insert("embed.res.map", Tensor::zeros(&[e, n]))?;
        if let Some(l) = config.label_count {
            p.insert("embed.label.map", Tensor::randn(&[l, e], 1.0 / (l as f64).sqrt(), rng))?;
        }

        for stage in 1..=n {
            let r = config.ladder.resolution(stage)?;
            let ch = config.level_channels(stage - 1);
            let cin = if stage < n { 2 * c } else { c };
            p.insert(format!("io.in.r{r}.weight"), he_normal(&[ch, cin, 3, 3], cin * 9, rng))?;
            p.insert(format!("io.in.r{r}.bias"), Tensor::zeros(&[ch]))?;
            p.insert(format!("io.out.r{r}.norm.gamma"), Tensor::ones(&[ch]))?;
            p.insert(format!("io.out.r{r}.norm.beta"), Tensor::zeros(&[ch]))?;
            p.insert(format!("io.out.r{r}.weight"), Tensor::zeros(&[c, ch, 3, 3]))?;
            p.insert(format!("io.out.r{r}.bias"), Tensor::zeros(&[c]))?;
        }

        for level in 0..config.depth() {
            let s = config.level_size(level);
            let ch = config.level_channels(level);
            for side in ["enc", "dec"] {
                for j in 0..config.blocks_per_level {
                    let pre = format!("trunk.r{s}.{side}{j}");
                    for k in 1..=2 {
                        p.insert(format!("{pre}.conv{k}.weight"), he_normal(&[ch, ch, 3, 3], ch * 9, rng))?;
                        p.insert(format!("{pre}.conv{k}.bias"), Tensor::zeros(&[ch]))?;
                        p.insert(format!("{pre}.norm{k}.gamma"), Tensor::ones(&[ch]))?;
                        p.insert(format!("{pre}.norm{k}.beta"), Tensor::zeros(&[ch]))?;
                    }
                    p.insert(format!("{pre}.emb.weight"), he_normal(&[e, ch], e, rng))?;
                    p.insert(format!("{pre}.emb.bias"), Tensor::zeros(&[ch]))?;
                }
            }
            if level + 1 < config.depth() {
                let next = config.level_channels(level + 1);
                p.insert(format!("trunk.r{s}.down.weight"), he_normal(&[next, ch, 1, 1], ch, rng))?;
                p.insert(format!("trunk.r{s}.down.bias"), Tensor::zeros(&[next]))?;
                p.insert(format!("trunk.r{s}.up.weight"), he_normal(&[ch, next, 1, 1], next, rng))?;
                p.insert(format!("trunk.r{s}.up.bias"), Tensor::zeros(&[ch]))?;
            }
        }
        Ok(UnifiedNet { config, params: p })
    }

    /// Reassembles a network from stored parameters, checking names and shapes
    /// against what `config` would build.
    pub fn from_params(config: NetConfig, params: ParamStore<T>) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let template = UnifiedNet::<T>::build(config.clone(), &mut rng)?;
        let want: Vec<_> = template.params.iter().map(|(n, e)| (n, e.value.shape())).collect();
        let got: Vec<_> = params.iter().map(|(n, e)| (n, e.value.shape())).collect();
        if want != got {
            return Err(Error::Config(
                "stored parameters do not match the network configuration".into(),
            ));
        }
        Ok(UnifiedNet { config, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Extra parameters relative to a single-resolution network with the same
    /// trunk: the additional stage I/O convolutions, the conditioning input
    /// channels and the wider resolution map.
    pub fn multires_overhead(&self) -> Result<usize> {
        let mut plain = self.config.clone();
        plain.ladder = ResolutionLadder::new(vec![self.config.ladder.top()])?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let single = UnifiedNet::<T>::build(plain, &mut rng)?;
        Ok(self.param_count() - single.param_count())
    }

    fn check_stage(&self, stage: usize) -> Result<usize> {
        self.config.ladder.resolution(stage)
    }

    pub fn active_params(&self, stage: usize) -> Result<ActiveSet> {
        let r = self.check_stage(stage)?;
        let names = self
            .params
            .names()
            .filter(|name| match param_group(name) {
                Some(ParamGroup::Io { resolution }) => resolution == r,
                Some(ParamGroup::Trunk { size }) => size <= r,
                Some(ParamGroup::Embed) => true,
                None => false,
            })
            .map(str::to_string)
            .collect();
        Ok(ActiveSet { stage, names })
    }

    /// `embed.res.map` applied to the one-hot vector of `stage`.
    pub fn resolution_embed(&self, stage: usize) -> Result<Tensor<T>> {
        self.check_stage(stage)?;
        let map = self.params.get("embed.res.map").expect("built");
        let (e, n) = (map.shape()[0], map.shape()[1]);
        let col: Vec<T> = (0..e).map(|row| map.data()[row * n + stage - 1]).collect();
        Tensor::new(vec![e], col)
    }

    fn p(&self, tape: &mut Tape<T>, name: &str) -> Var {
        let value = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from a built network"));
        tape.param(name, value)
    }

    fn conv(&self, tape: &mut Tape<T>, prefix: &str, x: Var, pad: usize) -> Result<Var> {
        let w = self.p(tape, &format!("{prefix}.weight"));
        let b = self.p(tape, &format!("{prefix}.bias"));
        tape.conv2d(x, w, b, pad)
    }

    fn norm_silu(&self, tape: &mut Tape<T>, prefix: &str, x: Var) -> Result<Var> {
        let ch = tape.value(x).shape()[1];
        let g = self.p(tape, &format!("{prefix}.gamma"));
        let b = self.p(tape, &format!("{prefix}.beta"));
        let y = tape.group_norm(x, g, b, default_groups(ch))?;
        Ok(tape.silu(y))
    }

    fn block(&self, tape: &mut Tape<T>, prefix: &str, x: Var, emb: Var) -> Result<Var> {
        let h = self.conv(tape, &format!("{prefix}.conv1"), x, 1)?;
        let h = self.norm_silu(tape, &format!("{prefix}.norm1"), h)?;
        let ew = self.p(tape, &format!("{prefix}.emb.weight"));
        let eb = self.p(tape, &format!("{prefix}.emb.bias"));
        let e = tape.dense(emb, ew, eb, Activation::None)?;
        let h = tape.add_channel(h, e)?;
        let h = self.conv(tape, &format!("{prefix}.conv2"), h, 1)?;
        let h = self.norm_silu(tape, &format!("{prefix}.norm2"), h)?;
        tape.add(x, h)
    }

    /// Fixed Fourier features of `c_noise = ln(sigma) / 4`, `[B, embed_dim]`.
    fn sigma_features(&self, sigmas: &[f64]) -> Tensor<T> {
        let half = self.config.embed_dim / 2;
        let mut data = Vec::with_capacity(sigmas.len() * 2 * half);
        for &s in sigmas {
            let c = s.ln() / 4.0;
            let freqs = (0..half).map(|k| {
                let t = if half > 1 { k as f64 / (half - 1) as f64 } else { 0.0 };
                std::f64::consts::PI * 16f64.powf(t)
            });
            let (cos, sin): (Vec<f64>, Vec<f64>) = freqs.map(|f| ((f * c).cos(), (f * c).sin())).unzip();
            data.extend(cos.into_iter().chain(sin).map(T::from_f64_lossy));
        }
        Tensor::from_parts(vec![sigmas.len(), 2 * half], data)
    }

    fn embedding(
        &self,
        tape: &mut Tape<T>,
        sigmas: &[f64],
        stage: usize,
        labels: Option<&[usize]>,
    ) -> Result<Var> {
        let batch = sigmas.len();
        let feats = tape.constant(self.sigma_features(sigmas));
        let (w1, b1) = (self.p(tape, "embed.sigma.fc1.weight"), self.p(tape, "embed.sigma.fc1.bias"));
        let h = tape.dense(feats, w1, b1, Activation::Silu)?;
        let (w2, b2) = (self.p(tape, "embed.sigma.fc2.weight"), self.p(tape, "embed.sigma.fc2.bias"));
        let mut emb = tape.dense(h, w2, b2, Activation::None)?;

        let n = self.config.stages();
        let mut onehot = vec![T::zero(); n];
        onehot[stage - 1] = T::one();
        let map = self.p(tape, "embed.res.map");
        let oh = tape.constant(Tensor::from_parts(vec![n, 1], onehot));
        let res = tape.matmul(map, oh)?;
        let res = tape.reshape(res, &[self.config.embed_dim])?;
        emb = tape.add_bias(emb, res)?;

        match (self.config.label_count, labels) {
            (Some(count), Some(labels)) => {
                if labels.len() != batch {
                    return Err(Error::invalid(
                        "forward",
                        format!("{} labels for batch of {batch}", labels.len()),
                    ));
                }
                let mut onehot = vec![T::zero(); batch * count];
                for (i, &l) in labels.iter().enumerate() {
                    if l >= count {
                        return Err(Error::invalid("forward", format!("label {l} >= {count}")));
                    }
                    onehot[i * count + l] = T::one();
                }
                let oh = tape.constant(Tensor::from_parts(vec![batch, count], onehot));
                let map = self.p(tape, "embed.label.map");
                let le = tape.matmul(oh, map)?;
                emb = tape.add(emb, le)?;
            }
            (None, Some(_)) => {
                return Err(Error::invalid("forward", "labels given to an unconditional network"))
            }
            (Some(_), None) => {
                return Err(Error::invalid("forward", "class-conditional network needs labels"))
            }
            (None, None) => {}
        }
        Ok(tape.silu(emb))
    }

    /// Records the preconditioned denoiser on `tape` and returns its output node.
    pub fn record(
        &self,
        tape: &mut Tape<T>,
        x: &Tensor<T>,
        cond: Option<&Tensor<T>>,
        sigmas: &[f64],
        stage: usize,
        labels: Option<&[usize]>,
    ) -> Result<Var> {
        let r = self.check_stage(stage)?;
        let n = self.config.stages();
        let (b, c, h, w) = x.dims4()?;
        if c != self.config.image_channels || h != r || w != r {
            return Err(Error::shape("forward", x.shape(), &[b, self.config.image_channels, r, r]));
        }
        if sigmas.len() != b {
            return Err(Error::invalid("forward", format!("{} noise levels for batch of {b}", sigmas.len())));
        }
        if let Some(s) = sigmas.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::invalid("forward", format!("sigma must be positive, got {s}")));
        }
        match (stage < n, cond) {
            (true, None) => {
                return Err(Error::Stage {
                    stage,
                    reason: "conditional stage needs a low-resolution condition".into(),
                })
            }
            (false, Some(_)) => {
                return Err(Error::Stage {
                    stage,
                    reason: "the lowest stage takes no condition".into(),
                })
            }
            (true, Some(cv)) if cv.shape() != x.shape() => {
                return Err(Error::shape("forward", x.shape(), cv.shape()))
            }
            _ => {}
        }

        let pc: Vec<_> = sigmas.iter().map(|&s| precond(s, self.config.sigma_data)).collect();
        let to_t = |f: fn(&crate::schedule::Precond) -> f64| -> Vec<T> {
            pc.iter().map(|p| T::from_f64_lossy(f(p))).collect()
        };
        let (c_in, c_out, c_skip) = (to_t(|p| p.c_in), to_t(|p| p.c_out), to_t(|p| p.c_skip));

        let emb = self.embedding(tape, sigmas, stage, labels)?;
        let xv = tape.constant(x.clone());
        let mut input = tape.scale_samples(xv, &c_in)?;
        if let Some(cv) = cond {
            let cv = tape.constant(cv.clone());
            input = tape.concat_channels(input, cv)?;
        }

        let entry = stage - 1;
        let depth = self.config.depth();
        let mut hv = self.conv(tape, &format!("io.in.r{r}"), input, 1)?;
        let mut skips = Vec::with_capacity(depth - entry);
        for level in entry..depth {
            let s = self.config.level_size(level);
            for j in 0..self.config.blocks_per_level {
                hv = self.block(tape, &format!("trunk.r{s}.enc{j}"), hv, emb)?;
            }
            skips.push(hv);
            if level + 1 < depth {
                let pooled = tape.avg_pool2(hv)?;
                hv = self.conv(tape, &format!("trunk.r{s}.down"), pooled, 0)?;
            }
        }
        for level in (entry..depth).rev() {
            let s = self.config.level_size(level);
            if level + 1 < depth {
                let up = tape.upsample2(hv, UpsampleMode::Bilinear)?;
                let up = self.conv(tape, &format!("trunk.r{s}.up"), up, 0)?;
                hv = tape.add(up, skips[level - entry])?;
            }
            for j in 0..self.config.blocks_per_level {
                hv = self.block(tape, &format!("trunk.r{s}.dec{j}"), hv, emb)?;
            }
        }
        let hv = self.norm_silu(tape, &format!("io.out.r{r}.norm"), hv)?;
        let raw = self.conv(tape, &format!("io.out.r{r}"), hv, 1)?;

        let scaled = tape.scale_samples(raw, &c_out)?;
        let mut skip = x.clone();
        let per = skip.numel() / b;
        for (chunk, &cs) in skip.data_mut().chunks_mut(per).zip(&c_skip) {
            chunk.iter_mut().for_each(|v| *v = *v * cs);
        }
        let skip = tape.constant(skip);
        tape.add(scaled, skip)
    }

    /// Denoised estimate at a single noise level shared by the batch.
    pub fn forward(
        &self,
        x: &Tensor<T>,
        cond: Option<&Tensor<T>>,
        sigma: f64,
        stage: usize,
        label: Option<usize>,
    ) -> Result<Tensor<T>> {
        let b = x.shape().first().copied().unwrap_or(0);
        let labels = label.map(|l| vec![l; b]);
        self.forward_batch(x, cond, &vec![sigma; b], stage, labels.as_deref())
    }

    /// Denoised estimate with per-sample noise levels and labels.
    pub fn forward_batch(
        &self,
        x: &Tensor<T>,
        cond: Option<&Tensor<T>>,
        sigmas: &[f64],
        stage: usize,
        labels: Option<&[usize]>,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let out = self.record(&mut tape, x, cond, sigmas, stage, labels)?;
        tape.value(out)
            .clone()
            .check_finite(|| format!("network forward at stage {stage}"))
    }
}
