//! Gaussian-mixture data laws with exact denoisers.
//!
//! Vectors are flattened `[C, r, r]` images in row-major order, and a batch of
//! them is a `d x B` matrix with one sample per column. That layout is exactly
//! the memory of a `[B, C, r, r]` tensor, so conversions are copies.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::cascade::{CascadeConfig, Denoiser};
use crate::error::{Error, Result};
use crate::numerics::{avg_pool2, upsample2, Real, Tensor, UpsampleMode};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn linalg(op: &'static str, reason: impl Into<String>) -> Error {
    Error::Linalg {
        op,
        reason: reason.into(),
    }
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

#[derive(Debug, Clone)]
struct Component {
    weight: f64,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    // eigendecomposition of cov, eigenvalues clamped at 0
    evals: DVector<f64>,
    evecs: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct GaussianMixture {
    comps: Vec<Component>,
    dim: usize,
}

/// One component of a mixture over `C x r x r` images: constant mean, squared
/// exponential covariance across pixel positions within each channel, plus a
/// nugget on the diagonal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComponentSpec {
    pub weight: f64,
    pub mean: f64,
    pub variance: f64,
    pub lengthscale: f64,
    pub nugget: f64,
}

/// Squared-exponential covariance on a `channels x r x r` grid.
pub fn rbf_covariance(channels: usize, r: usize, variance: f64, lengthscale: f64, nugget: f64) -> DMatrix<f64> {
    let d = channels * r * r;
    DMatrix::from_fn(d, d, |i, j| {
        let (ci, pi) = (i / (r * r), i % (r * r));
        let (cj, pj) = (j / (r * r), j % (r * r));
        if ci != cj {
            return 0.0;
        }
        let dy = (pi / r) as f64 - (pj / r) as f64;
        let dx = (pi % r) as f64 - (pj % r) as f64;
        let k = variance * (-(dx * dx + dy * dy) / (2.0 * lengthscale * lengthscale)).exp();
        if i == j {
            k + nugget
        } else {
            k
        }
    })
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<DVector<f64>>, covs: Vec<DMatrix<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != covs.len() {
            return Err(Error::invalid("mixture", "need equally many weights, means and covariances"));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("mixture", format!("weights {weights:?} are not a probability vector")));
        }
        let dim = means[0].len();
        let mut comps = Vec::with_capacity(weights.len());
        for (k, ((w, mean), cov)) in weights.into_iter().zip(means).zip(covs).enumerate() {
            if mean.len() != dim || cov.shape() != (dim, dim) {
                return Err(Error::shape("mixture", &[mean.len(), cov.nrows(), cov.ncols()], &[dim, dim, dim]));
            }
            let scale = cov.amax().max(1.0);
            if (&cov - cov.transpose()).amax() > 1e-10 * scale {
                return Err(linalg("mixture", format!("covariance {k} is not symmetric")));
            }
            let eig = SymmetricEigen::new(symmetrize(&cov));
            let min = eig.eigenvalues.min();
            if min < -1e-10 * scale {
                return Err(linalg("mixture", format!("covariance {k} has eigenvalue {min:e}")));
            }
            comps.push(Component {
                weight: w,
                mean,
                cov,
                evals: eig.eigenvalues.map(|v| v.max(0.0)),
                evecs: eig.eigenvectors,
            });
        }
        Ok(GaussianMixture { comps, dim })
    }

    pub fn gaussian(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![cov])
    }

    /// Mixture over `channels x r x r` images from parametric components.
    pub fn from_specs(channels: usize, r: usize, specs: &[ComponentSpec]) -> Result<Self> {
        let d = channels * r * r;
        let total: f64 = specs.iter().map(|s| s.weight).sum();
        if specs.is_empty() || !(total > 0.0) {
            return Err(Error::Config("mixture needs at least one positive weight".into()));
        }
        for s in specs {
            if !(s.variance >= 0.0 && s.lengthscale > 0.0 && s.nugget >= 0.0 && s.weight >= 0.0) {
                return Err(Error::Config(format!("invalid mixture component {s:?}")));
            }
        }
        Self::new(
            specs.iter().map(|s| s.weight / total).collect(),
            specs.iter().map(|s| DVector::from_element(d, s.mean)).collect(),
            specs
                .iter()
                .map(|s| rbf_covariance(channels, r, s.variance, s.lengthscale, s.nugget))
                .collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.comps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.comps.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.comps.iter().map(|c| c.weight).collect()
    }

    pub fn mean(&self, k: usize) -> &DVector<f64> {
        &self.comps[k].mean
    }

    pub fn cov(&self, k: usize) -> &DMatrix<f64> {
        &self.comps[k].cov
    }

    /// Overall mean and covariance of the mixture.
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let mut mean = DVector::zeros(self.dim);
        let mut second = DMatrix::zeros(self.dim, self.dim);
        for c in &self.comps {
            mean.axpy(c.weight, &c.mean, 1.0);
            second += (&c.cov + &c.mean * c.mean.transpose()) * c.weight;
        }
        let cov = second - &mean * mean.transpose();
        (mean, symmetrize(&cov))
    }

    fn check_batch(&self, x: &DMatrix<f64>, op: &'static str) -> Result<()> {
        if x.nrows() != self.dim {
            return Err(Error::shape(op, &[x.nrows(), x.ncols()], &[self.dim, x.ncols()]));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("{op} input"),
            });
        }
        Ok(())
    }

    /// Per-component log densities of `x` under the `sigma`-smoothed law
    /// (rows = components, columns = samples) and the posterior means.
    fn component_terms(&self, x: &DMatrix<f64>, sigma: f64) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
        let s2 = sigma * sigma;
        let n = x.ncols();
        let mut logp = DMatrix::from_element(self.comps.len(), n, f64::NEG_INFINITY);
        let mut means = Vec::with_capacity(self.comps.len());
        for (k, c) in self.comps.iter().enumerate() {
            let mut centered = x.clone();
            for mut col in centered.column_iter_mut() {
                col -= &c.mean;
            }
            let y = c.evecs.transpose() * &centered;
            let var = c.evals.map(|l| l + s2);
            if c.weight > 0.0 {
                let logdet: f64 = var.iter().map(|v| v.ln()).sum();
                let base = c.weight.ln() - 0.5 * (logdet + self.dim as f64 * LN_2PI);
                for j in 0..n {
                    let q: f64 = y.column(j).iter().zip(var.iter()).map(|(a, v)| a * a / v).sum();
                    logp[(k, j)] = base - 0.5 * q;
                }
            }
            let shrink = DVector::from_iterator(self.dim, c.evals.iter().zip(var.iter()).map(|(l, v)| l / v));
            let mut scaled = y;
            for mut row_block in scaled.column_iter_mut() {
                row_block.component_mul_assign(&shrink);
            }
            let mut post = &c.evecs * scaled;
            for mut col in post.column_iter_mut() {
                col += &c.mean;
            }
            means.push(post);
        }
        (logp, means)
    }

    /// `E[x0 | x0 + sigma * eps = x]` for each column of `x`.
    pub fn denoise_batch(&self, x: &DMatrix<f64>, sigma: f64) -> Result<DMatrix<f64>> {
        if !(sigma > 0.0) {
            return Err(Error::invalid("mixture_denoiser", format!("sigma must be > 0, got {sigma}")));
        }
        self.check_batch(x, "mixture_denoiser")?;
        let (logp, means) = self.component_terms(x, sigma);
        Ok(combine(&logp, means))
    }

    pub fn mixture_denoiser(&self, x: &DVector<f64>, sigma: f64) -> Result<DVector<f64>> {
        let out = self.denoise_batch(&DMatrix::from_column_slice(x.len(), 1, x.as_slice()), sigma)?;
        Ok(out.column(0).into_owned())
    }

    /// `log p_sigma(x)`, the density of `x0 + sigma * eps`.
    pub fn log_density(&self, x: &DVector<f64>, sigma: f64) -> Result<f64> {
        let xm = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        self.check_batch(&xm, "log_density")?;
        let (logp, _) = self.component_terms(&xm, sigma);
        Ok(log_sum_exp(logp.column(0).iter().copied()))
    }

    /// Law of `A x` for `x` drawn from this mixture.
    pub fn pushforward_linear(&self, a: &DMatrix<f64>) -> Result<GaussianMixture> {
        if a.ncols() != self.dim {
            return Err(Error::shape("pushforward_linear", &[a.nrows(), a.ncols()], &[a.nrows(), self.dim]));
        }
        GaussianMixture::new(
            self.weights(),
            self.comps.iter().map(|c| a * &c.mean).collect(),
            self.comps.iter().map(|c| symmetrize(&(a * &c.cov * a.transpose()))).collect(),
        )
    }

    /// `n` draws as columns of a `dim x n` matrix.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Result<DMatrix<f64>> {
        if n == 0 {
            return Err(Error::invalid("sample_mixture", "need n >= 1"));
        }
        let factors = self
            .comps
            .iter()
            .enumerate()
            .map(|(k, c)| {
                if c.weight == 0.0 {
                    return Ok(None);
                }
                Cholesky::new(symmetrize(&c.cov))
                    .map(|ch| Some(ch.l()))
                    .ok_or_else(|| linalg("sample_mixture", format!("covariance {k} is not positive definite")))
            })
            .collect::<Result<Vec<_>>>()?;
        let pick = WeightedIndex::new(self.weights())
            .map_err(|e| Error::invalid("sample_mixture", e.to_string()))?;
        let mut out = DMatrix::zeros(self.dim, n);
        for j in 0..n {
            let k = pick.sample(rng);
            let z = DVector::from_fn(self.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            let l = factors[k].as_ref().expect("zero-weight components are never picked");
            out.set_column(j, &(&self.comps[k].mean + l * z));
        }
        Ok(out)
    }
}

fn log_sum_exp(vals: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = vals.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + vals.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Responsibility-weighted average of per-component posterior means.
fn combine(logp: &DMatrix<f64>, mut means: Vec<DMatrix<f64>>) -> DMatrix<f64> {
    if means.len() == 1 {
        return means.pop().expect("one component");
    }
    let (d, n) = means[0].shape();
    let mut out = DMatrix::zeros(d, n);
    for j in 0..n {
        let col = logp.column(j);
        let lse = log_sum_exp(col.iter().copied());
        for (k, m) in means.iter().enumerate() {
            let r = (col[k] - lse).exp();
            if r > 0.0 {
                out.column_mut(j).axpy(r, &m.column(j), 1.0);
            }
        }
    }
    out
}

/// Matrix of a linear tensor map, found by applying it to the standard basis
/// of `[C, r, r]` images.
pub fn linear_map_matrix(
    channels: usize,
    r: usize,
    f: impl Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
) -> Result<DMatrix<f64>> {
    let d = channels * r * r;
    let mut basis = vec![0.0; d * d];
    for i in 0..d {
        basis[i * d + i] = 1.0;
    }
    let out = f(&Tensor::new(vec![d, channels, r, r], basis)?)?;
    let rows = out.numel() / d;
    // sample i of `out` is column i of the matrix
    Ok(DMatrix::from_column_slice(rows, d, out.data()))
}

/// `avg_pool2` from `r x r` to `r/2 x r/2` as a matrix.
pub fn pool_matrix(channels: usize, r: usize) -> Result<DMatrix<f64>> {
    linear_map_matrix(channels, r, avg_pool2)
}

/// Bilinear `upsample2` from `r x r` to `2r x 2r` as a matrix.
pub fn upsample_matrix(channels: usize, r: usize) -> Result<DMatrix<f64>> {
    linear_map_matrix(channels, r, |t| upsample2(t, UpsampleMode::Bilinear))
}

/// Gaussian over the stacked vector `(x_high, A x_high)`.
#[derive(Debug, Clone)]
pub struct JointGaussian {
    mean_high: DVector<f64>,
    cov_high: DMatrix<f64>,
    a: DMatrix<f64>,
}

impl JointGaussian {
    pub fn new(mean_high: DVector<f64>, cov_high: DMatrix<f64>, a: DMatrix<f64>) -> Result<Self> {
        let d = mean_high.len();
        if cov_high.shape() != (d, d) || a.ncols() != d {
            return Err(Error::shape("joint_gaussian", &[cov_high.nrows(), a.ncols()], &[d, d]));
        }
        Ok(JointGaussian {
            mean_high,
            cov_high: symmetrize(&cov_high),
            a,
        })
    }

    pub fn high_dim(&self) -> usize {
        self.mean_high.len()
    }

    pub fn low_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn map(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn stacked_mean(&self) -> DVector<f64> {
        let low = &self.a * &self.mean_high;
        DVector::from_iterator(self.high_dim() + self.low_dim(), self.mean_high.iter().chain(low.iter()).copied())
    }

    /// `[[S, S A^T], [A S, A S A^T]]`.
    pub fn stacked_cov(&self) -> DMatrix<f64> {
        let (d, m) = (self.high_dim(), self.low_dim());
        let sat = &self.cov_high * self.a.transpose();
        let mut out = DMatrix::zeros(d + m, d + m);
        out.view_mut((0, 0), (d, d)).copy_from(&self.cov_high);
        out.view_mut((0, d), (d, m)).copy_from(&sat);
        out.view_mut((d, 0), (m, d)).copy_from(&sat.transpose());
        out.view_mut((d, d), (m, m)).copy_from(&symmetrize(&(&self.a * &sat)));
        out
    }

    /// Posterior-mean gain and observation log-likelihood terms for one
    /// `(sigma, sigma_c)`.
    fn posterior(&self, sigma: f64, sigma_c: f64) -> Result<Posterior> {
        if !(sigma > 0.0 && sigma_c >= 0.0) {
            return Err(Error::invalid(
                "conditional_denoiser",
                format!("need sigma > 0 and sigma_c >= 0, got ({sigma}, {sigma_c})"),
            ));
        }
        let (d, m) = (self.high_dim(), self.low_dim());
        let mut s = self.stacked_cov();
        for i in 0..d {
            s[(i, i)] += sigma * sigma;
        }
        for i in d..d + m {
            s[(i, i)] += sigma_c * sigma_c;
        }
        let chol = Cholesky::new(s).ok_or_else(|| linalg("conditional_denoiser", "observation covariance is singular"))?;
        let l = chol.l();
        let logdet = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let linv = l
            .solve_lower_triangular(&DMatrix::identity(d + m, d + m))
            .ok_or_else(|| linalg("conditional_denoiser", "triangular solve failed"))?;
        // Cov(x_high, y) = [S, S A^T]
        let mut cross = DMatrix::zeros(d, d + m);
        cross.view_mut((0, 0), (d, d)).copy_from(&self.cov_high);
        cross.view_mut((0, d), (d, m)).copy_from(&(&self.cov_high * self.a.transpose()));
        Ok(Posterior {
            gain: cross * linv.transpose(),
            whiten: linv,
            offset: self.stacked_mean(),
            logdet,
        })
    }

    /// `E[x_high | x_high + sigma eps = x, A x_high + sigma_c eps_c = c]`,
    /// one sample per column of `x` and `cond`.
    pub fn denoise_batch(&self, x: &DMatrix<f64>, cond: &DMatrix<f64>, sigma: f64, sigma_c: f64) -> Result<DMatrix<f64>> {
        let post = self.posterior(sigma, sigma_c)?;
        let w = post.whitened(x, cond)?;
        Ok(post.mean(&self.mean_high, &w))
    }

    pub fn conditional_denoiser_joint(
        &self,
        x: &DVector<f64>,
        cond: &DVector<f64>,
        sigma: f64,
        sigma_c: f64,
    ) -> Result<DVector<f64>> {
        let xm = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        let cm = DMatrix::from_column_slice(cond.len(), 1, cond.as_slice());
        Ok(self.denoise_batch(&xm, &cm, sigma, sigma_c)?.column(0).into_owned())
    }
}

struct Posterior {
    gain: DMatrix<f64>,
    whiten: DMatrix<f64>,
    offset: DVector<f64>,
    logdet: f64,
}

impl Posterior {
    /// `L^{-1} (y - E y)` for the stacked observations.
    fn whitened(&self, x: &DMatrix<f64>, cond: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let d = x.nrows();
        let m = self.offset.len() - d;
        if cond.nrows() != m || cond.ncols() != x.ncols() {
            return Err(Error::shape("conditional_denoiser", &[cond.nrows(), cond.ncols()], &[m, x.ncols()]));
        }
        if x.iter().chain(cond.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "conditional_denoiser input".into(),
            });
        }
        let mut y = DMatrix::zeros(d + m, x.ncols());
        y.view_mut((0, 0), (d, x.ncols())).copy_from(x);
        y.view_mut((d, 0), (m, x.ncols())).copy_from(cond);
        for mut col in y.column_iter_mut() {
            col -= &self.offset;
        }
        Ok(&self.whiten * y)
    }

    fn mean(&self, prior_mean: &DVector<f64>, w: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = &self.gain * w;
        for mut col in out.column_iter_mut() {
            col += prior_mean;
        }
        out
    }

    fn log_lik(&self, w: &DMatrix<f64>) -> impl Iterator<Item = f64> + '_ {
        let n = self.offset.len() as f64;
        let base = -0.5 * (self.logdet + n * LN_2PI);
        w.column_iter()
            .map(move |c| base - 0.5 * c.norm_squared())
            .collect::<Vec<_>>()
            .into_iter()
    }
}

/// Exact conditional denoiser for mixture data: each component is a
/// [`JointGaussian`] and responsibilities come from the stacked observation.
#[derive(Debug, Clone)]
pub struct ConditionalMixture {
    weights: Vec<f64>,
    joints: Vec<JointGaussian>,
}

impl ConditionalMixture {
    pub fn new(mixture: &GaussianMixture, a: &DMatrix<f64>) -> Result<Self> {
        if a.ncols() != mixture.dim() {
            return Err(Error::shape("conditional_mixture", &[a.nrows(), a.ncols()], &[a.nrows(), mixture.dim()]));
        }
        let joints = mixture
            .comps
            .iter()
            .map(|c| JointGaussian::new(c.mean.clone(), c.cov.clone(), a.clone()))
            .collect::<Result<_>>()?;
        Ok(ConditionalMixture {
            weights: mixture.weights(),
            joints,
        })
    }

    pub fn denoise_batch(&self, x: &DMatrix<f64>, cond: &DMatrix<f64>, sigma: f64, sigma_c: f64) -> Result<DMatrix<f64>> {
        let n = x.ncols();
        let mut logp = DMatrix::from_element(self.joints.len(), n, f64::NEG_INFINITY);
        let mut means = Vec::with_capacity(self.joints.len());
        for (k, (j, &wt)) in self.joints.iter().zip(&self.weights).enumerate() {
            let post = j.posterior(sigma, sigma_c)?;
            let w = post.whitened(x, cond)?;
            if wt > 0.0 {
                for (col, ll) in post.log_lik(&w).enumerate() {
                    logp[(k, col)] = wt.ln() + ll;
                }
            }
            means.push(post.mean(&j.mean_high, &w));
        }
        Ok(combine(&logp, means))
    }
}

fn tensor_to_columns<T: Real>(t: &Tensor<T>) -> DMatrix<f64> {
    let b = t.shape()[0];
    DMatrix::from_column_slice(t.numel() / b, b, &t.to_f64_vec())
}

fn columns_to_tensor<T: Real>(m: &DMatrix<f64>, shape: &[usize]) -> Result<Tensor<T>> {
    Tensor::from_f64_slice(shape, m.as_slice())
}

enum StageOracle {
    Base(GaussianMixture),
    Conditional {
        model: ConditionalMixture,
        sigma_c: f64,
        // recovers the low-resolution condition from its bilinear upsampling
        unsample: DMatrix<f64>,
    },
}

/// Exact denoisers for every stage of a cascade whose full-resolution data
/// follow a known mixture. Lower stages see the mixture pushed through
/// repeated `avg_pool2`; conditional stages assume their condition carries
/// noise at the truncation level of the stage below.
pub struct OracleCascade {
    stages: Vec<StageOracle>,
}

impl OracleCascade {
    pub fn new(top: &GaussianMixture, channels: usize, config: &CascadeConfig) -> Result<Self> {
        let ladder = &config.ladder;
        if top.dim() != channels * ladder.top() * ladder.top() {
            return Err(Error::invalid(
                "oracle_cascade",
                format!("mixture dimension {} does not match {channels}x{r}x{r}", top.dim(), r = ladder.top()),
            ));
        }
        let n = ladder.len();
        let mut laws = vec![top.clone()];
        for stage in 1..n {
            let pool = pool_matrix(channels, ladder.resolution(stage)?)?;
            let next = laws.last().expect("non-empty").pushforward_linear(&pool)?;
            laws.push(next);
        }
        let mut stages = Vec::with_capacity(n);
        for stage in 1..=n {
            let law = &laws[stage - 1];
            let oracle = match config.condition_sigma(stage)? {
                None => StageOracle::Base(law.clone()),
                Some(sigma_c) => {
                    let r = ladder.resolution(stage)?;
                    let up = upsample_matrix(channels, r / 2)?;
                    let unsample = (up.transpose() * &up)
                        .try_inverse()
                        .ok_or_else(|| linalg("oracle_cascade", "bilinear upsampling is not injective"))?
                        * up.transpose();
                    StageOracle::Conditional {
                        model: ConditionalMixture::new(law, &pool_matrix(channels, r)?)?,
                        sigma_c,
                        unsample,
                    }
                }
            };
            stages.push(oracle);
        }
        Ok(OracleCascade { stages })
    }
}

impl<T: Real> Denoiser<T> for OracleCascade {
    fn denoise(&self, x: &Tensor<T>, cond: Option<&Tensor<T>>, sigma: f64, stage: usize) -> Result<Tensor<T>> {
        let oracle = stage
            .checked_sub(1)
            .and_then(|i| self.stages.get(i))
            .ok_or_else(|| Error::invalid("oracle", format!("no stage {stage}")))?;
        let xm = tensor_to_columns(x);
        let out = match (oracle, cond) {
            (StageOracle::Base(m), None) => m.denoise_batch(&xm, sigma)?,
            (StageOracle::Conditional { model, sigma_c, unsample }, Some(c)) => {
                let low = unsample * tensor_to_columns(c);
                model.denoise_batch(&xm, &low, sigma, *sigma_c)?
            }
            _ => {
                return Err(Error::Stage {
                    stage,
                    reason: "condition presence does not match the stage".into(),
                })
            }
        };
        columns_to_tensor(&out, x.shape())
    }
}
