//! Exact clean-sample predictors for Gaussian-mixture data.
//!
//! Every function here conditions a [`GmmPrior`] on a variance-preserving
//! observation `x_t = sqrt(abar) x0 + sqrt(1 - abar) eps` and, optionally, on a
//! linear measurement `y = H x0 + sigma_y z`. Component responsibilities are
//! always computed in log space.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::inverse::{InverseProblem, LinearOperator};
use crate::linalg::{self, Matrix, Vector};
use crate::schedule::NoiseSchedule;

/// One weighted Gaussian of a mixture prior.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: Vector,
    pub cov: Matrix,
    pub label: Option<u32>,
}

/// Gaussian-mixture data distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmPrior {
    dim: usize,
    components: Vec<GmmComponent>,
}

impl GmmPrior {
    pub fn new(components: Vec<GmmComponent>) -> Result<Self> {
        let first = components.first().ok_or_else(|| param("prior needs at least one component"))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(param("prior dimension must be positive"));
        }
        let mut total = 0.0;
        for (k, c) in components.iter().enumerate() {
            if !(c.weight > 0.0 && c.weight <= 1.0) {
                return Err(param(format!("component {k} weight {} outside (0, 1]", c.weight)));
            }
            if c.mean.len() != dim || c.cov.shape() != (dim, dim) {
                return Err(param(format!("component {k} has inconsistent dimensions")));
            }
            linalg::ensure_finite(&c.mean, "component mean")?;
            if (&c.cov - c.cov.transpose()).amax() > 1e-12 * c.cov.amax().max(1.0) {
                return Err(param(format!("component {k} covariance is not symmetric")));
            }
            if linalg::cholesky(&c.cov).is_err() {
                return Err(param(format!("component {k} covariance is not positive definite")));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(param(format!("weights sum to {total}, expected 1")));
        }
        Ok(Self { dim, components })
    }

    /// Single-component `N(0, I)`.
    pub fn standard_normal(dim: usize) -> Self {
        Self::new(vec![GmmComponent {
            weight: 1.0,
            mean: Vector::zeros(dim),
            cov: Matrix::identity(dim, dim),
            label: None,
        }])
        .expect("standard normal is a valid prior")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[GmmComponent] {
        &self.components
    }

    pub fn labels(&self) -> Vec<u32> {
        let mut labels: Vec<u32> = self.components.iter().filter_map(|c| c.label).collect();
        labels.sort_unstable();
        labels.dedup();
        labels
    }

    pub fn has_label(&self, label: u32) -> bool {
        self.components.iter().any(|c| c.label == Some(label))
    }

    /// Prior restricted to the components tagged `label`, weights renormalized.
    pub fn restrict(&self, label: u32) -> Result<GmmPrior> {
        let kept: Vec<&GmmComponent> = self.components.iter().filter(|c| c.label == Some(label)).collect();
        if kept.is_empty() {
            return Err(param(format!("unknown class label {label}")));
        }
        if kept.len() == self.components.len() {
            return Ok(self.clone());
        }
        let total: f64 = kept.iter().map(|c| c.weight).sum();
        Ok(Self {
            dim: self.dim,
            components: kept.into_iter().map(|c| GmmComponent { weight: c.weight / total, ..c.clone() }).collect(),
        })
    }

    /// Exact mean and covariance of the mixture.
    pub fn moments(&self) -> (Vector, Matrix) {
        let mean = self.components.iter().fold(Vector::zeros(self.dim), |acc, c| acc + &c.mean * c.weight);
        let second = self
            .components
            .iter()
            .fold(Matrix::zeros(self.dim, self.dim), |acc, c| acc + (&c.cov + &c.mean * c.mean.transpose()) * c.weight);
        let cov = second - &mean * mean.transpose();
        (mean, linalg::symmetrize(&cov))
    }

    /// Exact draw from the prior.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector {
        let k = pick_component(self.components.iter().map(|c| c.weight), rng);
        let c = &self.components[k];
        linalg::sample_gaussian(&c.mean, &c.cov, rng).expect("prior covariances are SPD")
    }

    /// Index of the component whose mean is closest to `x`.
    pub fn nearest_component(&self, x: &Vector) -> usize {
        self.components
            .iter()
            .enumerate()
            .map(|(k, c)| (k, (x - &c.mean).norm_squared()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(k, _)| k)
            .unwrap_or(0)
    }
}

fn pick_component<R: Rng + ?Sized>(weights: impl Iterator<Item = f64>, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (k, w) in weights.enumerate() {
        acc += w;
        last = k;
        if u < acc {
            return k;
        }
    }
    last
}

/// Structured-text form of a [`GmmPrior`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    #[serde(rename = "component")]
    pub components: Vec<ComponentSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Row-major rows of the covariance matrix.
    pub cov: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u32>,
}

impl PriorSpec {
    pub fn build(&self) -> Result<GmmPrior> {
        let components = self
            .components
            .iter()
            .map(|c| {
                let dim = c.mean.len();
                if c.cov.len() != dim || c.cov.iter().any(|row| row.len() != dim) {
                    return Err(param("covariance must be a dim x dim list of rows"));
                }
                Ok(GmmComponent {
                    weight: c.weight,
                    mean: Vector::from_vec(c.mean.clone()),
                    cov: Matrix::from_fn(dim, dim, |i, j| c.cov[i][j]),
                    label: c.label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        GmmPrior::new(components)
    }

    pub fn from_prior(prior: &GmmPrior) -> Self {
        Self {
            components: prior
                .components
                .iter()
                .map(|c| ComponentSpec {
                    weight: c.weight,
                    mean: c.mean.iter().copied().collect(),
                    cov: c.cov.row_iter().map(|r| r.iter().copied().collect()).collect(),
                    label: c.label,
                })
                .collect(),
        }
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("prior spec is always representable")
    }
}

/// Which flavour of the data distribution the denoiser targets.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "lowercase")]
pub enum Condition {
    #[default]
    Unconditional,
    Class {
        label: u32,
    },
    /// Classifier-free guidance with scale `scale` toward `label`.
    Guided {
        label: u32,
        scale: f64,
    },
}

impl Condition {
    pub fn validate(&self, prior: &GmmPrior) -> Result<()> {
        match *self {
            Condition::Unconditional => Ok(()),
            Condition::Class { label } => check_label(prior, label),
            Condition::Guided { label, scale } => {
                if !(scale.is_finite() && scale >= 0.0) {
                    return Err(param(format!("guidance scale must be finite and >= 0, got {scale}")));
                }
                check_label(prior, label)
            }
        }
    }
}

fn check_label(prior: &GmmPrior, label: u32) -> Result<()> {
    if prior.has_label(label) {
        Ok(())
    } else {
        Err(param(format!("unknown class label {label}")))
    }
}

/// Posterior of `x0` restricted to one mixture component.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentPosterior {
    /// Posterior responsibility of the component.
    pub weight: f64,
    pub mean: Vector,
    pub cov: Matrix,
}

/// Result of a denoiser call.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    pub x0_hat: Vector,
    /// Full posterior mixture, when the predictor computed one.
    pub posterior: Option<Vec<ComponentPosterior>>,
}

impl DenoiserOutput {
    pub fn responsibilities(&self) -> Option<Vec<f64>> {
        self.posterior.as_ref().map(|p| p.iter().map(|c| c.weight).collect())
    }
}

fn check_alpha_bar(alpha_bar: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha_bar) {
        Ok(())
    } else {
        Err(param(format!("alpha_bar {alpha_bar} outside [0, 1]")))
    }
}

fn check_t(schedule: &NoiseSchedule, t: usize) -> Result<()> {
    if t == 0 || t > schedule.len() {
        return Err(param(format!("denoiser timestep {t} outside 1..={}", schedule.len())));
    }
    Ok(())
}

/// Posterior mixture of `x0` given `x_t` at noise level `alpha_bar`.
pub fn posterior_at(prior: &GmmPrior, alpha_bar: f64, x_t: &Vector) -> Result<Vec<ComponentPosterior>> {
    check_alpha_bar(alpha_bar)?;
    if x_t.len() != prior.dim {
        return Err(param(format!("x_t has dimension {}, prior has {}", x_t.len(), prior.dim)));
    }
    linalg::ensure_finite(x_t, "x_t")?;
    let scale = alpha_bar.sqrt();
    let id = Matrix::identity(prior.dim, prior.dim);
    let mut log_w = Vec::with_capacity(prior.components.len());
    let mut parts = Vec::with_capacity(prior.components.len());
    for c in &prior.components {
        let s = &c.cov * alpha_bar + &id * (1.0 - alpha_bar);
        let chol = linalg::cholesky(&s)?;
        let resid = x_t - &c.mean * scale;
        log_w.push(c.weight.ln() + linalg::log_gauss(&resid, &chol));
        // gain = sqrt(abar) Sigma S^-1, computed as (S^-1 Sigma)^T since both are symmetric.
        let gain = chol.solve(&c.cov).transpose() * scale;
        let mean = &c.mean + &gain * resid;
        let cov = linalg::symmetrize(&(&c.cov - &gain * &c.cov * scale));
        parts.push((mean, cov));
    }
    Ok(normalize(log_w, parts))
}

fn normalize(log_w: Vec<f64>, parts: Vec<(Vector, Matrix)>) -> Vec<ComponentPosterior> {
    let norm = linalg::log_sum_exp(&log_w);
    log_w
        .into_iter()
        .zip(parts)
        .map(|(lw, (mean, cov))| ComponentPosterior { weight: (lw - norm).exp(), mean, cov })
        .collect()
}

fn mixture_mean(posterior: &[ComponentPosterior]) -> Vector {
    let dim = posterior[0].mean.len();
    posterior.iter().fold(Vector::zeros(dim), |acc, c| acc + &c.mean * c.weight)
}

/// `E[x0 | x_t]` at an explicit `alpha_bar`.
pub fn posterior_mean_at(prior: &GmmPrior, alpha_bar: f64, x_t: &Vector) -> Result<DenoiserOutput> {
    let posterior = posterior_at(prior, alpha_bar, x_t)?;
    let x0_hat = mixture_mean(&posterior);
    linalg::ensure_finite(&x0_hat, "posterior mean")?;
    Ok(DenoiserOutput { x0_hat, posterior: Some(posterior) })
}

/// Exact `E[x0 | x_t]` under the VP forward model at timestep `t`.
pub fn posterior_mean(prior: &GmmPrior, schedule: &NoiseSchedule, t: usize, x_t: &Vector) -> Result<DenoiserOutput> {
    check_t(schedule, t)?;
    posterior_mean_at(prior, schedule.alpha_bar(t), x_t)
}

/// Exact draw of `x0 ~ p(x0 | x_t)` at an explicit `alpha_bar`.
pub fn posterior_sample_at<R: Rng + ?Sized>(
    prior: &GmmPrior,
    alpha_bar: f64,
    x_t: &Vector,
    rng: &mut R,
) -> Result<DenoiserOutput> {
    let posterior = posterior_at(prior, alpha_bar, x_t)?;
    let k = pick_component(posterior.iter().map(|c| c.weight), rng);
    let x0_hat = linalg::sample_gaussian(&posterior[k].mean, &posterior[k].cov, rng)?;
    Ok(DenoiserOutput { x0_hat, posterior: Some(posterior) })
}

pub fn posterior_sample<R: Rng + ?Sized>(
    prior: &GmmPrior,
    schedule: &NoiseSchedule,
    t: usize,
    x_t: &Vector,
    rng: &mut R,
) -> Result<DenoiserOutput> {
    check_t(schedule, t)?;
    posterior_sample_at(prior, schedule.alpha_bar(t), x_t, rng)
}

/// Classifier-free guidance in noise space.
///
/// `eps = eps_u + w (eps_c - eps_u)` with `eps = (x_t - sqrt(abar) x0) / sqrt(1 - abar)`,
/// mapped back to a clean-sample prediction. At `abar` of exactly 0 or 1 the
/// noise parameterization is singular and the equivalent affine combination of
/// the clean-sample predictions is used instead.
pub fn cfg_combine(uncond: &Vector, cond: &Vector, scale: f64, alpha_bar: f64, x_t: &Vector) -> Vector {
    if alpha_bar <= 0.0 || alpha_bar >= 1.0 {
        return uncond + (cond - uncond) * scale;
    }
    let (a, s) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let eps_u = (x_t - uncond * a) / s;
    let eps_c = (x_t - cond * a) / s;
    let eps = &eps_u + (eps_c - &eps_u) * scale;
    (x_t - eps * s) / a
}

fn conditional_with<F>(
    prior: &GmmPrior,
    cond: &Condition,
    alpha_bar: f64,
    x_t: &Vector,
    base: F,
) -> Result<DenoiserOutput>
where
    F: Fn(&GmmPrior) -> Result<DenoiserOutput>,
{
    cond.validate(prior)?;
    match *cond {
        Condition::Unconditional => base(prior),
        Condition::Class { label } => base(&prior.restrict(label)?),
        Condition::Guided { label, scale } => {
            let uncond = base(prior)?;
            let class = base(&prior.restrict(label)?)?;
            let x0_hat = cfg_combine(&uncond.x0_hat, &class.x0_hat, scale, alpha_bar, x_t);
            linalg::ensure_finite(&x0_hat, "guided prediction")?;
            Ok(DenoiserOutput { x0_hat, posterior: None })
        }
    }
}

/// Class-restricted or guided posterior mean at an explicit `alpha_bar`.
pub fn conditional_posterior_mean_at(
    prior: &GmmPrior,
    cond: &Condition,
    alpha_bar: f64,
    x_t: &Vector,
) -> Result<DenoiserOutput> {
    conditional_with(prior, cond, alpha_bar, x_t, |p| posterior_mean_at(p, alpha_bar, x_t))
}

pub fn conditional_posterior_mean(
    prior: &GmmPrior,
    cond: &Condition,
    schedule: &NoiseSchedule,
    t: usize,
    x_t: &Vector,
) -> Result<DenoiserOutput> {
    check_t(schedule, t)?;
    conditional_posterior_mean_at(prior, cond, schedule.alpha_bar(t), x_t)
}

/// Per-coordinate observation of the rotated clean sample.
#[derive(Debug, Clone, Copy)]
enum CoordObs {
    Exact(f64),
    Noisy { value: f64, var: f64 },
    Missing,
}

/// `E[x0 | x_t, y]` for `y = H x0 + sigma_y z`, at an explicit `alpha_bar`.
///
/// Works in the right-singular basis of `H`, where both observations are
/// diagonal: `x_t` sees every rotated coordinate with variance
/// `(1 - abar) / abar`, and `y` sees the first `rank` coordinates with variance
/// `(sigma_y / s_i)^2`. Exact observations (sigma_y = 0, or abar = 1) are
/// conditioned on first, the remaining noisy ones through a Kalman update.
pub fn measurement_posterior_mean_at(
    prior: &GmmPrior,
    op: &LinearOperator,
    y: &Vector,
    sigma_y: f64,
    alpha_bar: f64,
    x_t: &Vector,
) -> Result<DenoiserOutput> {
    check_alpha_bar(alpha_bar)?;
    if op.cols() != prior.dim() {
        return Err(param(format!("operator acts on dimension {}, prior has {}", op.cols(), prior.dim())));
    }
    if y.len() != op.rows() {
        return Err(param(format!("measurement has {} entries, operator has {} rows", y.len(), op.rows())));
    }
    if !(sigma_y >= 0.0 && sigma_y.is_finite()) {
        return Err(param(format!("sigma_y must be finite and >= 0, got {sigma_y}")));
    }
    linalg::ensure_finite(y, "measurement")?;
    linalg::ensure_finite(x_t, "x_t")?;
    if op.rank() == 0 {
        return posterior_mean_at(prior, alpha_bar, x_t);
    }

    let svd = op.svd();
    let basis = &svd.basis;
    let dim = prior.dim();
    let rotated_xt = basis.transpose() * x_t;
    let projected_y = svd.u.transpose() * y;

    let obs: Vec<CoordObs> = (0..dim)
        .map(|i| {
            let meas = (i < svd.rank()).then(|| {
                let s = svd.singular_values[i];
                (projected_y[i] / s, (sigma_y / s).powi(2))
            });
            match meas {
                Some((v, 0.0)) => CoordObs::Exact(v),
                _ if alpha_bar >= 1.0 => CoordObs::Exact(rotated_xt[i]),
                m => {
                    let mut prec = 0.0;
                    let mut weighted = 0.0;
                    if alpha_bar > 0.0 {
                        let p = alpha_bar / (1.0 - alpha_bar);
                        prec += p;
                        weighted += p * rotated_xt[i] / alpha_bar.sqrt();
                    }
                    if let Some((v, var)) = m {
                        prec += 1.0 / var;
                        weighted += v / var;
                    }
                    if prec > 0.0 {
                        CoordObs::Noisy { value: weighted / prec, var: 1.0 / prec }
                    } else {
                        CoordObs::Missing
                    }
                }
            }
        })
        .collect();

    let exact: Vec<(usize, f64)> = obs
        .iter()
        .enumerate()
        .filter_map(|(i, o)| match *o {
            CoordObs::Exact(v) => Some((i, v)),
            _ => None,
        })
        .collect();
    let noisy: Vec<(usize, f64, f64)> = obs
        .iter()
        .enumerate()
        .filter_map(|(i, o)| match *o {
            CoordObs::Noisy { value, var } => Some((i, value, var)),
            _ => None,
        })
        .collect();

    let mut log_w = Vec::with_capacity(prior.components().len());
    let mut parts = Vec::with_capacity(prior.components().len());
    for c in prior.components() {
        let mut mean = basis.transpose() * &c.mean;
        let mut cov = linalg::symmetrize(&(basis.transpose() * &c.cov * basis));
        let mut log_lik = 0.0;
        if !exact.is_empty() {
            let idx: Vec<usize> = exact.iter().map(|e| e.0).collect();
            let vals = Vector::from_iterator(idx.len(), exact.iter().map(|e| e.1));
            log_lik += condition_on(&mut mean, &mut cov, &idx, &vals, None)?;
            for (i, v) in &exact {
                mean[*i] = *v;
            }
        }
        if !noisy.is_empty() {
            let idx: Vec<usize> = noisy.iter().map(|e| e.0).collect();
            let vals = Vector::from_iterator(idx.len(), noisy.iter().map(|e| e.1));
            let vars = Vector::from_iterator(idx.len(), noisy.iter().map(|e| e.2));
            log_lik += condition_on(&mut mean, &mut cov, &idx, &vals, Some(&vars))?;
        }
        log_w.push(c.weight.ln() + log_lik);
        let back_mean = basis * &mean;
        let back_cov = linalg::symmetrize(&(basis * &cov * basis.transpose()));
        parts.push((back_mean, back_cov));
    }
    let posterior = normalize(log_w, parts);
    let mut x0_hat = mixture_mean(&posterior);
    // Pin exactly observed directions so measurement consistency is not left to roundoff.
    if sigma_y == 0.0 && op.is_coordinate_selection() {
        for (row, &col) in op.selected_coordinates().iter().enumerate() {
            x0_hat[col] = y[row];
        }
    }
    linalg::ensure_finite(&x0_hat, "measurement posterior mean")?;
    Ok(DenoiserOutput { x0_hat, posterior: Some(posterior) })
}

/// Gaussian conditioning of `N(mean, cov)` on `z[idx] + noise = vals`, in place.
/// Returns the log marginal likelihood of the observation.
fn condition_on(
    mean: &mut Vector,
    cov: &mut Matrix,
    idx: &[usize],
    vals: &Vector,
    noise: Option<&Vector>,
) -> Result<f64> {
    let n = idx.len();
    let mut s = Matrix::from_fn(n, n, |a, b| cov[(idx[a], idx[b])]);
    if let Some(v) = noise {
        for a in 0..n {
            s[(a, a)] += v[a];
        }
    }
    let chol = linalg::cholesky(&s).map_err(|_| Error::Numeric("singular observation covariance".into()))?;
    let resid = Vector::from_fn(n, |a, _| vals[a] - mean[idx[a]]);
    let log_lik = linalg::log_gauss(&resid, &chol);
    let cross = Matrix::from_fn(cov.nrows(), n, |i, b| cov[(i, idx[b])]);
    let gain = chol.solve(&cross.transpose()).transpose();
    *mean += &gain * resid;
    *cov = linalg::symmetrize(&(&*cov - &gain * cross.transpose()));
    Ok(log_lik)
}

pub fn measurement_posterior_mean(
    prior: &GmmPrior,
    op: &LinearOperator,
    y: &Vector,
    sigma_y: f64,
    schedule: &NoiseSchedule,
    t: usize,
    x_t: &Vector,
) -> Result<DenoiserOutput> {
    check_t(schedule, t)?;
    measurement_posterior_mean_at(prior, op, y, sigma_y, schedule.alpha_bar(t), x_t)
}

/// A clean-sample predictor `p(x0 | x_t)` as seen by the samplers.
pub trait Denoiser: Send + Sync {
    fn dim(&self) -> usize;

    /// Rejects conditions this denoiser cannot honour.
    fn check_condition(&self, cond: &Condition) -> Result<()>;

    fn predict(&self, cond: &Condition, alpha_bar: f64, x_t: &Vector, rng: &mut dyn RngCore) -> Result<Vector>;
}

/// Analytic mixture denoiser. Deterministic posterior mean by default.
#[derive(Debug, Clone)]
pub struct GmmDenoiser {
    prior: GmmPrior,
    stochastic: bool,
}

impl GmmDenoiser {
    pub fn new(prior: GmmPrior) -> Self {
        Self { prior, stochastic: false }
    }

    /// Draw `x0` from the exact posterior instead of returning its mean.
    pub fn stochastic(prior: GmmPrior) -> Self {
        Self { prior, stochastic: true }
    }

    pub fn prior(&self) -> &GmmPrior {
        &self.prior
    }
}

impl Denoiser for GmmDenoiser {
    fn dim(&self) -> usize {
        self.prior.dim()
    }

    fn check_condition(&self, cond: &Condition) -> Result<()> {
        cond.validate(&self.prior)
    }

    fn predict(&self, cond: &Condition, alpha_bar: f64, x_t: &Vector, rng: &mut dyn RngCore) -> Result<Vector> {
        if !self.stochastic {
            return conditional_posterior_mean_at(&self.prior, cond, alpha_bar, x_t).map(|o| o.x0_hat);
        }
        match *cond {
            Condition::Guided { .. } => Err(param("guidance is only defined for the posterior-mean denoiser")),
            Condition::Unconditional => posterior_sample_at(&self.prior, alpha_bar, x_t, rng).map(|o| o.x0_hat),
            Condition::Class { label } => {
                posterior_sample_at(&self.prior.restrict(label)?, alpha_bar, x_t, rng).map(|o| o.x0_hat)
            }
        }
    }
}

/// Posterior-mean denoiser that also conditions on a linear measurement.
#[derive(Debug, Clone)]
pub struct MeasurementDenoiser {
    prior: GmmPrior,
    problem: InverseProblem,
}

impl MeasurementDenoiser {
    pub fn new(prior: GmmPrior, problem: InverseProblem) -> Result<Self> {
        problem.check_dim(prior.dim())?;
        Ok(Self { prior, problem })
    }

    pub fn problem(&self) -> &InverseProblem {
        &self.problem
    }
}

impl Denoiser for MeasurementDenoiser {
    fn dim(&self) -> usize {
        self.prior.dim()
    }

    fn check_condition(&self, cond: &Condition) -> Result<()> {
        cond.validate(&self.prior)
    }

    fn predict(&self, cond: &Condition, alpha_bar: f64, x_t: &Vector, _rng: &mut dyn RngCore) -> Result<Vector> {
        let p = &self.problem;
        conditional_with(&self.prior, cond, alpha_bar, x_t, |prior| {
            measurement_posterior_mean_at(prior, &p.operator, &p.y, p.sigma_y, alpha_bar, x_t)
        })
        .map(|o| o.x0_hat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::{quadrature_mean_1d, quadrature_mean_2d};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: f64) -> Vector {
        Vector::from_element(1, v)
    }

    fn gauss1(weight: f64, mean: f64, var: f64, label: Option<u32>) -> GmmComponent {
        GmmComponent { weight, mean: scalar(mean), cov: Matrix::from_element(1, 1, var), label }
    }

    fn two_class_1d() -> GmmPrior {
        GmmPrior::new(vec![gauss1(0.5, -2.0, 0.1, Some(0)), gauss1(0.5, 2.0, 0.1, Some(1))]).unwrap()
    }

    #[test]
    fn conjugate_identity() {
        let prior = GmmPrior::standard_normal(1);
        let out = posterior_mean_at(&prior, 0.25, &scalar(1.0)).unwrap();
        assert!((out.x0_hat[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn noiseless_limit_returns_input() {
        let prior = two_class_1d();
        let out = posterior_mean_at(&prior, 1.0, &scalar(0.37)).unwrap();
        assert!((out.x0_hat[0] - 0.37).abs() < 1e-12);
    }

    #[test]
    fn bimodal_matches_quadrature() {
        let prior = two_class_1d();
        let out = posterior_mean_at(&prior, 0.5, &scalar(0.3)).unwrap();
        let oracle = quadrature_mean_1d(&prior, 0.5, 0.3, -10.0, 10.0, 1e-3);
        assert!((out.x0_hat[0] - oracle).abs() < 1e-6, "{} vs {oracle}", out.x0_hat[0]);
    }

    #[test]
    fn responsibilities_normalized_even_when_far_out() {
        let prior = two_class_1d();
        for x in [-1e3, -5.0, 0.0, 3.0, 1e3] {
            let out = posterior_mean_at(&prior, 0.3, &scalar(x)).unwrap();
            let total: f64 = out.responsibilities().unwrap().iter().sum();
            assert!((total - 1.0).abs() < 1e-10);
            assert!(out.x0_hat[0].is_finite());
        }
    }

    #[test]
    fn rejects_non_finite_input() {
        let prior = two_class_1d();
        assert!(matches!(posterior_mean_at(&prior, 0.3, &scalar(f64::NAN)), Err(Error::Numeric(_))));
    }

    #[test]
    fn timestep_zero_rejected() {
        let s = NoiseSchedule::linear(10, 0.01, 0.2).unwrap();
        assert!(posterior_mean(&two_class_1d(), &s, 0, &scalar(0.0)).is_err());
        assert!(posterior_mean(&two_class_1d(), &s, 11, &scalar(0.0)).is_err());
    }

    #[test]
    fn single_component_jacobian_matches_finite_difference() {
        let prior = GmmPrior::new(vec![GmmComponent {
            weight: 1.0,
            mean: Vector::from_vec(vec![0.3, -0.2]),
            cov: Matrix::from_row_slice(2, 2, &[0.8, 0.2, 0.2, 0.5]),
            label: None,
        }])
        .unwrap();
        let ab: f64 = 0.4;
        let x = Vector::from_vec(vec![0.5, 1.2]);
        let c = &prior.components()[0].cov;
        let s = c * ab + Matrix::identity(2, 2) * (1.0 - ab);
        let analytic = c * s.try_inverse().unwrap() * ab.sqrt();
        let h = 1e-6;
        for j in 0..2 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let d = (posterior_mean_at(&prior, ab, &xp).unwrap().x0_hat
                - posterior_mean_at(&prior, ab, &xm).unwrap().x0_hat)
                / (2.0 * h);
            for i in 0..2 {
                assert!((d[i] - analytic[(i, j)]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn posterior_sample_is_deterministic_per_seed() {
        let prior = two_class_1d();
        let a = posterior_sample_at(&prior, 0.5, &scalar(0.3), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = posterior_sample_at(&prior, 0.5, &scalar(0.3), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.x0_hat, b.x0_hat);
    }

    #[test]
    fn posterior_sample_monte_carlo_mean() {
        let prior = GmmPrior::new(vec![GmmComponent {
            weight: 1.0,
            mean: Vector::from_vec(vec![1.0, -1.0]),
            cov: Matrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.6]),
            label: None,
        }])
        .unwrap();
        let x = Vector::from_vec(vec![0.2, 0.4]);
        let ab = 0.6;
        let exact = posterior_mean_at(&prior, ab, &x).unwrap();
        let post_cov = &exact.posterior.as_ref().unwrap()[0].cov;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let mut sum = Vector::zeros(2);
        for _ in 0..n {
            sum += posterior_sample_at(&prior, ab, &x, &mut rng).unwrap().x0_hat;
        }
        let mc = sum / n as f64;
        for i in 0..2 {
            let se = (post_cov[(i, i)] / n as f64).sqrt();
            assert!((mc[i] - exact.x0_hat[i]).abs() < 3.0 * se, "coord {i}");
        }
    }

    #[test]
    fn degenerate_component_collapses_draws() {
        let prior = GmmPrior::new(vec![GmmComponent {
            weight: 1.0,
            mean: Vector::from_vec(vec![0.5, 0.5]),
            cov: Matrix::identity(2, 2) * 1e-12,
            label: None,
        }])
        .unwrap();
        let x = Vector::from_vec(vec![3.0, -1.0]);
        let mean = posterior_mean_at(&prior, 0.5, &x).unwrap().x0_hat;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let d = posterior_sample_at(&prior, 0.5, &x, &mut rng).unwrap().x0_hat;
            assert!((d - &mean).amax() < 1e-5);
        }
    }

    #[test]
    fn guidance_fixed_points() {
        let prior = two_class_1d();
        let x = scalar(0.4);
        for ab in [0.0, 0.1, 0.5, 0.9, 1.0] {
            let class = conditional_posterior_mean_at(&prior, &Condition::Class { label: 1 }, ab, &x).unwrap();
            let g1 =
                conditional_posterior_mean_at(&prior, &Condition::Guided { label: 1, scale: 1.0 }, ab, &x).unwrap();
            assert!((class.x0_hat[0] - g1.x0_hat[0]).abs() < 1e-12, "w=1 at abar={ab}");
            let uncond = posterior_mean_at(&prior, ab, &x).unwrap();
            let g0 =
                conditional_posterior_mean_at(&prior, &Condition::Guided { label: 1, scale: 0.0 }, ab, &x).unwrap();
            assert!((uncond.x0_hat[0] - g0.x0_hat[0]).abs() < 1e-12, "w=0 at abar={ab}");
        }
    }

    #[test]
    fn guidance_extrapolates_past_class() {
        let prior = two_class_1d();
        let x = scalar(0.1);
        let class = conditional_posterior_mean_at(&prior, &Condition::Class { label: 1 }, 0.3, &x).unwrap();
        let g = conditional_posterior_mean_at(&prior, &Condition::Guided { label: 1, scale: 3.0 }, 0.3, &x).unwrap();
        assert!(g.x0_hat[0] > class.x0_hat[0]);
    }

    #[test]
    fn class_restriction_identity_on_single_label() {
        let prior = GmmPrior::new(vec![gauss1(0.3, -1.0, 0.5, Some(7)), gauss1(0.7, 1.0, 0.2, Some(7))]).unwrap();
        let x = scalar(0.25);
        let a = posterior_mean_at(&prior, 0.4, &x).unwrap();
        let b = conditional_posterior_mean_at(&prior, &Condition::Class { label: 7 }, 0.4, &x).unwrap();
        assert_eq!(a.x0_hat, b.x0_hat);
    }

    #[test]
    fn unknown_label_is_a_parameter_error() {
        let prior = two_class_1d();
        let err = conditional_posterior_mean_at(&prior, &Condition::Class { label: 9 }, 0.4, &scalar(0.0));
        assert!(matches!(err, Err(Error::Param(_))));
        let bad_scale = Condition::Guided { label: 0, scale: -1.0 };
        assert!(bad_scale.validate(&prior).is_err());
    }

    #[test]
    fn prior_validation() {
        assert!(GmmPrior::new(vec![]).is_err());
        assert!(GmmPrior::new(vec![gauss1(0.5, 0.0, 1.0, None)]).is_err());
        assert!(GmmPrior::new(vec![gauss1(1.0, 0.0, -1.0, None)]).is_err());
    }

    #[test]
    fn prior_text_round_trip() {
        let prior = two_class_1d();
        let text = PriorSpec::from_prior(&prior).to_text();
        let back = PriorSpec::from_text(&text).unwrap().build().unwrap();
        assert_eq!(back, prior);
    }

    #[test]
    fn mixture_moments() {
        let (m, c) = two_class_1d().moments();
        assert!(m[0].abs() < 1e-15);
        assert!((c[(0, 0)] - 4.1).abs() < 1e-12);
    }

    #[test]
    fn identity_exact_measurement_returns_y() {
        let prior = two_class_1d();
        let op = LinearOperator::identity(1);
        let y = scalar(1.7);
        for ab in [0.01, 0.5, 0.99] {
            let out = measurement_posterior_mean_at(&prior, &op, &y, 0.0, ab, &scalar(-3.0)).unwrap();
            assert!((out.x0_hat[0] - 1.7).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_operator_reduces_to_posterior_mean() {
        let prior = two_class_1d();
        let op = LinearOperator::custom(Matrix::zeros(0, 1)).unwrap();
        let a = measurement_posterior_mean_at(&prior, &op, &Vector::zeros(0), 0.0, 0.4, &scalar(0.2)).unwrap();
        let b = posterior_mean_at(&prior, 0.4, &scalar(0.2)).unwrap();
        assert_eq!(a.x0_hat, b.x0_hat);
    }

    #[test]
    fn masked_measurement_matches_2d_quadrature() {
        let prior = GmmPrior::new(vec![GmmComponent {
            weight: 1.0,
            mean: Vector::from_vec(vec![0.5, -0.5]),
            cov: Matrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 1.2]),
            label: None,
        }])
        .unwrap();
        let op = LinearOperator::mask(2, &[1]).unwrap();
        let y = Vector::from_vec(vec![0.8]);
        let x = Vector::from_vec(vec![0.1, 0.3]);
        let ab = 0.35;
        let out = measurement_posterior_mean_at(&prior, &op, &y, 0.1, ab, &x).unwrap();
        let oracle = quadrature_mean_2d(&prior, ab, &x, Some((&op.matrix().clone(), &y, 0.1)));
        assert!((&out.x0_hat - &oracle).amax() < 1e-5, "{} vs {}", out.x0_hat, oracle);
    }
}
