//! Fréchet distance between Gaussian fits, anytime curves and their AUC.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::GmmPrior;
use crate::error::{param, Error, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::sampler::{intermediate_prediction, Trace};

/// Eigenvalues of products of covariances may dip below zero by round-off.
pub const SQRT_CLAMP_TOL: f64 = 1e-10;

/// First two moments of a population. `n` is `None` for analytic moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub mean: Vector,
    pub cov: Matrix,
    pub n: Option<usize>,
}

impl GaussianFit {
    pub fn from_moments(mean: Vector, cov: Matrix) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(param("covariance shape does not match the mean"));
        }
        if (&cov - cov.transpose()).amax() > 1e-10 * cov.amax().max(1.0) {
            return Err(param("covariance is not symmetric"));
        }
        Ok(Self { mean, cov, n: None })
    }

    /// Exact moments of a mixture prior.
    pub fn from_prior(prior: &GmmPrior) -> Self {
        let (mean, cov) = prior.moments();
        Self { mean, cov: linalg::symmetrize(&cov), n: None }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased, symmetrized covariance.
pub fn fit_gaussian(samples: &[Vector]) -> Result<GaussianFit> {
    let dim = samples.first().map(|s| s.len()).ok_or_else(|| param("no samples to fit"))?;
    if samples.len() < dim + 1 {
        return Err(param(format!("need at least {} samples in dimension {dim}, got {}", dim + 1, samples.len())));
    }
    if samples.iter().any(|s| s.len() != dim) {
        return Err(param("samples have mixed dimensions"));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().fold(Vector::zeros(dim), |acc, s| acc + s) / n;
    let mut cov = Matrix::zeros(dim, dim);
    for s in samples {
        let d = s - &mean;
        cov.ger(1.0, &d, &d, 1.0);
    }
    cov /= n - 1.0;
    Ok(GaussianFit { mean, cov: linalg::symmetrize(&cov), n: Some(samples.len()) })
}

/// Squared 2-Wasserstein distance between the two Gaussians.
pub fn frechet_distance(a: &GaussianFit, b: &GaussianFit) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(param(format!("dimension mismatch: {} vs {}", a.dim(), b.dim())));
    }
    let root_a = linalg::sqrt_psd(&a.cov, SQRT_CLAMP_TOL)?;
    linalg::sqrt_psd(&b.cov, SQRT_CLAMP_TOL)?;
    let cross = linalg::sqrt_psd(&(&root_a * &b.cov * &root_a), SQRT_CLAMP_TOL)?;
    let d = (&a.mean - &b.mean).norm_squared() + a.cov.trace() + b.cov.trace() - 2.0 * cross.trace();
    Ok(d.max(0.0))
}

/// Step function over NFE: each value holds until the next point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnytimeCurve {
    pub points: Vec<(usize, f64)>,
    pub domain_end: usize,
}

impl AnytimeCurve {
    pub fn new(points: Vec<(usize, f64)>, domain_end: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(param("curve needs at least one point"));
        }
        if points[0].0 == 0 {
            return Err(param("curve points start at nfe 1"));
        }
        if points.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(param("curve nfe values must be strictly increasing"));
        }
        if points.last().map(|p| p.0) > Some(domain_end) {
            return Err(param("curve extends past its domain"));
        }
        Ok(Self { points, domain_end })
    }

    /// Value the step function takes at `nfe`, if any point precedes it.
    pub fn value_at(&self, nfe: usize) -> Option<f64> {
        let idx = self.points.partition_point(|p| p.0 <= nfe);
        (idx > 0).then(|| self.points[idx - 1].1)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["nfe", "value"])?;
        for (nfe, v) in &self.points {
            w.write_record([nfe.to_string(), format!("{v:e}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Integral of the step function over NFE `1..=domain_end`, using the first
/// value for the stretch before the first point.
pub fn auc(curve: &AnytimeCurve) -> f64 {
    let pts = &curve.points;
    let mut total = 0.0;
    for (i, &(_, v)) in pts.iter().enumerate() {
        let start = if i == 0 { 1 } else { pts[i].0 };
        let end = pts.get(i + 1).map_or(curve.domain_end + 1, |p| p.0);
        total += v * (end - start) as f64;
    }
    total
}

/// Evaluation budgets `eval_every, 2 eval_every, ...` plus the full budget.
pub fn eval_budgets(total_nfe: usize, eval_every: usize) -> Result<Vec<usize>> {
    if eval_every == 0 {
        return Err(param("eval_every must be positive"));
    }
    let mut out: Vec<usize> = (1..=total_nfe / eval_every).map(|k| k * eval_every).collect();
    if out.last() != Some(&total_nfe) {
        out.push(total_nfe);
    }
    Ok(out)
}

/// Builds a curve by evaluating `value(n)` at every budget; budgets where
/// `value` reports no prediction are skipped.
pub fn curve_from<F>(budgets: &[usize], domain_end: usize, value: F) -> Result<AnytimeCurve>
where
    F: Fn(usize) -> Result<f64> + Sync,
{
    let values: Vec<Result<Option<(usize, f64)>>> = budgets
        .par_iter()
        .map(|&n| match value(n) {
            Ok(v) => Ok(Some((n, v))),
            Err(Error::NoPrediction) => Ok(None),
            Err(e) => Err(e),
        })
        .collect();
    let mut points = Vec::with_capacity(budgets.len());
    for v in values {
        points.extend(v?);
    }
    AnytimeCurve::new(points, domain_end)
}

/// Population of anytime results after `nfe` calls per run.
pub fn predictions_at(traces: &[Trace], nfe: usize) -> Result<Vec<Vector>> {
    traces.iter().map(|t| intermediate_prediction(t, nfe)).collect()
}

/// Log Fréchet distance to `data_fit` of the population's anytime results,
/// evaluated every `eval_every` NFEs.
pub fn anytime_curve(traces: &[Trace], data_fit: &GaussianFit, eval_every: usize) -> Result<AnytimeCurve> {
    let total = traces.first().map(|t| t.total_nfe).ok_or_else(|| param("no traces"))?;
    if traces.iter().any(|t| t.total_nfe != total) {
        return Err(param("traces do not share an NFE budget"));
    }
    let budgets = eval_budgets(total, eval_every)?;
    curve_from(&budgets, total, |n| {
        let fit = fit_gaussian(&predictions_at(traces, n)?)?;
        Ok(frechet_distance(&fit, data_fit)?.ln())
    })
}

/// Mean squared distance of each recorded prediction to the final sample.
pub fn consistency_curve(trace: &Trace) -> Result<AnytimeCurve> {
    if trace.entries.len() < 2 {
        return Err(param("consistency needs at least two recorded predictions"));
    }
    let dim = trace.final_sample.len() as f64;
    let points =
        trace.entries.iter().map(|e| (e.nfe, (&e.x0_hat - &trace.final_sample).norm_squared() / dim)).collect();
    AnytimeCurve::new(points, trace.total_nfe)
}

/// One row of a ratio sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucRecord {
    pub outer: usize,
    pub inner: usize,
    pub r_nd: f64,
    pub total_nfe: usize,
    pub auc: f64,
    pub final_fd: f64,
}
