//! Population runs shared by the command-line tool and the statistical tests.
//!
//! Run `i` of an experiment seeded with `seed` always draws from
//! `run_rng(seed, i)`, so results do not depend on thread scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, GmmPrior, MeasurementDenoiser};
use crate::error::{param, Result};
use crate::inverse::{degrade, InverseProblem, LinearOperator};
use crate::linalg::Vector;
use crate::metrics::{self, auc, fit_gaussian, frechet_distance, AucRecord, GaussianFit};
use crate::nested::{self, nested_sample, NestedPlan};
use crate::sampler::{sample, SamplerConfig, Trace};
use crate::schedule::NoiseSchedule;

pub fn run_rng(seed: u64, run: usize) -> ChaCha8Rng {
    nested::branch_rng(seed, run)
}

pub fn vanilla_traces(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    runs: usize,
    seed: u64,
) -> Result<Vec<Trace>> {
    (0..runs).into_par_iter().map(|i| sample(denoiser, schedule, config, None, &mut run_rng(seed, i))).collect()
}

pub fn nested_traces(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    plan: &NestedPlan,
    runs: usize,
    seed: u64,
) -> Result<Vec<Trace>> {
    (0..runs).into_par_iter().map(|i| nested_sample(denoiser, schedule, plan, &mut run_rng(seed, i))).collect()
}

/// One solved inverse problem together with the signal that produced it.
#[derive(Debug, Clone)]
pub struct InverseRun {
    pub x0: Vector,
    pub y: Vector,
    pub trace: Trace,
}

/// Per run: draw `x0` from the prior, degrade it, then solve with nested
/// sampling, all from the run's own stream.
pub fn inverse_runs(
    prior: &GmmPrior,
    schedule: &NoiseSchedule,
    plan: &NestedPlan,
    operator: &LinearOperator,
    sigma_y: f64,
    runs: usize,
    seed: u64,
) -> Result<Vec<InverseRun>> {
    (0..runs)
        .into_par_iter()
        .map(|i| {
            let mut rng = run_rng(seed, i);
            let x0 = prior.sample(&mut rng);
            let y = degrade(operator, sigma_y, &x0, &mut rng)?;
            let problem = InverseProblem::new(operator.clone(), y.clone(), sigma_y)?;
            let denoiser = MeasurementDenoiser::new(prior.clone(), problem)?;
            let trace = nested_sample(&denoiser, schedule, plan, &mut rng)?;
            Ok(InverseRun { x0, y, trace })
        })
        .collect()
}

/// Bootstrap standard error of `stat` over resampled run indices.
pub fn bootstrap_se<F>(runs: usize, reps: usize, seed: u64, stat: F) -> Result<f64>
where
    F: Fn(&[usize]) -> Result<f64> + Sync,
{
    if runs == 0 || reps < 2 {
        return Err(param("bootstrap needs runs and at least two replicates"));
    }
    let values: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let idx: Vec<usize> = (0..runs).map(|_| rng.random_range(0..runs)).collect();
            stat(&idx)
        })
        .collect::<Result<_>>()?;
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    Ok((values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

/// Fréchet distance of a population to the data.
pub fn population_fd(samples: &[Vector], data: &GaussianFit) -> Result<f64> {
    frechet_distance(&fit_gaussian(samples)?, data)
}

/// Mean over runs of the squared distance (per coordinate) between each
/// outer-boundary prediction and the final sample.
pub fn boundary_consistency(traces: &[Trace]) -> Result<Vec<f64>> {
    let first = traces.first().ok_or_else(|| param("no traces"))?;
    let k = first.boundaries().count();
    let mut sums = vec![0.0; k];
    for trace in traces {
        let curve = metrics::consistency_curve(trace)?;
        let boundary_nfe: Vec<usize> = trace.boundaries().map(|e| e.nfe).collect();
        if boundary_nfe.len() != k {
            return Err(param("traces disagree on the number of outer steps"));
        }
        for (s, nfe) in sums.iter_mut().zip(boundary_nfe) {
            *s += curve.value_at(nfe).expect("boundary entries are curve points");
        }
    }
    Ok(sums.into_iter().map(|s| s / traces.len() as f64).collect())
}

/// Result of one sweep configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub record: AucRecord,
    pub curve: metrics::AnytimeCurve,
}

/// Runs every `(outer, inner)` pair with the kinds and condition of
/// `template`, sorted by outer step count. All pairs must share one budget.
#[allow(clippy::too_many_arguments)]
pub fn ratio_sweep(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    template: &NestedPlan,
    pairs: &[(usize, usize)],
    runs: usize,
    seed: u64,
    data: &GaussianFit,
    eval_every: usize,
) -> Result<Vec<SweepRow>> {
    let budget = pairs.first().map(|(o, i)| o * i).ok_or_else(|| param("empty ratio list"))?;
    if let Some((o, i)) = pairs.iter().find(|(o, i)| o * i != budget) {
        return Err(param(format!("pair {o}x{i} does not match the budget {budget}")));
    }
    let mut pairs = pairs.to_vec();
    pairs.sort_unstable();
    let condition = template.condition_schedule.first().cloned().unwrap_or_default();
    pairs
        .iter()
        .map(|&(outer, inner)| {
            let plan = NestedPlan {
                zero_terminal: template.zero_terminal,
                ..NestedPlan::uniform(template.outer_grid.start(), outer, inner)?
                    .with_kinds(template.outer_kind, template.inner_kind)
                    .with_condition(condition.clone())
            };
            let traces = nested_traces(denoiser, schedule, &plan, runs, seed)?;
            let curve = metrics::anytime_curve(&traces, data, eval_every)?;
            let finals: Vec<Vector> = traces.iter().map(|t| t.final_sample.clone()).collect();
            let record = AucRecord {
                outer,
                inner,
                r_nd: plan.r_nd(),
                total_nfe: traces[0].total_nfe,
                auc: auc(&curve),
                final_fd: population_fd(&finals, data)?,
            };
            Ok(SweepRow { record, curve })
        })
        .collect()
}
