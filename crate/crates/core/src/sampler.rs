//! The generic reverse-diffusion loop and its prediction trace.

use std::io::{Read, Write};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Condition, Denoiser};
use crate::error::{param, Error, Result};
use crate::linalg::{self, Vector};
use crate::schedule::{NoiseSchedule, TimestepGrid};
use crate::transition::{self, TransitionKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub grid: TimestepGrid,
    pub kind: TransitionKind,
    #[serde(default)]
    pub condition: Condition,
    #[serde(default = "default_true")]
    pub record_intermediates: bool,
    /// Treat `alpha_bar[T]` as exactly zero (zero terminal SNR).
    #[serde(default)]
    pub zero_terminal: bool,
}

fn default_true() -> bool {
    true
}

impl SamplerConfig {
    pub fn new(grid: TimestepGrid, kind: TransitionKind) -> Self {
        Self { grid, kind, condition: Condition::Unconditional, record_intermediates: true, zero_terminal: false }
    }

    pub fn with_condition(mut self, condition: Condition) -> Self {
        self.condition = condition;
        self
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        self.grid.validate_for(schedule)?;
        self.kind.validate()
    }
}

/// `alpha_bar` lookup with the optional zero-terminal override applied.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Ladder<'a> {
    pub schedule: &'a NoiseSchedule,
    pub zero_terminal: bool,
}

impl Ladder<'_> {
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if self.zero_terminal && t == self.schedule.len() {
            0.0
        } else {
            self.schedule.alpha_bar(t)
        }
    }
}

/// Applies a one-call transition given an existing prediction.
pub(crate) fn first_order_update<R: RngCore + ?Sized>(
    kind: &TransitionKind,
    alpha_bar: f64,
    alpha_bar_next: f64,
    x_t: &Vector,
    x0_hat: &Vector,
    rng: &mut R,
) -> Result<Vector> {
    match kind {
        TransitionKind::Ddim { eta } => {
            transition::ddim_update(alpha_bar, alpha_bar_next, x_t, x0_hat, eta.value(alpha_bar_next), rng)
        }
        TransitionKind::Ddpm => transition::ddpm_update(alpha_bar, alpha_bar_next, x_t, x0_hat, rng),
        TransitionKind::DpmSolverPp2s => Err(param("the 2S solver needs a denoiser callback")),
    }
}

/// One grid transition `t -> t_next` including its denoiser calls.
/// `on_predict(t, x0_hat)` sees every call in order.
#[allow(clippy::too_many_arguments)]
pub(crate) fn transition_step<R: RngCore>(
    denoiser: &dyn Denoiser,
    ladder: Ladder<'_>,
    kind: &TransitionKind,
    condition: &Condition,
    t: usize,
    t_next: usize,
    x_t: &Vector,
    rng: &mut R,
    on_predict: &mut dyn FnMut(usize, &Vector),
) -> Result<Vector> {
    let (ab, ab_next) = (ladder.alpha_bar(t), ladder.alpha_bar(t_next));
    match kind {
        TransitionKind::DpmSolverPp2s => {
            let mut denoise = |s: usize, x: &Vector| -> Result<Vector> {
                let pred = denoiser.predict(condition, ladder.alpha_bar(s), x, &mut *rng)?;
                linalg::ensure_finite(&pred, "prediction")?;
                on_predict(s, &pred);
                Ok(pred)
            };
            let (next, _) = transition::dpm_pp_2s_update(&|s| ladder.alpha_bar(s), t, t_next, x_t, &mut denoise)?;
            Ok(next)
        }
        _ => {
            let pred = denoiser.predict(condition, ab, x_t, &mut *rng)?;
            linalg::ensure_finite(&pred, "prediction")?;
            on_predict(t, &pred);
            first_order_update(kind, ab, ab_next, x_t, &pred, rng)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    /// A denoiser call of a plain reverse process.
    Step,
    /// A denoiser call inside the first inner process of a nested run.
    Inner,
    /// The result of a completed inner process.
    Boundary,
}

impl EntryKind {
    fn as_str(&self) -> &'static str {
        match self {
            EntryKind::Step => "step",
            EntryKind::Inner => "inner",
            EntryKind::Boundary => "boundary",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub nfe: usize,
    pub t: usize,
    pub kind: EntryKind,
    pub x0_hat: Vector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub entries: Vec<TraceEntry>,
    pub final_sample: Vector,
    pub total_nfe: usize,
}

impl Trace {
    pub fn boundaries(&self) -> impl Iterator<Item = &TraceEntry> {
        self.entries.iter().filter(|e| e.kind == EntryKind::Boundary)
    }

    /// Writes `run,kind,nfe,t,x0,...` rows followed by a `final` row, with run 0.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_traces_csv(std::slice::from_ref(self), out)
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut traces = read_traces_csv(input)?;
        if traces.len() != 1 {
            return Err(Error::Io(format!("expected one trace, found {}", traces.len())));
        }
        Ok(traces.remove(0))
    }
}

/// Writes several traces into one table; each trace's rows carry its index
/// in the `run` column and end with its `final` row.
pub fn write_traces_csv<W: Write>(traces: &[Trace], out: W) -> Result<()> {
    let dim = traces.first().map_or(0, |t| t.final_sample.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["run".to_string(), "kind".into(), "nfe".into(), "t".into()];
    header.extend((0..dim).map(|i| format!("x{i}")));
    w.write_record(&header)?;
    for (run, trace) in traces.iter().enumerate() {
        if trace.final_sample.len() != dim {
            return Err(param("traces disagree on dimension"));
        }
        let row = |kind: &str, nfe: usize, t: usize, x: &Vector| {
            let mut r = vec![run.to_string(), kind.to_string(), nfe.to_string(), t.to_string()];
            r.extend(x.iter().map(|v| format!("{v:e}")));
            r
        };
        for e in &trace.entries {
            w.write_record(row(e.kind.as_str(), e.nfe, e.t, &e.x0_hat))?;
        }
        w.write_record(row("final", trace.total_nfe, 0, &trace.final_sample))?;
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`write_traces_csv`]. Runs must appear in order `0, 1, ...`.
pub fn read_traces_csv<R: Read>(input: R) -> Result<Vec<Trace>> {
    let mut rd = csv::Reader::from_reader(input);
    let mut traces = Vec::new();
    let mut entries = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).ok_or_else(|| Error::Io(format!("trace row is missing column {i}")));
        let num = |i: usize| -> Result<usize> {
            field(i)?.parse().map_err(|_| Error::Io(format!("bad integer in trace column {i}")))
        };
        if num(0)? != traces.len() {
            return Err(Error::Io(format!("trace rows out of order at run {}", num(0)?)));
        }
        let x = (4..rec.len())
            .map(|i| rec[i].parse::<f64>().map_err(|_| Error::Io(format!("bad number in trace column {i}"))))
            .collect::<Result<Vec<f64>>>()?;
        let x = Vector::from_vec(x);
        let kind = match field(1)? {
            "step" => EntryKind::Step,
            "inner" => EntryKind::Inner,
            "boundary" => EntryKind::Boundary,
            "final" => {
                traces.push(Trace { entries: std::mem::take(&mut entries), final_sample: x, total_nfe: num(2)? });
                continue;
            }
            other => return Err(Error::Io(format!("unknown trace row kind {other:?}"))),
        };
        entries.push(TraceEntry { nfe: num(2)?, t: num(3)?, kind, x0_hat: x });
    }
    if !entries.is_empty() {
        return Err(Error::Io("last trace has no final row".into()));
    }
    Ok(traces)
}

/// Runs the reverse process over `config.grid`. Noise order: initial state
/// (when `x_init` is absent), then whatever each transition draws.
pub fn sample<R: RngCore>(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    x_init: Option<Vector>,
    rng: &mut R,
) -> Result<Trace> {
    config.validate(schedule)?;
    denoiser.check_condition(&config.condition)?;
    let mut x = match x_init {
        Some(x) => {
            if x.len() != denoiser.dim() {
                return Err(param(format!("x_init has dimension {}, expected {}", x.len(), denoiser.dim())));
            }
            linalg::ensure_finite(&x, "x_init")?;
            x
        }
        None => linalg::standard_normal(denoiser.dim(), rng),
    };
    let ladder = Ladder { schedule, zero_terminal: config.zero_terminal };
    let mut entries = Vec::new();
    let mut nfe = 0;
    let record = config.record_intermediates;
    for (t, t_next) in config.grid.pairs() {
        let mut on_predict = |s: usize, pred: &Vector| {
            nfe += 1;
            if record {
                entries.push(TraceEntry { nfe, t: s, kind: EntryKind::Step, x0_hat: pred.clone() });
            }
        };
        x = transition_step(denoiser, ladder, &config.kind, &config.condition, t, t_next, &x, rng, &mut on_predict)?;
    }
    Ok(Trace { entries, final_sample: x, total_nfe: nfe })
}

/// The prediction an interrupted run would return after `nfe_budget` calls.
pub fn intermediate_prediction(trace: &Trace, nfe_budget: usize) -> Result<Vector> {
    if nfe_budget >= trace.total_nfe {
        return Ok(trace.final_sample.clone());
    }
    let idx = trace.entries.partition_point(|e| e.nfe <= nfe_budget);
    if idx == 0 {
        return Err(Error::NoPrediction);
    }
    Ok(trace.entries[idx - 1].x0_hat.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{GmmComponent, GmmDenoiser, GmmPrior};
    use crate::linalg::Matrix;
    use crate::oracles::mean_var;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
    }

    fn config(steps: usize, kind: TransitionKind) -> SamplerConfig {
        SamplerConfig::new(TimestepGrid::uniform(1000, steps).unwrap(), kind)
    }

    #[test]
    fn one_step_returns_first_prediction() {
        let s = linear();
        let den = GmmDenoiser::new(GmmPrior::standard_normal(2));
        for kind in [TransitionKind::ddim(0.85), TransitionKind::Ddpm, TransitionKind::DpmSolverPp2s] {
            let trace = sample(&den, &s, &config(1, kind), None, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
            assert_eq!(trace.total_nfe, 1);
            assert_eq!(trace.final_sample, trace.entries[0].x0_hat);
        }
    }

    #[test]
    fn nfe_counts_match_grid_for_first_order_kinds() {
        let s = linear();
        let den = GmmDenoiser::new(GmmPrior::standard_normal(1));
        for n in [1usize, 7, 60] {
            let trace =
                sample(&den, &s, &config(n, TransitionKind::Ddpm), None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert_eq!(trace.total_nfe, n);
            assert_eq!(trace.entries.len(), n);
            assert!(trace.entries.windows(2).all(|w| w[0].nfe < w[1].nfe));
        }
        let trace =
            sample(&den, &s, &config(10, TransitionKind::DpmSolverPp2s), None, &mut ChaCha8Rng::seed_from_u64(0))
                .unwrap();
        assert_eq!(trace.total_nfe, 19);
        assert_eq!(trace.entries.len(), 19);
    }

    #[test]
    fn same_seed_same_trace() {
        let s = linear();
        let den = GmmDenoiser::new(GmmPrior::standard_normal(2));
        let cfg = config(20, TransitionKind::ddim(0.85));
        let a = sample(&den, &s, &cfg, None, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample(&den, &s, &cfg, None, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ddim_with_posterior_draws_keeps_standard_normal_marginal() {
        let s = linear();
        let den = GmmDenoiser::stochastic(GmmPrior::standard_normal(1));
        let cfg = config(10, TransitionKind::ddim(0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 10_000;
        let xs: Vec<f64> = (0..n).map(|_| sample(&den, &s, &cfg, None, &mut rng).unwrap().final_sample[0]).collect();
        let (m, v) = mean_var(&xs);
        assert!(m.abs() < 4.0 / (n as f64).sqrt());
        assert!((v - 1.0).abs() < 4.0 * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn ddim_with_posterior_mean_contracts_by_angle_gaps() {
        // With alpha_bar = cos^2(theta), each deterministic step on N(0, 1) data
        // multiplies the state by cos(theta - theta').
        let s = linear();
        let den = GmmDenoiser::new(GmmPrior::standard_normal(1));
        let grid = TimestepGrid::uniform(1000, 10).unwrap();
        let theta = |t: usize| s.alpha_bar(t).sqrt().acos();
        let factor: f64 = grid.pairs().map(|(a, b)| (theta(a) - theta(b)).cos()).product();
        let x = Vector::from_element(1, 1.7);
        let cfg = SamplerConfig::new(grid, TransitionKind::ddim(0.0));
        let out = sample(&den, &s, &cfg, Some(x), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!((out.final_sample[0] - 1.7 * factor).abs() < 1e-12);
    }

    #[test]
    fn ddim_full_grid_posterior_mean_is_standard_normal() {
        let s = linear();
        let den = GmmDenoiser::new(GmmPrior::standard_normal(1));
        let cfg = config(1000, TransitionKind::ddim(0.0));
        let n = 10_000;
        let xs: Vec<f64> = (0..n)
            .map(|i| sample(&den, &s, &cfg, None, &mut crate::nested::branch_rng(5, i)).unwrap().final_sample[0])
            .collect();
        let (m, v) = mean_var(&xs);
        assert!(m.abs() < 4.0 / (n as f64).sqrt());
        assert!((v - 1.0).abs() < 4.0 * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn early_predictions_contract_toward_prior_mean() {
        let prior = GmmPrior::new(vec![
            GmmComponent {
                weight: 0.5,
                mean: Vector::from_element(1, -3.0),
                cov: Matrix::from_element(1, 1, 0.1),
                label: None,
            },
            GmmComponent {
                weight: 0.5,
                mean: Vector::from_element(1, 3.0),
                cov: Matrix::from_element(1, 1, 0.1),
                label: None,
            },
        ])
        .unwrap();
        let data_var = prior.moments().1[(0, 0)];
        let den = GmmDenoiser::new(prior);
        let s = linear();
        let cfg = config(20, TransitionKind::ddim(0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 2000;
        let first: Vec<f64> =
            (0..n).map(|_| sample(&den, &s, &cfg, None, &mut rng).unwrap().entries[0].x0_hat[0]).collect();
        let (_, v) = mean_var(&first);
        let se = v * (2.0 / (n as f64 - 1.0)).sqrt();
        assert!(v + 3.0 * se < data_var, "early prediction variance {v} vs data {data_var}");
    }

    #[test]
    fn intermediate_prediction_is_a_step_function() {
        let s = linear();
        let den = GmmDenoiser::new(GmmPrior::standard_normal(1));
        let trace =
            sample(&den, &s, &config(5, TransitionKind::ddim(0.0)), None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(intermediate_prediction(&trace, 1).unwrap(), trace.entries[0].x0_hat);
        assert_eq!(intermediate_prediction(&trace, 3).unwrap(), trace.entries[2].x0_hat);
        assert_eq!(intermediate_prediction(&trace, 99).unwrap(), trace.final_sample);
        assert_eq!(intermediate_prediction(&trace, 0), Err(Error::NoPrediction));
    }

    #[test]
    fn csv_round_trip() {
        let s = linear();
        let den = GmmDenoiser::new(GmmPrior::standard_normal(3));
        let trace =
            sample(&den, &s, &config(4, TransitionKind::Ddpm), None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("run,kind,nfe,t,x0,x1,x2\n"));
        assert_eq!(Trace::read_csv(buf.as_slice()).unwrap(), trace);
    }

    #[test]
    fn merged_csv_round_trip() {
        let s = linear();
        let den = GmmDenoiser::new(GmmPrior::standard_normal(2));
        let cfg = config(3, TransitionKind::ddim(0.5));
        let traces: Vec<Trace> =
            (0..3).map(|i| sample(&den, &s, &cfg, None, &mut ChaCha8Rng::seed_from_u64(i)).unwrap()).collect();
        let mut buf = Vec::new();
        write_traces_csv(&traces, &mut buf).unwrap();
        assert_eq!(read_traces_csv(buf.as_slice()).unwrap(), traces);
        assert!(Trace::read_csv(buf.as_slice()).is_err());
        let text = String::from_utf8(buf).unwrap().replace("\n2,", "\n0,");
        assert!(read_traces_csv(text.as_bytes()).is_err());
    }

    #[test]
    fn rejects_bad_init() {
        let s = linear();
        let den = GmmDenoiser::new(GmmPrior::standard_normal(2));
        let cfg = config(4, TransitionKind::Ddpm);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample(&den, &s, &cfg, Some(Vector::zeros(3)), &mut rng).is_err());
        assert!(sample(&den, &s, &cfg, Some(Vector::from_element(2, f64::NAN)), &mut rng).is_err());
    }

    #[test]
    fn zero_terminal_first_prediction_is_prior_mean() {
        let s = linear();
        let prior = GmmPrior::new(vec![GmmComponent {
            weight: 1.0,
            mean: Vector::from_element(1, 1.5),
            cov: Matrix::from_element(1, 1, 0.2),
            label: None,
        }])
        .unwrap();
        let den = GmmDenoiser::new(prior);
        let mut cfg = config(10, TransitionKind::ddim(0.0));
        cfg.zero_terminal = true;
        let trace = sample(&den, &s, &cfg, None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!((trace.entries[0].x0_hat[0] - 1.5).abs() < 1e-12);
        assert!(trace.final_sample[0].is_finite());
    }
}
