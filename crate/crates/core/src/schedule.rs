//! Discrete variance-preserving noise schedules and integer timestep grids.
//!
//! `alpha_bar` is stored with an explicit entry at index 0 equal to one, so a
//! grid that terminates at 0 always lands on the clean-data end of the ladder.

use serde::{Deserialize, Serialize};

use crate::error::{param, Result};

/// How a schedule was constructed. Used for config round trips.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Plain-text description of a schedule (`T`, `kind`, `beta_min`, `beta_max`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    #[serde(rename = "T")]
    pub steps: usize,
    pub kind: ScheduleKind,
    #[serde(default = "default_beta_min")]
    pub beta_min: f64,
    #[serde(default = "default_beta_max")]
    pub beta_max: f64,
}

fn default_beta_min() -> f64 {
    1e-4
}

fn default_beta_max() -> f64 {
    0.02
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self { steps: 1000, kind: ScheduleKind::Linear, beta_min: default_beta_min(), beta_max: default_beta_max() }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        match self.kind {
            ScheduleKind::Linear => NoiseSchedule::linear(self.steps, self.beta_min, self.beta_max),
            ScheduleKind::Cosine => NoiseSchedule::cosine(self.steps),
        }
    }

    /// Renders the `key = value` block used in config files.
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("schedule spec is always representable")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }
}

/// Cumulative signal-retention ladder shared by every sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    /// `beta[t - 1]` is the noise amplitude of forward step `t`.
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// DDPM-style linearly increasing betas from `beta_min` at t=1 to `beta_max` at t=T.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(param("schedule needs at least one timestep"));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(param(format!(
                "beta range must satisfy 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let beta =
            (0..steps)
                .map(|i| {
                    if steps == 1 {
                        beta_min
                    } else {
                        beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                    }
                })
                .collect();
        let spec = ScheduleSpec { steps, kind: ScheduleKind::Linear, beta_min, beta_max };
        Ok(Self::from_betas(spec, beta))
    }

    /// Squared-cosine profile with offset 0.008 and betas clipped to 0.999.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(param("schedule needs at least one timestep"));
        }
        const OFFSET: f64 = 0.008;
        let f = |t: usize| {
            let x = (t as f64 / steps as f64 + OFFSET) / (1.0 + OFFSET) * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let beta = (1..=steps).map(|t| (1.0 - f(t) / f(t - 1)).clamp(f64::MIN_POSITIVE, 0.999)).collect();
        let spec = ScheduleSpec { steps, kind: ScheduleKind::Cosine, ..ScheduleSpec::default() };
        Ok(Self::from_betas(spec, beta))
    }

    fn from_betas(spec: ScheduleSpec, beta: Vec<f64>) -> Self {
        let mut alpha_bar = Vec::with_capacity(beta.len() + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Self { spec, beta, alpha_bar }
    }

    /// Total number of training timesteps `T`.
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn spec(&self) -> &ScheduleSpec {
        &self.spec
    }

    /// Noise amplitude of forward step `t`, for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.len(), "beta index {t} out of 1..={}", self.len());
        self.beta[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// All `T + 1` cumulative products, index 0 first.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t > self.len() {
            return Err(param(format!("timestep {t} outside 0..={}", self.len())));
        }
        Ok(())
    }

    /// Half log-SNR, `log(sqrt(abar) / sqrt(1 - abar))`. Infinite at t = 0.
    pub fn lambda(&self, t: usize) -> f64 {
        let ab = self.alpha_bar[t];
        0.5 * (ab.ln() - (1.0 - ab).ln())
    }
}

/// Strictly decreasing integer timesteps ending at 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepGrid {
    steps: Vec<usize>,
}

impl TimestepGrid {
    pub fn new(steps: Vec<usize>) -> Result<Self> {
        if steps.len() < 2 {
            return Err(param("grid needs a start timestep and the terminal 0"));
        }
        if steps.last() != Some(&0) {
            return Err(param("grid must terminate at timestep 0"));
        }
        if steps.windows(2).any(|w| w[0] <= w[1]) {
            return Err(param("grid must be strictly decreasing"));
        }
        Ok(Self { steps })
    }

    /// `n_steps` transitions from `start` down to 0, gaps as even as integer
    /// rounding allows. Remainders go to the earliest (largest-t) gaps.
    pub fn uniform(start: usize, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(param("grid needs at least one step"));
        }
        if n_steps > start {
            return Err(param(format!("cannot split {start} timesteps into {n_steps} steps")));
        }
        let base = start / n_steps;
        let extra = start % n_steps;
        let mut steps = Vec::with_capacity(n_steps + 1);
        let mut t = start;
        steps.push(t);
        for i in 0..n_steps {
            t -= base + usize::from(i < extra);
            steps.push(t);
        }
        debug_assert_eq!(t, 0);
        Ok(Self { steps })
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn start(&self) -> usize {
        self.steps[0]
    }

    /// Number of transitions (entries minus one).
    pub fn n_transitions(&self) -> usize {
        self.steps.len() - 1
    }

    /// Consecutive `(t, t_next)` pairs.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.steps.windows(2).map(|w| (w[0], w[1]))
    }

    pub fn validate_for(&self, schedule: &NoiseSchedule) -> Result<()> {
        schedule.check_timestep(self.start())
    }
}

/// `make_linear_schedule`.
pub fn make_linear_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(steps, beta_min, beta_max)
}

/// `make_cosine_schedule`.
pub fn make_cosine_schedule(steps: usize) -> Result<NoiseSchedule> {
    NoiseSchedule::cosine(steps)
}

pub fn uniform_grid(start: usize, n_steps: usize) -> Result<TimestepGrid> {
    TimestepGrid::uniform(start, n_steps)
}
