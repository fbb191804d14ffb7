//! Transition kernels `q(x_{t'} | x0_hat, x_t)`.
//!
//! Kernels are written against raw `alpha_bar` values so callers can apply a
//! terminal override; the `*_step` functions are the timestep-indexed forms.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param, Result};
use crate::linalg::{self, Vector};
use crate::schedule::NoiseSchedule;

/// Per-step stochasticity rule for DDIM transitions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaRule {
    /// `eta = sqrt(1 - alpha_bar_next)`, larger noise early in the process.
    SqrtOneMinusAlphaBarNext,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Eta {
    Fixed(f64),
    Rule(EtaRule),
}

impl Eta {
    pub fn value(&self, alpha_bar_next: f64) -> f64 {
        match *self {
            Eta::Fixed(eta) => eta,
            Eta::Rule(EtaRule::SqrtOneMinusAlphaBarNext) => (1.0 - alpha_bar_next).max(0.0).sqrt(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Eta::Fixed(eta) if !(eta.is_finite() && eta >= 0.0) => {
                Err(param(format!("eta must be finite and >= 0, got {eta}")))
            }
            _ => Ok(()),
        }
    }
}

impl From<f64> for Eta {
    fn from(eta: f64) -> Self {
        Eta::Fixed(eta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransitionKind {
    Ddpm,
    Ddim {
        eta: Eta,
    },
    /// Single-step second-order DPM-Solver++ in data-prediction form.
    #[serde(rename = "dpmpp2s")]
    DpmSolverPp2s,
}

impl TransitionKind {
    pub fn ddim(eta: f64) -> Self {
        TransitionKind::Ddim { eta: Eta::Fixed(eta) }
    }

    /// First-order kinds spend exactly one denoiser call per transition.
    pub fn is_first_order(&self) -> bool {
        !matches!(self, TransitionKind::DpmSolverPp2s)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TransitionKind::Ddim { eta } => eta.validate(),
            _ => Ok(()),
        }
    }
}

fn check_pair(t: usize, t_next: usize) -> Result<()> {
    if t <= t_next {
        return Err(param(format!("transition must go backwards, got {t} -> {t_next}")));
    }
    Ok(())
}

/// Standard deviation of the DDIM kernel.
pub fn ddim_sigma(alpha_bar: f64, alpha_bar_next: f64, eta: f64) -> f64 {
    if eta == 0.0 || alpha_bar_next >= 1.0 {
        return 0.0;
    }
    let ratio = ((1.0 - alpha_bar_next) / (1.0 - alpha_bar)).max(0.0);
    eta * ratio.sqrt() * (1.0 - alpha_bar / alpha_bar_next).max(0.0).sqrt()
}

/// Generalized DDIM update between two noise levels.
pub fn ddim_update<R: Rng + ?Sized>(
    alpha_bar: f64,
    alpha_bar_next: f64,
    x_t: &Vector,
    x0_hat: &Vector,
    eta: f64,
    rng: &mut R,
) -> Result<Vector> {
    if alpha_bar_next >= 1.0 {
        return Ok(x0_hat.clone());
    }
    if alpha_bar >= 1.0 {
        return Err(param("noise prediction is undefined at alpha_bar = 1"));
    }
    let eps_hat = (x_t - x0_hat * alpha_bar.sqrt()) / (1.0 - alpha_bar).sqrt();
    let sigma = ddim_sigma(alpha_bar, alpha_bar_next, eta);
    let dir = (1.0 - alpha_bar_next - sigma * sigma).max(0.0).sqrt();
    let mut next = x0_hat * alpha_bar_next.sqrt() + eps_hat * dir;
    if sigma > 0.0 {
        next += linalg::standard_normal(x_t.len(), rng) * sigma;
    }
    Ok(next)
}

pub fn ddim_step<R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    t: usize,
    t_next: usize,
    x_t: &Vector,
    x0_hat: &Vector,
    eta: f64,
    rng: &mut R,
) -> Result<Vector> {
    check_pair(t, t_next)?;
    schedule.check_timestep(t)?;
    ddim_update(schedule.alpha_bar(t), schedule.alpha_bar(t_next), x_t, x0_hat, eta, rng)
}

/// Mean coefficients and variance of the forward-process posterior
/// `q(x_{t'} | x0, x_t)` between two noise levels.
pub fn ddpm_posterior(alpha_bar: f64, alpha_bar_next: f64) -> (f64, f64, f64) {
    let alpha_step = alpha_bar / alpha_bar_next;
    let beta_step = 1.0 - alpha_step;
    let c0 = alpha_bar_next.sqrt() * beta_step / (1.0 - alpha_bar);
    let ct = alpha_step.sqrt() * (1.0 - alpha_bar_next) / (1.0 - alpha_bar);
    let var = (1.0 - alpha_bar_next) / (1.0 - alpha_bar) * beta_step;
    (c0, ct, var)
}

/// Ancestral update: a draw from the forward-process posterior. Also used for
/// non-unit gaps, where it is the posterior of the skipped Markov chain.
pub fn ddpm_update<R: Rng + ?Sized>(
    alpha_bar: f64,
    alpha_bar_next: f64,
    x_t: &Vector,
    x0_hat: &Vector,
    rng: &mut R,
) -> Result<Vector> {
    if alpha_bar_next >= 1.0 {
        return Ok(x0_hat.clone());
    }
    if alpha_bar >= 1.0 {
        return Err(param("ancestral step is undefined at alpha_bar = 1"));
    }
    let (c0, ct, var) = ddpm_posterior(alpha_bar, alpha_bar_next);
    let mut next = x0_hat * c0 + x_t * ct;
    if var > 0.0 {
        next += linalg::standard_normal(x_t.len(), rng) * var.sqrt();
    }
    Ok(next)
}

pub fn ddpm_step<R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    t: usize,
    x_t: &Vector,
    x0_hat: &Vector,
    rng: &mut R,
) -> Result<Vector> {
    if t == 0 {
        return Err(param("ancestral step needs t >= 1"));
    }
    schedule.check_timestep(t)?;
    ddpm_update(schedule.alpha_bar(t), schedule.alpha_bar(t - 1), x_t, x0_hat, rng)
}

fn half_log_snr(alpha_bar: f64) -> f64 {
    0.5 * (alpha_bar.ln() - (1.0 - alpha_bar).ln())
}

/// Timestep in `t_next..=t` whose half log-SNR is nearest to `target`.
/// Ties go to the larger timestep.
fn nearest_lambda(alpha_bar: &dyn Fn(usize) -> f64, t: usize, t_next: usize, target: f64) -> usize {
    let mut best = t;
    let mut best_gap = f64::INFINITY;
    for s in (t_next..=t).rev() {
        let gap = (half_log_snr(alpha_bar(s)) - target).abs();
        if gap < best_gap {
            best = s;
            best_gap = gap;
        }
    }
    best
}

/// DPM-Solver++(2S) update over an arbitrary `alpha_bar` ladder.
///
/// `denoise(s, x)` must return the clean-sample prediction at timestep `s`.
/// Returns the new state and the number of denoiser calls spent.
pub fn dpm_pp_2s_update(
    alpha_bar: &dyn Fn(usize) -> f64,
    t: usize,
    t_next: usize,
    x_t: &Vector,
    denoise: &mut dyn FnMut(usize, &Vector) -> Result<Vector>,
) -> Result<(Vector, usize)> {
    check_pair(t, t_next)?;
    let (ab_t, ab_n) = (alpha_bar(t), alpha_bar(t_next));
    if ab_t >= 1.0 {
        return Err(param("solver step is undefined at alpha_bar = 1"));
    }
    let x0_t = denoise(t, x_t)?;
    if ab_n >= 1.0 {
        return Ok((x0_t, 1));
    }
    let sigma_t = (1.0 - ab_t).sqrt();
    let (alpha_n, sigma_n) = (ab_n.sqrt(), (1.0 - ab_n).sqrt());
    let (lam_t, lam_n) = (half_log_snr(ab_t), half_log_snr(ab_n));
    let h = lam_n - lam_t;
    let first_order = |d: &Vector| x_t * (sigma_n / sigma_t) - d * (alpha_n * (-h).exp_m1());
    if !lam_t.is_finite() {
        return Ok((first_order(&x0_t), 1));
    }
    let mid = nearest_lambda(alpha_bar, t, t_next, lam_t + 0.5 * h);
    if mid == t || mid == t_next {
        return Ok((first_order(&x0_t), 1));
    }
    let ab_s = alpha_bar(mid);
    let (alpha_s, sigma_s) = (ab_s.sqrt(), (1.0 - ab_s).sqrt());
    let r = (half_log_snr(ab_s) - lam_t) / h;
    let x_s = x_t * (sigma_s / sigma_t) - &x0_t * (alpha_s * (-r * h).exp_m1());
    let x0_s = denoise(mid, &x_s)?;
    let blend = &x0_t * (1.0 - 0.5 / r) + x0_s * (0.5 / r);
    Ok((first_order(&blend), 2))
}

pub fn dpm_pp_2s_step(
    schedule: &NoiseSchedule,
    t: usize,
    t_next: usize,
    x_t: &Vector,
    denoise: &mut dyn FnMut(usize, &Vector) -> Result<Vector>,
) -> Result<(Vector, usize)> {
    schedule.check_timestep(t)?;
    dpm_pp_2s_update(&|s| schedule.alpha_bar(s), t, t_next, x_t, denoise)
}
