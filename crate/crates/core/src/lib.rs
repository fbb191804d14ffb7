//! Anytime diffusion sampling with nested diffusion processes.
//!
//! An outer reverse diffusion uses a complete inner diffusion as its
//! clean-sample generator, so a usable sample exists after every outer step.
//! All denoisers here are exact posterior computations over Gaussian-mixture
//! data, which makes every sampler property checkable against closed forms.

pub mod config;
pub mod denoiser;
pub mod error;
pub mod experiment;
pub mod inverse;
pub mod linalg;
pub mod metrics;
pub mod nested;
pub mod sampler;
pub mod schedule;
pub mod transition;

#[cfg(test)]
#[path = "../tests/support/oracles.rs"]
pub(crate) mod oracles;
#[cfg(test)]
pub(crate) mod testing;

pub use denoiser::{Condition, Denoiser, GmmComponent, GmmDenoiser, GmmPrior, MeasurementDenoiser};
pub use error::{Error, Result};
pub use inverse::{InverseProblem, LinearOperator};
pub use linalg::{Matrix, Vector};
pub use metrics::{AnytimeCurve, GaussianFit};
pub use nested::{AnytimeSession, NestedPlan, Phase};
pub use sampler::{SamplerConfig, Trace, TraceEntry};
pub use schedule::{NoiseSchedule, TimestepGrid};
pub use transition::{Eta, TransitionKind};
