//! Experiment configuration files.
//!
//! ```toml
//! seed = 0
//! runs = 2000
//! eval_every = 10
//! out = "out"
//!
//! [schedule]
//! T = 1000
//! kind = "linear"
//!
//! [prior]
//! file = "prior.toml"
//!
//! [plan]
//! outer_steps = 4
//! inner_steps = 15
//! inner_kind = { kind = "ddim", eta = 0.85 }
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::{Condition, GmmPrior, PriorSpec};
use crate::error::{param, Error, Result};
use crate::inverse::OperatorSpec;
use crate::nested::NestedPlan;
use crate::schedule::ScheduleSpec;
use crate::transition::TransitionKind;

/// A prior given inline or through a separate file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PriorSource {
    File { file: PathBuf },
    Inline(PriorSpec),
}

impl PriorSource {
    /// Relative file paths resolve against `base`.
    pub fn load(&self, base: Option<&Path>) -> Result<GmmPrior> {
        match self {
            PriorSource::Inline(spec) => spec.build(),
            PriorSource::File { file } => {
                let path = match base {
                    Some(b) if file.is_relative() => b.join(file),
                    _ => file.clone(),
                };
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| Error::Config(format!("cannot read prior {}: {e}", path.display())))?;
                PriorSpec::from_text(&text)?.build()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InnerSteps {
    Each(usize),
    List(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSpec {
    #[serde(default)]
    pub outer_steps: Option<usize>,
    pub inner_steps: InnerSteps,
    #[serde(default = "default_outer_kind")]
    pub outer_kind: TransitionKind,
    #[serde(default = "default_inner_kind")]
    pub inner_kind: TransitionKind,
    #[serde(default)]
    pub condition: Condition,
    #[serde(default = "one")]
    pub branches: usize,
    #[serde(default)]
    pub zero_terminal: bool,
}

fn default_outer_kind() -> TransitionKind {
    TransitionKind::ddim(0.0)
}

fn default_inner_kind() -> TransitionKind {
    TransitionKind::ddim(0.85)
}

fn one() -> usize {
    1
}

impl PlanSpec {
    pub fn uniform(outer: usize, inner: usize) -> Self {
        Self {
            outer_steps: Some(outer),
            inner_steps: InnerSteps::Each(inner),
            outer_kind: default_outer_kind(),
            inner_kind: default_inner_kind(),
            condition: Condition::Unconditional,
            branches: 1,
            zero_terminal: false,
        }
    }

    pub fn inner_list(&self) -> Result<Vec<usize>> {
        match (&self.inner_steps, self.outer_steps) {
            (InnerSteps::Each(n), Some(k)) => Ok(vec![*n; k]),
            (InnerSteps::Each(_), None) => Err(param("a scalar inner_steps needs outer_steps")),
            (InnerSteps::List(list), Some(k)) if list.len() != k => {
                Err(param(format!("inner_steps lists {} entries but outer_steps is {k}", list.len())))
            }
            (InnerSteps::List(list), _) => Ok(list.clone()),
        }
    }

    pub fn build(&self, start: usize) -> Result<NestedPlan> {
        let plan = NestedPlan::with_inner_steps(start, self.inner_list()?)?
            .with_kinds(self.outer_kind, self.inner_kind)
            .with_condition(self.condition.clone());
        Ok(NestedPlan { zero_terminal: self.zero_terminal, ..plan })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub operator: OperatorSpec,
    #[serde(default)]
    pub sigma_y: f64,
    /// Fixed measurement; when absent each run degrades its own prior draw.
    #[serde(default)]
    pub y: Option<Vec<f64>>,
    /// PSNR peak value.
    #[serde(default = "default_peak")]
    pub peak: f64,
}

fn default_peak() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub prior: PriorSource,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default = "default_plan")]
    pub plan: PlanSpec,
    #[serde(default)]
    pub problem: Option<ProblemSpec>,
    #[serde(default = "one")]
    pub runs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

fn default_plan() -> PlanSpec {
    PlanSpec::uniform(4, 15)
}

fn default_eval_every() -> usize {
    10
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("experiment config is always representable")
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if self.plan.branches == 0 {
            return Err(Error::Config("branches must be at least 1".into()));
        }
        let schedule = self.schedule.build()?;
        self.plan.build(schedule.len())?.validate(&schedule)
    }
}
