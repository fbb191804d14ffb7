//! Config loading and flag overrides.

use std::fs;
use std::path::{Path, PathBuf};

use nestdiff_core::config::{ExperimentConfig, InnerSteps, PlanSpec, PriorSource};
use nestdiff_core::denoiser::PriorSpec;
use nestdiff_core::transition::Eta;
use nestdiff_core::{GmmComponent, GmmPrior, Matrix, NestedPlan, NoiseSchedule, TransitionKind, Vector};

use crate::{config_err, runtime_err, CliResult, Common, KindArg};

/// Four isotropic components at `(+-1, +-1)` with variance 0.25; the top
/// pair carries label 0 and the bottom pair label 1.
pub fn builtin_prior() -> GmmPrior {
    let means = [[1.0, 1.0], [-1.0, 1.0], [1.0, -1.0], [-1.0, -1.0]];
    let components = means
        .iter()
        .enumerate()
        .map(|(i, m)| GmmComponent {
            weight: 0.25,
            mean: Vector::from_row_slice(m),
            cov: Matrix::identity(2, 2) * 0.25,
            label: Some(i as u32 / 2),
        })
        .collect();
    GmmPrior::new(components).expect("built-in prior is valid")
}

pub struct Loaded {
    pub config: ExperimentConfig,
    /// Directory that relative paths in the config resolve against.
    pub base: Option<PathBuf>,
    pub prior: GmmPrior,
    pub schedule: NoiseSchedule,
    pub plan: NestedPlan,
}

impl Loaded {
    pub fn resolve(&self, path: &Path) -> PathBuf {
        match &self.base {
            Some(b) if path.is_relative() => b.join(path),
            _ => path.to_path_buf(),
        }
    }

    pub fn out_dir(&self) -> CliResult<&Path> {
        let out = self.config.out.as_path();
        fs::create_dir_all(out).map_err(|e| runtime_err(format!("cannot create {}: {e}", out.display())))?;
        Ok(out)
    }
}

pub fn load(common: &Common) -> CliResult<Loaded> {
    let (mut config, base) = match &common.config {
        Some(path) => {
            let text =
                fs::read_to_string(path).map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
            let config = ExperimentConfig::from_text(&text).map_err(config_err)?;
            (config, path.parent().map(Path::to_path_buf))
        }
        None => (
            ExperimentConfig {
                prior: PriorSource::Inline(PriorSpec::from_prior(&builtin_prior())),
                schedule: Default::default(),
                plan: PlanSpec::uniform(4, 15),
                problem: None,
                runs: 1,
                seed: 0,
                eval_every: 10,
                out: PathBuf::from("out"),
            },
            None,
        ),
    };
    apply_overrides(&mut config, common)?;
    config.validate().map_err(config_err)?;
    let prior = config.prior.load(base.as_deref()).map_err(config_err)?;
    let schedule = config.schedule.build().map_err(config_err)?;
    let plan = config.plan.build(schedule.len()).map_err(config_err)?;
    plan.condition_schedule.iter().try_for_each(|c| c.validate(&prior)).map_err(config_err)?;
    Ok(Loaded { config, base, prior, schedule, plan })
}

fn apply_overrides(config: &mut ExperimentConfig, common: &Common) -> CliResult<()> {
    let plan = &mut config.plan;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(outer) = common.outer {
        plan.outer_steps = Some(outer);
    }
    if let Some(inner) = common.inner {
        plan.inner_steps = InnerSteps::Each(inner);
    }
    let current_eta = match plan.inner_kind {
        TransitionKind::Ddim { eta: Eta::Fixed(e) } => e,
        _ => 0.85,
    };
    match (common.kind_inner, common.eta_inner) {
        (Some(KindArg::Ddim), eta) | (None, eta @ Some(_)) => {
            plan.inner_kind = TransitionKind::ddim(eta.unwrap_or(current_eta));
        }
        (Some(_), Some(_)) => return Err(config_err("--eta-inner only applies to --kind-inner ddim")),
        (Some(KindArg::Ddpm), None) => plan.inner_kind = TransitionKind::Ddpm,
        (Some(KindArg::Dpmpp2s), None) => plan.inner_kind = TransitionKind::DpmSolverPp2s,
        (None, None) => {}
    }
    if let Some(eta) = common.eta_outer {
        plan.outer_kind = TransitionKind::ddim(eta);
    }
    if let Some(b) = common.branches {
        plan.branches = b;
    }
    if let Some(e) = common.eval_every {
        config.eval_every = e;
    }
    if let Some(r) = common.runs {
        config.runs = r;
    }
    if let Some(out) = &common.out {
        config.out = out.clone();
    }
    Ok(())
}
