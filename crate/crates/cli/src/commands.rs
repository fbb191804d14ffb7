use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nestdiff_core::config::ProblemSpec;
use nestdiff_core::experiment::{self, boundary_consistency, inverse_runs, nested_traces, vanilla_traces};
use nestdiff_core::inverse::{psnr, OperatorSpec};
use nestdiff_core::metrics::{anytime_curve, auc, AnytimeCurve};
use nestdiff_core::sampler::{read_traces_csv, write_traces_csv};
use nestdiff_core::{
    GaussianFit, GmmDenoiser, InverseProblem, MeasurementDenoiser, SamplerConfig, TimestepGrid, Trace, Vector,
};
use serde_json::{json, Value};

use crate::setup::{self, Loaded};
use crate::{config_err, runtime_err, CliResult, Common, Pair};

/// Residual bound for exact (noise-free) measurement consistency.
const CONSISTENCY_TOL: f64 = 1e-8;

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| runtime_err(format!("cannot write {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &Value) -> CliResult<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(runtime_err)?;
    writeln!(w).and_then(|_| w.flush()).map_err(runtime_err)
}

fn write_curve(path: &Path, curve: &AnytimeCurve) -> CliResult<()> {
    curve.write_csv(create(path)?).map_err(runtime_err)
}

fn finals(traces: &[Trace]) -> Vec<Vector> {
    traces.iter().map(|t| t.final_sample.clone()).collect()
}

/// Anytime curve and final Fréchet distance, when the population is large
/// enough to fit a covariance.
fn population_metrics(
    traces: &[Trace],
    data: &GaussianFit,
    eval_every: usize,
) -> CliResult<Option<(AnytimeCurve, f64)>> {
    if traces.len() <= data.dim() {
        return Ok(None);
    }
    let curve = anytime_curve(traces, data, eval_every).map_err(runtime_err)?;
    let fd = experiment::population_fd(&finals(traces), data).map_err(runtime_err)?;
    Ok(Some((curve, fd)))
}

pub fn sample(common: &Common, vanilla: bool, steps: Option<usize>) -> CliResult<()> {
    let loaded = setup::load(common)?;
    let Loaded { config, prior, schedule, plan, .. } = &loaded;
    let runs = config.runs * plan_branches(&loaded);
    let denoiser = GmmDenoiser::new(prior.clone());
    let traces = if vanilla {
        let steps = steps.unwrap_or_else(|| plan.total_nfe());
        let grid = TimestepGrid::uniform(plan.outer_grid.start(), steps).map_err(config_err)?;
        let condition = plan.condition_schedule.first().cloned().unwrap_or_default();
        let sampler = SamplerConfig { zero_terminal: plan.zero_terminal, ..SamplerConfig::new(grid, plan.inner_kind) }
            .with_condition(condition);
        sampler.validate(schedule).map_err(config_err)?;
        vanilla_traces(&denoiser, schedule, &sampler, runs, config.seed).map_err(runtime_err)?
    } else {
        nested_traces(&denoiser, schedule, plan, runs, config.seed).map_err(runtime_err)?
    };

    let out = loaded.out_dir()?;
    write_traces_csv(&traces, create(&out.join("traces.csv"))?).map_err(runtime_err)?;
    let data = GaussianFit::from_prior(prior);
    let metrics = population_metrics(&traces, &data, config.eval_every)?;
    if let Some((curve, _)) = &metrics {
        write_curve(&out.join("curve.csv"), curve)?;
    }
    let (outer, inner) = if vanilla { (1, traces[0].total_nfe) } else { (plan.n_outer(), 0) };
    let summary = json!({
        "mode": if vanilla { "vanilla" } else { "nested" },
        "runs": runs,
        "seed": config.seed,
        "outer_steps": outer,
        "inner_steps": if vanilla { json!(inner) } else { json!(plan.inner_steps) },
        "R_ND": if vanilla { Value::Null } else { json!(plan.r_nd()) },
        "total_nfe": traces[0].total_nfe,
        "auc": metrics.as_ref().map(|(c, _)| auc(c)),
        "final_fd": metrics.as_ref().map(|(_, fd)| *fd),
    });
    write_json(&out.join("summary.json"), &summary)?;
    println!("{}", serde_json::to_string(&summary).map_err(runtime_err)?);
    Ok(())
}

/// Batch runs are single-branch sessions, so `branches` multiplies the
/// population: a B-branch session seeded `s` replays runs `0..B`.
fn plan_branches(loaded: &Loaded) -> usize {
    loaded.config.plan.branches
}

pub fn sweep_ratio(common: &Common, pairs: &[Pair]) -> CliResult<()> {
    let loaded = setup::load(common)?;
    let Loaded { config, prior, schedule, plan, .. } = &loaded;
    let budget = pairs[0].outer * pairs[0].inner;
    if let Some(p) = pairs.iter().find(|p| p.outer * p.inner != budget) {
        return Err(config_err(format!("pair {}x{} does not use the budget {budget}", p.outer, p.inner)));
    }
    if pairs.iter().any(|p| p.outer == 0 || p.inner == 0) {
        return Err(config_err("step counts must be positive"));
    }
    for p in pairs {
        let candidate = nestdiff_core::NestedPlan::uniform(plan.outer_grid.start(), p.outer, p.inner)
            .and_then(|c| c.with_kinds(plan.outer_kind, plan.inner_kind).validate(schedule))
            .map_err(config_err);
        candidate?;
    }
    let runs = config.runs * plan_branches(&loaded);
    if runs <= prior.dim() {
        return Err(config_err(format!("a sweep needs more than {} runs", prior.dim())));
    }
    let data = GaussianFit::from_prior(prior);
    let denoiser = GmmDenoiser::new(prior.clone());
    let list: Vec<(usize, usize)> = pairs.iter().map(|p| (p.outer, p.inner)).collect();
    let rows = experiment::ratio_sweep(&denoiser, schedule, plan, &list, runs, config.seed, &data, config.eval_every)
        .map_err(runtime_err)?;

    let out = loaded.out_dir()?;
    let curves = out.join("curves");
    fs::create_dir_all(&curves).map_err(runtime_err)?;
    let mut table = csv::Writer::from_writer(create(&out.join("auc_table.csv"))?);
    table.write_record(["outer", "inner", "R_ND", "total_nfe", "auc", "final_fd"]).map_err(runtime_err)?;
    println!("{:>6} {:>6} {:>10} {:>9} {:>14} {:>12}", "outer", "inner", "R_ND", "total_nfe", "auc", "final_fd");
    for row in &rows {
        let r = &row.record;
        table
            .write_record([
                r.outer.to_string(),
                r.inner.to_string(),
                format!("{:e}", r.r_nd),
                r.total_nfe.to_string(),
                format!("{:e}", r.auc),
                format!("{:e}", r.final_fd),
            ])
            .map_err(runtime_err)?;
        write_curve(&curves.join(format!("curve_{}x{}.csv", r.outer, r.inner)), &row.curve)?;
        println!(
            "{:>6} {:>6} {:>10.4} {:>9} {:>14.4} {:>12.6}",
            r.outer, r.inner, r.r_nd, r.total_nfe, r.auc, r.final_fd
        );
    }
    table.flush().map_err(runtime_err)?;
    let best = rows.iter().min_by(|a, b| a.record.auc.total_cmp(&b.record.auc)).expect("at least one pair");
    let summary = json!({
        "runs": runs,
        "seed": config.seed,
        "total_nfe": budget,
        "rows": rows.iter().map(|r| &r.record).collect::<Vec<_>>(),
        "best": { "outer": best.record.outer, "inner": best.record.inner },
    });
    write_json(&out.join("summary.json"), &summary)
}

fn problem_spec(loaded: &Loaded, keep: Option<Vec<usize>>, sigma_y: Option<f64>) -> CliResult<ProblemSpec> {
    let mut spec = match (loaded.config.problem.clone(), keep) {
        (_, Some(keep)) => ProblemSpec { operator: OperatorSpec::Mask { keep }, sigma_y: 0.0, y: None, peak: 1.0 },
        (Some(spec), None) => spec,
        (None, None) => return Err(config_err("no inverse problem: give --keep or a [problem] table")),
    };
    if let Some(s) = sigma_y {
        spec.sigma_y = s;
    }
    if let OperatorSpec::Custom { file } = &spec.operator {
        spec.operator = OperatorSpec::Custom { file: loaded.resolve(file) };
    }
    Ok(spec)
}

pub fn inverse(common: &Common, keep: Option<Vec<usize>>, sigma_y: Option<f64>) -> CliResult<()> {
    let loaded = setup::load(common)?;
    let spec = problem_spec(&loaded, keep, sigma_y)?;
    let Loaded { config, prior, schedule, plan, .. } = &loaded;
    let operator = spec.operator.build(prior.dim()).map_err(config_err)?;
    if !(spec.sigma_y.is_finite() && spec.sigma_y >= 0.0) {
        return Err(config_err(format!("sigma_y must be finite and >= 0, got {}", spec.sigma_y)));
    }
    let runs = config.runs * plan_branches(&loaded);
    let out = loaded.out_dir()?;

    let (traces, problems, psnr_rows) = match &spec.y {
        Some(y) => {
            let problem =
                InverseProblem::new(operator, Vector::from_column_slice(y), spec.sigma_y).map_err(config_err)?;
            let denoiser = MeasurementDenoiser::new(prior.clone(), problem.clone()).map_err(config_err)?;
            let traces = nested_traces(&denoiser, schedule, plan, runs, config.seed).map_err(runtime_err)?;
            let problems = vec![problem; runs];
            (traces, problems, None)
        }
        None => {
            let solved =
                inverse_runs(prior, schedule, plan, &operator, spec.sigma_y, runs, config.seed).map_err(runtime_err)?;
            let rows = boundary_psnr(&solved, spec.peak)?;
            let problems = solved
                .iter()
                .map(|r| InverseProblem::new(operator.clone(), r.y.clone(), spec.sigma_y))
                .collect::<Result<Vec<_>, _>>()
                .map_err(runtime_err)?;
            (solved.into_iter().map(|r| r.trace).collect(), problems, Some(rows))
        }
    };

    write_traces_csv(&traces, create(&out.join("traces.csv"))?).map_err(runtime_err)?;
    let exact = spec.sigma_y == 0.0;
    let residuals: Vec<f64> = traces.iter().zip(&problems).map(|(t, p)| p.residual(&t.final_sample)).collect();
    let mut cons = csv::Writer::from_writer(create(&out.join("consistency.csv"))?);
    cons.write_record(["run", "max_residual", "pass"]).map_err(runtime_err)?;
    for (i, r) in residuals.iter().enumerate() {
        let pass = if exact { (*r <= CONSISTENCY_TOL).to_string() } else { String::new() };
        cons.write_record([i.to_string(), format!("{r:e}"), pass]).map_err(runtime_err)?;
    }
    cons.flush().map_err(runtime_err)?;
    let max_residual = residuals.iter().copied().fold(0.0, f64::max);

    let mut summary = json!({
        "runs": runs,
        "seed": config.seed,
        "sigma_y": spec.sigma_y,
        "total_nfe": traces[0].total_nfe,
        "max_residual": max_residual,
        "consistency_all_pass": exact.then_some(max_residual <= CONSISTENCY_TOL),
    });
    if let Some(rows) = psnr_rows {
        let mut w = csv::Writer::from_writer(create(&out.join("psnr.csv"))?);
        w.write_record(["nfe", "boundary", "mean_psnr"]).map_err(runtime_err)?;
        for (k, (nfe, v)) in rows.iter().enumerate() {
            w.write_record([nfe.to_string(), (k + 1).to_string(), format!("{v:e}")]).map_err(runtime_err)?;
        }
        w.flush().map_err(runtime_err)?;
        let values: Vec<f64> = rows.iter().map(|r| r.1).collect();
        summary["boundary_psnr"] = json!(values);
        summary["psnr_non_decreasing"] = json!(values.windows(2).all(|w| w[1] >= w[0]));
    }
    write_json(&out.join("summary.json"), &summary)?;
    println!("{}", serde_json::to_string(&summary).map_err(runtime_err)?);
    Ok(())
}

/// Mean PSNR against the ground truth at every outer boundary, with the
/// boundary's NFE.
fn boundary_psnr(solved: &[experiment::InverseRun], peak: f64) -> CliResult<Vec<(usize, f64)>> {
    let nfe: Vec<usize> = solved[0].trace.boundaries().map(|e| e.nfe).collect();
    let mut sums = vec![0.0; nfe.len()];
    for run in solved {
        for (s, e) in sums.iter_mut().zip(run.trace.boundaries()) {
            *s += psnr(&e.x0_hat, &run.x0, peak).map_err(runtime_err)?;
        }
    }
    Ok(nfe.into_iter().zip(sums).map(|(n, s)| (n, s / solved.len() as f64)).collect())
}

pub fn metrics(common: &Common, traces: Option<PathBuf>) -> CliResult<()> {
    let loaded = setup::load(common)?;
    let path = traces.unwrap_or_else(|| loaded.config.out.join("traces.csv"));
    let file = File::open(&path).map_err(|e| config_err(format!("cannot open {}: {e}", path.display())))?;
    let traces = read_traces_csv(BufReader::new(file)).map_err(config_err)?;
    if traces.is_empty() {
        return Err(config_err(format!("{} holds no traces", path.display())));
    }
    if traces[0].final_sample.len() != loaded.prior.dim() {
        return Err(config_err("traces and prior disagree on the data dimension"));
    }
    let data = GaussianFit::from_prior(&loaded.prior);
    let metrics = population_metrics(&traces, &data, loaded.config.eval_every)?;
    let out = loaded.out_dir()?;
    if let Some((curve, _)) = &metrics {
        write_curve(&out.join("curve.csv"), curve)?;
    }
    let summary = json!({
        "runs": traces.len(),
        "total_nfe": traces[0].total_nfe,
        "auc": metrics.as_ref().map(|(c, _)| auc(c)),
        "final_fd": metrics.as_ref().map(|(_, fd)| *fd),
        "boundary_consistency": boundary_consistency(&traces).ok(),
    });
    write_json(&out.join("metrics.json"), &summary)?;
    println!("{}", serde_json::to_string(&summary).map_err(runtime_err)?);
    Ok(())
}
