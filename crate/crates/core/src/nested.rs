//! Nested diffusion: an outer reverse process whose clean-sample generator is
//! a complete inner reverse process, plus the interactive session built on it.

use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Condition, Denoiser};
use crate::error::{param, Error, Result};
use crate::linalg::{self, Vector};
use crate::sampler::{self, EntryKind, Ladder, Trace, TraceEntry};
use crate::schedule::{NoiseSchedule, TimestepGrid};
use crate::transition::TransitionKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NestedPlan {
    pub outer_grid: TimestepGrid,
    /// Inner step count for each outer transition.
    pub inner_steps: Vec<usize>,
    pub outer_kind: TransitionKind,
    pub inner_kind: TransitionKind,
    /// Condition used by the inner process of each outer transition.
    pub condition_schedule: Vec<Condition>,
    #[serde(default)]
    pub zero_terminal: bool,
}

impl NestedPlan {
    /// `outer` evenly spaced outer steps from `start`, each with `inner` inner
    /// steps; DDIM outer (eta 0) and DDIM inner (eta 0.85).
    pub fn uniform(start: usize, outer: usize, inner: usize) -> Result<Self> {
        Self::with_inner_steps(start, vec![inner; outer])
    }

    pub fn with_inner_steps(start: usize, inner_steps: Vec<usize>) -> Result<Self> {
        let outer_grid = TimestepGrid::uniform(start, inner_steps.len())?;
        let n = inner_steps.len();
        let plan = Self {
            outer_grid,
            inner_steps,
            outer_kind: TransitionKind::ddim(0.0),
            inner_kind: TransitionKind::ddim(0.85),
            condition_schedule: vec![Condition::Unconditional; n],
            zero_terminal: false,
        };
        plan.check_shape()?;
        Ok(plan)
    }

    pub fn with_kinds(mut self, outer: TransitionKind, inner: TransitionKind) -> Self {
        self.outer_kind = outer;
        self.inner_kind = inner;
        self
    }

    pub fn with_condition(mut self, condition: Condition) -> Self {
        self.condition_schedule = vec![condition; self.n_outer()];
        self
    }

    pub fn n_outer(&self) -> usize {
        self.outer_grid.n_transitions()
    }

    /// Denoiser calls per run: exact for first-order inner kinds, an upper
    /// bound for the 2S solver.
    pub fn total_nfe(&self) -> usize {
        if self.inner_kind.is_first_order() {
            self.inner_steps.iter().sum()
        } else {
            self.inner_steps.iter().map(|n| 2 * n - 1).sum()
        }
    }

    /// Outer steps divided by mean inner steps per outer step.
    pub fn r_nd(&self) -> f64 {
        let k = self.n_outer() as f64;
        let inner: usize = self.inner_steps.iter().sum();
        k * k / inner as f64
    }

    fn check_shape(&self) -> Result<()> {
        let n = self.n_outer();
        if self.inner_steps.len() != n {
            return Err(param(format!("{} inner step counts for {n} outer transitions", self.inner_steps.len())));
        }
        if self.condition_schedule.len() != n {
            return Err(param(format!("{} conditions for {n} outer transitions", self.condition_schedule.len())));
        }
        if self.inner_steps.contains(&0) {
            return Err(param("every outer step needs at least one inner step"));
        }
        for ((t, _), &s) in self.outer_grid.pairs().zip(&self.inner_steps) {
            if s > t {
                return Err(param(format!("outer step at t={t} cannot hold {s} inner steps")));
            }
        }
        Ok(())
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        self.check_shape()?;
        self.outer_grid.validate_for(schedule)?;
        if !self.outer_kind.is_first_order() {
            return Err(param("the outer process must use a first-order transition"));
        }
        self.outer_kind.validate()?;
        self.inner_kind.validate()
    }
}

/// One denoiser call or completed inner process seen while advancing a walker.
#[derive(Debug, Clone)]
struct Prediction {
    nfe: usize,
    t: usize,
    boundary: bool,
    x0_hat: Vector,
}

#[derive(Debug, Clone)]
struct InnerRun {
    grid: TimestepGrid,
    pos: usize,
    x: Vector,
}

/// Progress of a single nested trajectory.
#[derive(Debug, Clone)]
struct Walker<R> {
    x_t: Vector,
    rng: R,
    outer: usize,
    inner: Option<InnerRun>,
    nfe: usize,
}

struct Context<'a> {
    denoiser: &'a dyn Denoiser,
    ladder: Ladder<'a>,
    plan: &'a NestedPlan,
}

impl<R: RngCore> Walker<R> {
    fn new(dim: usize, mut rng: R) -> Self {
        let x_t = linalg::standard_normal(dim, &mut rng);
        Self { x_t, rng, outer: 0, inner: None, nfe: 0 }
    }

    fn finished(&self, plan: &NestedPlan) -> bool {
        self.outer >= plan.n_outer()
    }

    /// Runs up to `max_steps` inner transitions (all remaining when `None`).
    /// Calls inside the final inner transition are not reported on their own:
    /// the boundary that follows carries the same prediction.
    fn advance(&mut self, ctx: &Context, max_steps: Option<usize>, sink: &mut dyn FnMut(Prediction)) -> Result<()> {
        let plan = ctx.plan;
        let (t_outer, t_next) =
            plan.outer_grid.pairs().nth(self.outer).ok_or_else(|| Error::State("run is finished".into()))?;
        if self.inner.is_none() {
            let grid = TimestepGrid::uniform(t_outer, plan.inner_steps[self.outer])?;
            self.inner = Some(InnerRun { grid, pos: 0, x: self.x_t.clone() });
        }
        let condition = &plan.condition_schedule[self.outer];
        let mut budget = max_steps.unwrap_or(usize::MAX);
        let run = self.inner.as_mut().expect("inner run was just created");
        let n = run.grid.n_transitions();
        while run.pos < n && budget > 0 {
            let (t, tn) = (run.grid.steps()[run.pos], run.grid.steps()[run.pos + 1]);
            let last = run.pos + 1 == n;
            let nfe = &mut self.nfe;
            let mut on_predict = |s: usize, pred: &Vector| {
                *nfe += 1;
                if !last {
                    sink(Prediction { nfe: *nfe, t: s, boundary: false, x0_hat: pred.clone() });
                }
            };
            run.x = sampler::transition_step(
                ctx.denoiser,
                ctx.ladder,
                &plan.inner_kind,
                condition,
                t,
                tn,
                &run.x,
                &mut self.rng,
                &mut on_predict,
            )?;
            run.pos += 1;
            budget -= 1;
        }
        if run.pos < n {
            return Ok(());
        }
        let x0_hat = self.inner.take().expect("inner run exists").x;
        sink(Prediction { nfe: self.nfe, t: t_outer, boundary: true, x0_hat: x0_hat.clone() });
        let (ab, ab_next) = (ctx.ladder.alpha_bar(t_outer), ctx.ladder.alpha_bar(t_next));
        self.x_t = sampler::first_order_update(&plan.outer_kind, ab, ab_next, &self.x_t, &x0_hat, &mut self.rng)?;
        self.outer += 1;
        Ok(())
    }
}

/// Nested sampling. The trace holds every call of the first inner process
/// followed by one entry per outer boundary, which is exactly what an
/// interrupted run would hand back at each NFE.
pub fn nested_sample<R: RngCore>(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    plan: &NestedPlan,
    rng: &mut R,
) -> Result<Trace> {
    plan.validate(schedule)?;
    for c in &plan.condition_schedule {
        denoiser.check_condition(c)?;
    }
    let ctx = Context { denoiser, ladder: Ladder { schedule, zero_terminal: plan.zero_terminal }, plan };
    let mut walker = Walker::new(denoiser.dim(), rng);
    let mut entries = Vec::new();
    while !walker.finished(plan) {
        let first = walker.outer == 0;
        walker.advance(&ctx, None, &mut |p| {
            if p.boundary || first {
                let kind = if p.boundary { EntryKind::Boundary } else { EntryKind::Inner };
                entries.push(TraceEntry { nfe: p.nfe, t: p.t, kind, x0_hat: p.x0_hat });
            }
        })?;
    }
    Ok(Trace { entries, final_sample: walker.x_t, total_nfe: walker.nfe })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    AwaitingInner,
    AtOuterBoundary,
    Finished,
}

/// A prediction surfaced by a session. `nfe` counts the calls made by the
/// branch that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub branch: usize,
    pub nfe: usize,
    pub outer_step: usize,
    pub t: usize,
    pub boundary: bool,
    pub x0_hat: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchStatus {
    pub x_t: Vec<f64>,
    pub latest: Option<Vec<f64>>,
    pub nfe: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionStatus {
    pub phase: Phase,
    pub nfe_count: usize,
    /// Outer transitions completed so far.
    pub outer_step: usize,
    pub n_outer: usize,
    /// Outer timestep of the current state.
    pub t: usize,
    pub condition: Option<Condition>,
    pub branches: Vec<BranchStatus>,
}

#[derive(Debug, Clone)]
struct Branch {
    walker: Walker<ChaCha8Rng>,
    latest: Option<Vector>,
}

/// The random stream of run `index` under `seed`.
pub fn branch_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Live nested sampling over several branches that share the outer grid.
///
/// Branch `b` draws from `branch_rng(seed, b)`, so a one-branch session
/// reproduces `nested_sample` run with `ChaCha8Rng::seed_from_u64(seed)`.
pub struct AnytimeSession {
    denoiser: Arc<dyn Denoiser>,
    schedule: NoiseSchedule,
    plan: NestedPlan,
    branches: Vec<Branch>,
    nfe_count: usize,
    phase: Phase,
    event_log: Vec<SessionEvent>,
}

impl std::fmt::Debug for AnytimeSession {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AnytimeSession")
            .field("plan", &self.plan)
            .field("branches", &self.branches.len())
            .field("nfe_count", &self.nfe_count)
            .field("phase", &self.phase)
            .finish()
    }
}

impl AnytimeSession {
    pub fn create(
        denoiser: Arc<dyn Denoiser>,
        schedule: NoiseSchedule,
        plan: NestedPlan,
        n_branches: usize,
        seed: u64,
    ) -> Result<Self> {
        if n_branches == 0 {
            return Err(param("a session needs at least one branch"));
        }
        plan.validate(&schedule)?;
        for c in &plan.condition_schedule {
            denoiser.check_condition(c)?;
        }
        let dim = denoiser.dim();
        let branches =
            (0..n_branches).map(|b| Branch { walker: Walker::new(dim, branch_rng(seed, b)), latest: None }).collect();
        Ok(Self {
            denoiser,
            schedule,
            plan,
            branches,
            nfe_count: 0,
            phase: Phase::AwaitingInner,
            event_log: Vec::new(),
        })
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn nfe_count(&self) -> usize {
        self.nfe_count
    }

    pub fn n_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn plan(&self) -> &NestedPlan {
        &self.plan
    }

    pub fn outer_step(&self) -> usize {
        self.branches[0].walker.outer
    }

    pub fn event_log(&self) -> &[SessionEvent] {
        &self.event_log
    }

    /// Current outer state of a branch.
    pub fn branch_state(&self, branch: usize) -> Result<&Vector> {
        self.branches.get(branch).map(|b| &b.walker.x_t).ok_or_else(|| param(format!("no branch {branch}")))
    }

    /// Runs every branch through the rest of the current inner process, or
    /// through `stride` more inner steps. Returns the new events ordered by
    /// (nfe, branch).
    pub fn advance(&mut self, stride: Option<usize>) -> Result<Vec<SessionEvent>> {
        if self.phase == Phase::Finished {
            return Err(Error::State("session is finished".into()));
        }
        if stride == Some(0) {
            return Err(param("stride must be positive"));
        }
        let ctx = Context {
            denoiser: self.denoiser.as_ref(),
            ladder: Ladder { schedule: &self.schedule, zero_terminal: self.plan.zero_terminal },
            plan: &self.plan,
        };
        let mut events = Vec::new();
        let mut updated = Vec::with_capacity(self.branches.len());
        let mut spent = 0;
        for (b, branch) in self.branches.iter().enumerate() {
            let mut next = branch.clone();
            let outer = next.walker.outer;
            let before = next.walker.nfe;
            next.walker.advance(&ctx, stride, &mut |p| {
                if outer == 0 || p.boundary {
                    next.latest = Some(p.x0_hat.clone());
                    events.push(SessionEvent {
                        branch: b,
                        nfe: p.nfe,
                        outer_step: outer,
                        t: p.t,
                        boundary: p.boundary,
                        x0_hat: p.x0_hat.iter().copied().collect(),
                    });
                }
            })?;
            spent += next.walker.nfe - before;
            updated.push(next);
        }
        self.branches = updated;
        self.nfe_count += spent;
        events.sort_by_key(|e| (e.nfe, e.branch));
        self.event_log.extend(events.iter().cloned());
        let w = &self.branches[0].walker;
        self.phase = if w.finished(&self.plan) {
            Phase::Finished
        } else if w.inner.is_some() {
            Phase::AwaitingInner
        } else {
            Phase::AtOuterBoundary
        };
        Ok(events)
    }

    /// Copies branch `branch`'s outer state into every branch. Random streams
    /// are left alone so the branches diverge again on the next advance.
    pub fn select(&mut self, branch: usize) -> Result<()> {
        self.require_boundary("select a branch")?;
        let x = self.branch_state(branch)?.clone();
        for b in &mut self.branches {
            b.walker.x_t = x.clone();
        }
        Ok(())
    }

    /// Replaces the condition of every remaining outer transition.
    pub fn edit_condition(&mut self, condition: Condition) -> Result<()> {
        self.require_boundary("edit the condition")?;
        self.denoiser.check_condition(&condition)?;
        let from = self.outer_step();
        for c in &mut self.plan.condition_schedule[from..] {
            *c = condition.clone();
        }
        Ok(())
    }

    fn require_boundary(&self, what: &str) -> Result<()> {
        match self.phase {
            Phase::AtOuterBoundary => Ok(()),
            Phase::AwaitingInner => Err(Error::State(format!("cannot {what} while an inner process is pending"))),
            Phase::Finished => Err(Error::State(format!("cannot {what} on a finished session"))),
        }
    }

    /// What the session would return if stopped now: the latest inner
    /// prediction during the first outer step, the latest boundary afterwards.
    pub fn anytime_result(&self, branch: usize) -> Result<Vector> {
        let b = self.branches.get(branch).ok_or_else(|| param(format!("no branch {branch}")))?;
        if self.phase == Phase::Finished {
            return Ok(b.walker.x_t.clone());
        }
        b.latest.clone().ok_or(Error::NoPrediction)
    }

    pub fn status(&self) -> SessionStatus {
        let outer_step = self.outer_step();
        let t = self.plan.outer_grid.steps()[outer_step];
        SessionStatus {
            phase: self.phase,
            nfe_count: self.nfe_count,
            outer_step,
            n_outer: self.plan.n_outer(),
            t,
            condition: self.plan.condition_schedule.get(outer_step).cloned(),
            branches: self
                .branches
                .iter()
                .map(|b| BranchStatus {
                    x_t: b.walker.x_t.iter().copied().collect(),
                    latest: b.latest.as_ref().map(|v| v.iter().copied().collect()),
                    nfe: b.walker.nfe,
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{GmmComponent, GmmDenoiser, GmmPrior};
    use crate::linalg::Matrix;
    use crate::sampler::{sample, SamplerConfig};

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
    }

    fn two_class() -> GmmPrior {
        let comp = |m: [f64; 2], label| GmmComponent {
            weight: 0.5,
            mean: Vector::from_row_slice(&m),
            cov: Matrix::identity(2, 2) * 0.1,
            label: Some(label),
        };
        GmmPrior::new(vec![comp([-3.0, 0.0], 0), comp([3.0, 0.0], 1)]).unwrap()
    }

    fn session(plan: NestedPlan, branches: usize, seed: u64) -> AnytimeSession {
        AnytimeSession::create(Arc::new(GmmDenoiser::new(two_class())), schedule(), plan, branches, seed).unwrap()
    }

    #[test]
    fn five_by_fifty_budget_is_250() {
        let plan = NestedPlan::uniform(1000, 5, 50).unwrap();
        assert_eq!(plan.total_nfe(), 250);
        let den = GmmDenoiser::new(two_class());
        let trace = nested_sample(&den, &schedule(), &plan, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(trace.total_nfe, 250);
        assert_eq!(trace.boundaries().count(), 5);
        assert_eq!(trace.entries.len(), 49 + 5);
        assert!(trace.entries.windows(2).all(|w| w[0].nfe < w[1].nfe));
    }

    #[test]
    fn single_outer_step_is_vanilla() {
        let s = schedule();
        let den = GmmDenoiser::new(two_class());
        for seed in 0..5 {
            let plan = NestedPlan::uniform(1000, 1, 30).unwrap();
            let nested = nested_sample(&den, &s, &plan, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let cfg = SamplerConfig::new(TimestepGrid::uniform(1000, 30).unwrap(), plan.inner_kind);
            let vanilla = sample(&den, &s, &cfg, None, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(nested.final_sample, vanilla.final_sample);
            assert_eq!(nested.total_nfe, vanilla.total_nfe);
        }
    }

    #[test]
    fn single_inner_step_is_vanilla_over_outer_grid() {
        let s = schedule();
        let den = GmmDenoiser::new(two_class());
        let plan =
            NestedPlan::uniform(1000, 12, 1).unwrap().with_kinds(TransitionKind::Ddpm, TransitionKind::ddim(0.85));
        let nested = nested_sample(&den, &s, &plan, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let cfg = SamplerConfig::new(plan.outer_grid.clone(), TransitionKind::Ddpm);
        let vanilla = sample(&den, &s, &cfg, None, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(nested.final_sample, vanilla.final_sample);
        let boundaries: Vec<_> = nested.boundaries().map(|e| e.x0_hat.clone()).collect();
        let steps: Vec<_> = vanilla.entries.iter().map(|e| e.x0_hat.clone()).collect();
        assert_eq!(boundaries, steps);
    }

    #[test]
    fn plan_validation() {
        assert!(NestedPlan::uniform(1000, 0, 5).is_err());
        assert!(NestedPlan::uniform(10, 5, 3).is_err());
        let mut plan = NestedPlan::uniform(1000, 4, 15).unwrap();
        assert_eq!(plan.total_nfe(), 60);
        assert!((plan.r_nd() - 16.0 / 60.0).abs() < 1e-15);
        plan.inner_steps.push(3);
        assert!(plan.validate(&schedule()).is_err());
        let plan =
            NestedPlan::uniform(1000, 4, 15).unwrap().with_kinds(TransitionKind::DpmSolverPp2s, TransitionKind::Ddpm);
        assert!(plan.validate(&schedule()).is_err());
    }

    #[test]
    fn session_reaches_sixty_nfe_in_three_advances() {
        let mut s = session(NestedPlan::uniform(1000, 3, 20).unwrap(), 1, 0);
        assert_eq!(s.nfe_count(), 0);
        assert_eq!(s.phase(), Phase::AwaitingInner);
        for _ in 0..2 {
            s.advance(None).unwrap();
            assert_eq!(s.phase(), Phase::AtOuterBoundary);
        }
        s.advance(None).unwrap();
        assert_eq!(s.phase(), Phase::Finished);
        assert_eq!(s.nfe_count(), 60);
        assert!(matches!(s.advance(None), Err(Error::State(_))));
    }

    #[test]
    fn first_advance_counts_all_branches() {
        let mut s = session(NestedPlan::uniform(1000, 3, 20).unwrap(), 4, 1);
        let events = s.advance(None).unwrap();
        assert_eq!(s.nfe_count(), 80);
        assert_eq!(events.iter().filter(|e| e.boundary).count(), 4);
        assert_eq!(events.len(), 4 * 20);
        assert!(events.windows(2).all(|w| (w[0].nfe, w[0].branch) < (w[1].nfe, w[1].branch)));
    }

    #[test]
    fn branches_start_distinct_and_reproducible() {
        let a = session(NestedPlan::uniform(1000, 3, 20).unwrap(), 4, 7);
        let b = session(NestedPlan::uniform(1000, 3, 20).unwrap(), 4, 7);
        for i in 0..4 {
            assert_eq!(a.branch_state(i).unwrap(), b.branch_state(i).unwrap());
            for j in 0..i {
                assert_ne!(a.branch_state(i).unwrap(), a.branch_state(j).unwrap());
            }
        }
    }

    #[test]
    fn one_branch_session_matches_nested_sample() {
        let plan = NestedPlan::uniform(1000, 3, 20).unwrap();
        let mut s = session(plan.clone(), 1, 5);
        while s.phase() != Phase::Finished {
            s.advance(Some(3)).unwrap();
        }
        let den = GmmDenoiser::new(two_class());
        let trace = nested_sample(&den, &schedule(), &plan, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(s.anytime_result(0).unwrap(), trace.final_sample);
        let logged: Vec<_> = s.event_log().iter().map(|e| (e.nfe, e.boundary, e.x0_hat.clone())).collect();
        let traced: Vec<_> = trace
            .entries
            .iter()
            .map(|e| (e.nfe, e.kind == EntryKind::Boundary, e.x0_hat.iter().copied().collect::<Vec<_>>()))
            .collect();
        assert_eq!(logged, traced);
    }

    #[test]
    fn stride_one_emits_one_event_per_call() {
        let mut s = session(NestedPlan::uniform(1000, 2, 5).unwrap(), 1, 0);
        assert_eq!(s.anytime_result(0), Err(Error::NoPrediction));
        let first = s.advance(Some(1)).unwrap();
        assert_eq!(first.len(), 1);
        assert_eq!(s.phase(), Phase::AwaitingInner);
        assert_eq!(s.anytime_result(0).unwrap().as_slice(), first[0].x0_hat.as_slice());
        assert!(s.select(0).is_err());
        for _ in 0..4 {
            assert_eq!(s.advance(Some(1)).unwrap().len(), 1);
        }
        assert_eq!(s.phase(), Phase::AtOuterBoundary);
        assert_eq!(s.nfe_count(), 5);
        let boundary = s.anytime_result(0).unwrap();
        s.advance(Some(1)).unwrap();
        assert_eq!(s.anytime_result(0).unwrap(), boundary);
    }

    #[test]
    fn select_copies_state_then_branches_diverge() {
        let mut s = session(NestedPlan::uniform(1000, 3, 10).unwrap(), 4, 2);
        s.advance(None).unwrap();
        s.select(2).unwrap();
        let chosen = s.branch_state(2).unwrap().clone();
        for b in 0..4 {
            assert_eq!(s.branch_state(b).unwrap(), &chosen);
        }
        assert!(s.select(9).is_err());
        s.advance(None).unwrap();
        for i in 0..4 {
            for j in 0..i {
                assert_ne!(s.branch_state(i).unwrap(), s.branch_state(j).unwrap());
            }
        }
    }

    #[test]
    fn select_on_single_branch_is_identity() {
        let mut s = session(NestedPlan::uniform(1000, 3, 10).unwrap(), 1, 2);
        s.advance(None).unwrap();
        let before = s.status();
        s.select(0).unwrap();
        assert_eq!(s.status(), before);
    }

    #[test]
    fn editing_to_same_condition_changes_nothing() {
        let plan = NestedPlan::uniform(1000, 3, 10).unwrap().with_condition(Condition::Class { label: 0 });
        let mut a = session(plan.clone(), 2, 3);
        let mut b = session(plan, 2, 3);
        a.advance(None).unwrap();
        b.advance(None).unwrap();
        b.edit_condition(Condition::Class { label: 0 }).unwrap();
        while a.phase() != Phase::Finished {
            a.advance(None).unwrap();
            b.advance(None).unwrap();
        }
        assert_eq!(a.event_log(), b.event_log());
    }

    #[test]
    fn edit_condition_phase_rules() {
        let mut s = session(NestedPlan::uniform(1000, 2, 10).unwrap(), 1, 3);
        assert!(matches!(s.edit_condition(Condition::Class { label: 1 }), Err(Error::State(_))));
        s.advance(None).unwrap();
        assert!(matches!(s.edit_condition(Condition::Class { label: 7 }), Err(Error::Param(_))));
        s.edit_condition(Condition::Class { label: 1 }).unwrap();
        assert_eq!(s.plan().condition_schedule, vec![Condition::Unconditional, Condition::Class { label: 1 }]);
        s.advance(None).unwrap();
        assert!(matches!(s.edit_condition(Condition::Class { label: 1 }), Err(Error::State(_))));
    }

    #[test]
    fn anytime_result_holds_between_boundaries() {
        let mut s = session(NestedPlan::uniform(1000, 3, 10).unwrap(), 2, 4);
        s.advance(None).unwrap();
        let first = s.anytime_result(1).unwrap();
        s.advance(Some(4)).unwrap();
        assert_eq!(s.anytime_result(1).unwrap(), first);
        s.advance(None).unwrap();
        assert_ne!(s.anytime_result(1).unwrap(), first);
    }
}
