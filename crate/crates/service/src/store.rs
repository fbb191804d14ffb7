//! In-memory session registry.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use nestdiff_core::config::PlanSpec;
use nestdiff_core::denoiser::PriorSpec;
use nestdiff_core::nested::{BranchStatus, SessionEvent};
use nestdiff_core::schedule::ScheduleSpec;
use nestdiff_core::{AnytimeSession, Condition, Denoiser, GmmDenoiser, GmmPrior, NoiseSchedule, Phase, TransitionKind};
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;

use crate::error::ApiError;

pub const MAX_BRANCHES: usize = 64;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub max_sessions: usize,
    /// One `<id>.jsonl` event log per session is appended here when set.
    pub event_log_dir: Option<PathBuf>,
    /// Used when a create request carries no prior.
    pub default_prior: Option<GmmPrior>,
    pub default_schedule: ScheduleSpec,
    /// Events buffered per stream subscriber before it is dropped as lagging.
    pub stream_buffer: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            max_sessions: 64,
            event_log_dir: None,
            default_prior: None,
            default_schedule: ScheduleSpec::default(),
            stream_buffer: 4096,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    #[serde(default)]
    pub prior: Option<PriorSpec>,
    #[serde(default)]
    pub schedule: Option<ScheduleSpec>,
    pub plan: PlanSpec,
    /// Overrides `plan.branches`.
    #[serde(default)]
    pub branches: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    /// Outer timesteps, from the start down to 0.
    pub outer_grid: Vec<usize>,
    pub inner_steps: Vec<usize>,
    pub outer_kind: TransitionKind,
    pub inner_kind: TransitionKind,
    pub total_nfe: usize,
    pub r_nd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionDescriptor {
    pub id: String,
    pub created_at_ms: u64,
    pub plan: PlanSummary,
    pub n_branches: usize,
    pub nfe_count: usize,
    pub phase: Phase,
    pub outer_step: usize,
    pub n_outer: usize,
    pub t: usize,
    pub condition: Option<Condition>,
    pub branches: Vec<BranchStatus>,
}

/// A prediction as delivered on a session's event stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionEvent {
    pub session: String,
    pub branch: usize,
    pub nfe: usize,
    pub outer_step: usize,
    pub t: usize,
    pub boundary: bool,
    pub x0_hat: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultPayload {
    pub id: String,
    pub nfe_count: usize,
    pub phase: Phase,
    /// Anytime result of every branch, by branch index.
    pub results: Vec<Vec<f64>>,
}

struct Snapshot {
    descriptor: SessionDescriptor,
    results: Option<Vec<Vec<f64>>>,
}

struct Feed {
    backlog: Vec<PredictionEvent>,
    tx: broadcast::Sender<PredictionEvent>,
}

pub struct SessionSlot {
    id: String,
    created_at_ms: u64,
    plan: PlanSummary,
    session: Arc<tokio::sync::Mutex<AnytimeSession>>,
    snapshot: RwLock<Snapshot>,
    feed: Mutex<Feed>,
    log_path: Option<PathBuf>,
}

impl SessionSlot {
    fn new(id: String, session: AnytimeSession, config: &ServiceConfig) -> Self {
        let p = session.plan();
        let plan = PlanSummary {
            outer_grid: p.outer_grid.steps().to_vec(),
            inner_steps: p.inner_steps.clone(),
            outer_kind: p.outer_kind,
            inner_kind: p.inner_kind,
            total_nfe: p.total_nfe(),
            r_nd: p.r_nd(),
        };
        let created_at_ms = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0);
        let log_path = config.event_log_dir.as_ref().map(|d| d.join(format!("{id}.jsonl")));
        let (tx, _) = broadcast::channel(config.stream_buffer.max(1));
        let snapshot = snapshot_of(&id, created_at_ms, &plan, &session);
        Self {
            id,
            created_at_ms,
            plan,
            session: Arc::new(tokio::sync::Mutex::new(session)),
            snapshot: RwLock::new(snapshot),
            feed: Mutex::new(Feed { backlog: Vec::new(), tx }),
            log_path,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn descriptor(&self) -> SessionDescriptor {
        self.snapshot.read().expect("snapshot lock").descriptor.clone()
    }

    pub fn result(&self) -> Result<ResultPayload, ApiError> {
        let snap = self.snapshot.read().expect("snapshot lock");
        let results = snap.results.clone().ok_or(ApiError::from(nestdiff_core::Error::NoPrediction))?;
        Ok(ResultPayload {
            id: self.id.clone(),
            nfe_count: snap.descriptor.nfe_count,
            phase: snap.descriptor.phase,
            results,
        })
    }

    /// Everything emitted so far plus a receiver for what follows, with no
    /// gap or overlap between the two.
    pub fn subscribe(&self) -> (Vec<PredictionEvent>, broadcast::Receiver<PredictionEvent>) {
        let feed = self.feed.lock().expect("feed lock");
        (feed.backlog.clone(), feed.tx.subscribe())
    }

    /// Runs `f` on the session off the async runtime. Fails with
    /// [`ApiError::Busy`] when another mutation holds the session.
    pub async fn mutate<F>(self: &Arc<Self>, f: F) -> Result<SessionDescriptor, ApiError>
    where
        F: FnOnce(&mut AnytimeSession) -> nestdiff_core::Result<Vec<SessionEvent>> + Send + 'static,
    {
        let mut guard = self.session.clone().try_lock_owned().map_err(|_| ApiError::Busy)?;
        let slot = Arc::clone(self);
        tokio::task::spawn_blocking(move || {
            let events = f(&mut guard)?;
            slot.publish(&guard, events);
            Ok(slot.descriptor())
        })
        .await
        .map_err(|e| ApiError::Internal(format!("session task failed: {e}")))?
    }

    fn publish(&self, session: &AnytimeSession, events: Vec<SessionEvent>) {
        let events: Vec<PredictionEvent> = events
            .into_iter()
            .map(|e| PredictionEvent {
                session: self.id.clone(),
                branch: e.branch,
                nfe: e.nfe,
                outer_step: e.outer_step,
                t: e.t,
                boundary: e.boundary,
                x0_hat: e.x0_hat,
            })
            .collect();
        if let Some(path) = &self.log_path {
            if let Err(e) = append_log(path, &events) {
                tracing::warn!(session = %self.id, "event log write failed: {e}");
            }
        }
        *self.snapshot.write().expect("snapshot lock") = snapshot_of(&self.id, self.created_at_ms, &self.plan, session);
        let mut feed = self.feed.lock().expect("feed lock");
        for e in events {
            // No subscribers is fine; the backlog keeps the event.
            let _ = feed.tx.send(e.clone());
            feed.backlog.push(e);
        }
    }
}

fn snapshot_of(id: &str, created_at_ms: u64, plan: &PlanSummary, session: &AnytimeSession) -> Snapshot {
    let status = session.status();
    let results = (0..session.n_branches())
        .map(|b| session.anytime_result(b).map(|x| x.iter().copied().collect()))
        .collect::<nestdiff_core::Result<Vec<Vec<f64>>>>()
        .ok();
    Snapshot {
        descriptor: SessionDescriptor {
            id: id.to_string(),
            created_at_ms,
            plan: plan.clone(),
            n_branches: session.n_branches(),
            nfe_count: status.nfe_count,
            phase: status.phase,
            outer_step: status.outer_step,
            n_outer: status.n_outer,
            t: status.t,
            condition: status.condition,
            branches: status.branches,
        },
        results,
    }
}

fn append_log(path: &PathBuf, events: &[PredictionEvent]) -> std::io::Result<()> {
    if events.is_empty() {
        return Ok(());
    }
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut buf = Vec::new();
    for e in events {
        serde_json::to_writer(&mut buf, e)?;
        buf.push(b'\n');
    }
    file.write_all(&buf)?;
    file.flush()
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    config: ServiceConfig,
    sessions: RwLock<HashMap<String, Arc<SessionSlot>>>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Self {
        Self { inner: Arc::new(Inner { config, sessions: RwLock::new(HashMap::new()) }) }
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.inner.config
    }

    pub fn len(&self) -> usize {
        self.inner.sessions.read().expect("registry lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, id: &str) -> Result<Arc<SessionSlot>, ApiError> {
        self.inner
            .sessions
            .read()
            .expect("registry lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(id.to_string()))
    }

    pub fn remove(&self, id: &str) -> Result<(), ApiError> {
        self.inner
            .sessions
            .write()
            .expect("registry lock")
            .remove(id)
            .map(|_| ())
            .ok_or_else(|| ApiError::NotFound(id.to_string()))
    }

    pub fn create(&self, req: CreateRequest) -> Result<SessionDescriptor, ApiError> {
        let config = &self.inner.config;
        let prior = match (&req.prior, &config.default_prior) {
            (Some(spec), _) => spec.build()?,
            (None, Some(prior)) => prior.clone(),
            (None, None) => {
                return Err(ApiError::BadRequest("request has no prior and the server has no default".into()))
            }
        };
        let schedule: NoiseSchedule = req.schedule.as_ref().unwrap_or(&config.default_schedule).build()?;
        let plan = req.plan.build(schedule.len())?;
        let branches = req.branches.unwrap_or(req.plan.branches);
        if branches == 0 || branches > MAX_BRANCHES {
            return Err(ApiError::BadRequest(format!("branches must be between 1 and {MAX_BRANCHES}, got {branches}")));
        }
        let denoiser: Arc<dyn Denoiser> = Arc::new(GmmDenoiser::new(prior));
        let session = AnytimeSession::create(denoiser, schedule, plan, branches, req.seed)?;

        let mut sessions = self.inner.sessions.write().expect("registry lock");
        if sessions.len() >= config.max_sessions {
            return Err(ApiError::Capacity(config.max_sessions));
        }
        let id = uuid::Uuid::new_v4().simple().to_string();
        let slot = Arc::new(SessionSlot::new(id.clone(), session, config));
        let descriptor = slot.descriptor();
        sessions.insert(id, slot);
        Ok(descriptor)
    }
}
