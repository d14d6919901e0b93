//! The service core: every mutation is validated against current state,
//! appended to the event log, and only then applied.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard};
use std::thread::JoinHandle;

use promptloop_core::analytics::{
    agreement_report, comparison_summary, provenance_report, AgreementReport, ComparisonStats, Metric,
    ProvenanceReport,
};
use promptloop_core::batch::{
    export_outputs, plan_matrix, run_tasks, scenario_items, Admission, BatchError, BatchJob, BatchPlan,
    ExportFormat, GenerationOutput, JobSink, JobState, OutputStatus, RunOptions, TaskSpec,
};
use promptloop_core::dataset::{import_table, Dataset, TableFormat};
use promptloop_core::evaluation::{
    self, compute_assignments, export_assessments_csv, export_assessments_structured, Assessment, Coverage,
    EvalError, EvaluationType, Evaluator, EvaluatorKind, LlmRunReport, NewEvalItem, Payload, Presentation,
    Scenario, ScenarioSource, ScenarioState, DEFAULT_RUBRIC,
};
use promptloop_core::prompt::{PromptDocument, PromptFile, Role, SERVER_SESSION};
use promptloop_core::provider::{CompletionRequest, Gateway, GenerationParams, ModelSpec, UsageRecord};
use promptloop_core::sync::{Committed, EditOp, OpKind};
use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, watch};

use crate::config::Config;
use crate::error::ServiceError;
use crate::events::{Event, EventBody, EventLog, FileLog, StorageError, StoredSnapshot};
use crate::state::State;

pub type Clock = Arc<dyn Fn() -> String + Send + Sync>;

pub fn system_clock() -> Clock {
    Arc::new(|| chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true))
}

pub const SYSTEM_ACTOR: &str = "system";
const HUB_CAPACITY: usize = 1024;

#[derive(Clone)]
pub struct ServiceOptions {
    pub snapshot_every: u64,
    pub run: RunOptions,
    pub resume_running_jobs: bool,
    pub clock: Clock,
}

impl Default for ServiceOptions {
    fn default() -> Self {
        ServiceOptions {
            snapshot_every: 1000,
            run: RunOptions::default(),
            resume_running_jobs: true,
            clock: system_clock(),
        }
    }
}

impl std::fmt::Debug for ServiceOptions {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ServiceOptions")
            .field("snapshot_every", &self.snapshot_every)
            .field("run", &self.run)
            .field("resume_running_jobs", &self.resume_running_jobs)
            .finish()
    }
}

/// Block state as sent to sync clients.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockState {
    pub block_id: String,
    pub role: Role,
    pub rev: u64,
    pub text: String,
}

/// Messages on the per-document sync stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SyncMessage {
    /// Full document state. Sent on connect and after structural changes.
    Snapshot {
        session_id: String,
        doc_id: String,
        blocks: Vec<BlockState>,
    },
    Edit {
        block_id: String,
        op: EditOp,
    },
    Committed {
        block_id: String,
        rev: u64,
        op: EditOp,
    },
    Error {
        code: String,
        message: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        block_id: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptView {
    pub doc_id: String,
    pub title: String,
    pub version_label: String,
    pub palette: BTreeMap<String, String>,
    pub variables: Vec<String>,
    pub blocks: Vec<BlockState>,
    pub created_at: String,
    pub updated_at: String,
}

impl PromptView {
    fn of(doc: &PromptDocument) -> Self {
        PromptView {
            doc_id: doc.doc_id.clone(),
            title: doc.title.clone(),
            version_label: doc.version_label.clone(),
            palette: doc.palette.clone(),
            variables: doc.variables(),
            blocks: block_states(doc),
            created_at: doc.created_at.clone(),
            updated_at: doc.updated_at.clone(),
        }
    }
}

fn block_states(doc: &PromptDocument) -> Vec<BlockState> {
    doc.blocks
        .iter()
        .map(|b| BlockState {
            block_id: b.id().to_string(),
            role: b.role,
            rev: b.head_rev(),
            text: b.text().to_string(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewBlock {
    #[serde(default)]
    pub block_id: Option<String>,
    pub role: Role,
    #[serde(default)]
    pub text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewPrompt {
    pub title: String,
    #[serde(default)]
    pub blocks: Vec<NewBlock>,
    #[serde(default)]
    pub palette: BTreeMap<String, String>,
    #[serde(default)]
    pub version_label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PromptUpdate {
    AddBlock(NewBlock),
    SetRole { block_id: String, role: Role },
    MoveBlock { block_id: String, position: usize },
    SetSample { name: String, value: String },
    SetVersionLabel { label: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevisionDiff {
    pub block_id: String,
    pub from_rev: u64,
    pub to_rev: u64,
    pub from_text: String,
    pub to_text: String,
    pub insertions: usize,
    pub deletions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRequest {
    pub prompt_ids: Vec<String>,
    pub model_ids: Vec<String>,
    pub dataset_id: String,
    #[serde(default)]
    pub params: GenerationParams,
    #[serde(default)]
    pub budget_cap: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobSummary {
    pub job_id: String,
    pub state: JobState,
    pub task_count: usize,
    pub done: usize,
    pub failed: usize,
    pub skipped: usize,
    pub spent: u64,
    pub estimated_cost: u64,
    pub budget_cap: Option<u64>,
}

impl JobSummary {
    fn of(job: &BatchJob) -> Self {
        JobSummary {
            job_id: job.job_id.clone(),
            state: job.state,
            task_count: job.plan.task_count,
            done: job.count(OutputStatus::Done),
            failed: job.count(OutputStatus::Failed),
            skipped: job.count(OutputStatus::Skipped),
            spent: job.spent,
            estimated_cost: job.plan.estimated_cost,
            budget_cap: job.budget_cap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub scenario_id: String,
    pub kind: String,
    pub state: ScenarioState,
    pub source: ScenarioSource,
    pub items: usize,
    pub targets: usize,
    pub evaluators: Vec<Evaluator>,
    pub coverage: Option<Coverage>,
    pub assessments: usize,
}

impl ScenarioSummary {
    fn of(s: &Scenario) -> Self {
        ScenarioSummary {
            scenario_id: s.scenario_id.clone(),
            kind: s.eval_type.kind_name().to_string(),
            state: s.state,
            source: s.source.clone(),
            items: s.items.len(),
            targets: s.targets().len(),
            evaluators: s.evaluators.clone(),
            coverage: s.coverage,
            assessments: s.assessment_count(),
        }
    }
}

struct Inner {
    state: RwLock<State>,
    log: Mutex<Box<dyn EventLog>>,
    gateway: Arc<Gateway>,
    opts: ServiceOptions,
    runners: Mutex<HashMap<String, JoinHandle<()>>>,
    hub: Mutex<HashMap<String, broadcast::Sender<SyncMessage>>>,
    offset_tx: watch::Sender<u64>,
    last_snapshot: Mutex<u64>,
    sessions: Mutex<u64>,
}

/// Cheaply cloneable handle to one service instance.
#[derive(Clone)]
pub struct Service(Arc<Inner>);

impl std::fmt::Debug for Service {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Service").field("offset", &self.offset()).finish()
    }
}

fn corrupt(detail: String) -> ServiceError {
    ServiceError::Storage(StorageError::Corrupt { line: 0, detail })
}

fn not_found(what: &str, id: &str) -> ServiceError {
    ServiceError::NotFound(format!("{what} {id}"))
}

impl Service {
    /// Rebuilds state from `log` and, if configured, restarts jobs that
    /// were running.
    pub fn open(mut log: Box<dyn EventLog>, gateway: Arc<Gateway>, opts: ServiceOptions) -> Result<Self, ServiceError> {
        let (snapshot, events) = log.load()?;
        let mut state = match &snapshot {
            Some(s) => {
                let st: State = serde_json::from_str(&s.state_json).map_err(|e| corrupt(format!("snapshot: {e}")))?;
                if st.offset != s.offset {
                    return Err(corrupt("snapshot offset mismatch".into()));
                }
                st
            }
            None => State::default(),
        };
        for e in &events {
            state.apply(e).map_err(|d| corrupt(format!("replaying offset {}: {d}", e.offset)))?;
        }
        let offset = state.offset;
        let svc = Service(Arc::new(Inner {
            state: RwLock::new(state),
            log: Mutex::new(log),
            gateway,
            opts,
            runners: Mutex::new(HashMap::new()),
            hub: Mutex::new(HashMap::new()),
            offset_tx: watch::channel(offset).0,
            last_snapshot: Mutex::new(snapshot.map_or(0, |s| s.offset)),
            sessions: Mutex::new(0),
        }));
        let running = svc.read().running_jobs();
        for job_id in running {
            if svc.0.opts.resume_running_jobs {
                tracing::info!(%job_id, "resuming job after restart");
                svc.spawn_runner(&job_id);
            } else {
                svc.mutate(SYSTEM_ACTOR, |_, _| {
                    Ok((
                        vec![EventBody::BatchStateChanged {
                            job_id: job_id.clone(),
                            state: JobState::PausedUser,
                            budget_cap: None,
                        }],
                        (),
                    ))
                })?;
            }
        }
        Ok(svc)
    }

    /// Opens the file-backed log in `config.data_dir` with the configured
    /// providers.
    pub fn open_with_config(config: &Config, clock: Option<Clock>) -> Result<Self, ServiceError> {
        let log = FileLog::open(&config.data_dir, config.fsync)?;
        let opts = ServiceOptions {
            snapshot_every: config.snapshot_every,
            run: config.batch.run_options(),
            resume_running_jobs: config.resume_running_jobs,
            clock: clock.unwrap_or_else(system_clock),
        };
        Service::open(Box::new(log), Arc::new(config.gateway()?), opts)
    }

    pub fn gateway(&self) -> &Gateway {
        &self.0.gateway
    }

    fn read(&self) -> RwLockReadGuard<'_, State> {
        self.0.state.read().expect("state poisoned")
    }

    pub fn offset(&self) -> u64 {
        self.read().offset
    }

    /// Receiver that changes whenever new events are applied.
    pub fn watch_offset(&self) -> watch::Receiver<u64> {
        self.0.offset_tx.subscribe()
    }

    pub fn state_json(&self) -> String {
        self.read().to_json()
    }

    pub fn digest(&self) -> String {
        self.read().digest()
    }

    pub fn with_state<R>(&self, f: impl FnOnce(&State) -> R) -> R {
        f(&self.read())
    }

    /// Validate, append, apply. `f` sees the current state and the event
    /// timestamp and returns the events to record. Nothing is applied
    /// unless the append succeeds.
    fn mutate<R>(
        &self,
        actor: &str,
        f: impl FnOnce(&State, &str) -> Result<(Vec<EventBody>, R), ServiceError>,
    ) -> Result<R, ServiceError> {
        let mut state = self.0.state.write().expect("state poisoned");
        let now = (self.0.opts.clock)();
        let (bodies, out) = f(&state, &now)?;
        if bodies.is_empty() {
            return Ok(out);
        }
        let events: Vec<Event> = bodies
            .into_iter()
            .enumerate()
            .map(|(i, body)| Event {
                offset: state.offset + 1 + i as u64,
                timestamp: now.clone(),
                actor: actor.to_string(),
                body,
            })
            .collect();
        self.0.log.lock().expect("log poisoned").append(&events)?;
        for e in &events {
            state
                .apply(e)
                .map_err(|d| corrupt(format!("applying offset {}: {d}", e.offset)))?;
            self.publish(&state, e);
        }
        self.maybe_snapshot(&state);
        self.0.offset_tx.send_replace(state.offset);
        Ok(out)
    }

    fn maybe_snapshot(&self, state: &State) {
        let every = self.0.opts.snapshot_every;
        if every == 0 {
            return;
        }
        let mut last = self.0.last_snapshot.lock().expect("poisoned");
        if state.offset - *last < every {
            return;
        }
        let snap = StoredSnapshot {
            offset: state.offset,
            state_json: state.to_json(),
        };
        match self.0.log.lock().expect("log poisoned").write_snapshot(&snap) {
            Ok(()) => *last = state.offset,
            Err(e) => tracing::error!(error = %e, "snapshot failed"),
        }
    }

    /// Forwards committed edits and structural changes to sync
    /// subscribers. Runs under the state write lock, so a subscriber that
    /// took its snapshot under the read lock never misses or repeats a
    /// revision.
    fn publish(&self, state: &State, event: &Event) {
        let hub = self.0.hub.lock().expect("hub poisoned");
        let send = |doc_id: &str, msg: SyncMessage| {
            if let Some(tx) = hub.get(doc_id) {
                let _ = tx.send(msg);
            }
        };
        match &event.body {
            EventBody::EditCommitted {
                doc_id,
                block_id,
                committed,
            } => {
                for c in committed {
                    send(
                        doc_id,
                        SyncMessage::Committed {
                            block_id: block_id.clone(),
                            rev: c.rev,
                            op: c.op.clone(),
                        },
                    );
                }
            }
            EventBody::BlockAdded { doc_id, .. }
            | EventBody::BlockRoleSet { doc_id, .. }
            | EventBody::BlockMoved { doc_id, .. } => {
                if let Some(doc) = state.prompts.get(doc_id) {
                    send(
                        doc_id,
                        SyncMessage::Snapshot {
                            session_id: String::new(),
                            doc_id: doc_id.clone(),
                            blocks: block_states(doc),
                        },
                    );
                }
            }
            _ => {}
        }
    }

    // -----------------------------------------------------------------
    // Prompts

    pub fn create_prompt(&self, actor: &str, req: NewPrompt) -> Result<PromptView, ServiceError> {
        let doc_id = self.mutate(actor, |state, now| {
            let doc_id = state.next_prompt_id();
            // Build the document on a scratch copy to validate every step.
            let mut scratch = PromptDocument::new(doc_id.clone(), req.title.clone(), now);
            let mut bodies = vec![EventBody::PromptCreated {
                doc_id: doc_id.clone(),
                title: req.title.clone(),
            }];
            for (i, b) in req.blocks.iter().enumerate() {
                let block_id = b.block_id.clone().unwrap_or_else(|| format!("b{}", i + 1));
                bodies.extend(add_block_events(&mut scratch, &block_id, b.role, &b.text)?);
            }
            for (name, value) in &req.palette {
                scratch.set_sample(name, value.clone())?;
                bodies.push(EventBody::SampleSet {
                    doc_id: doc_id.clone(),
                    name: name.clone(),
                    value: value.clone(),
                });
            }
            if let Some(label) = &req.version_label {
                bodies.push(EventBody::VersionLabelSet {
                    doc_id: doc_id.clone(),
                    label: label.clone(),
                });
            }
            Ok((bodies, doc_id))
        })?;
        self.prompt(&doc_id)
    }

    /// Imports an exported prompt file. The file's id is kept when free;
    /// otherwise a fresh id is assigned.
    pub fn import_prompt(&self, actor: &str, raw: &str) -> Result<PromptView, ServiceError> {
        let file = PromptFile::parse(raw)?;
        let doc_id = self.mutate(actor, |state, now| {
            let doc_id = if file.doc_id.is_empty() || state.prompts.contains_key(&file.doc_id) {
                state.next_prompt_id()
            } else {
                file.doc_id.clone()
            };
            let mut check = file.clone();
            check.doc_id = doc_id.clone();
            check.into_document(now)?;
            Ok((
                vec![EventBody::PromptImported {
                    doc_id: doc_id.clone(),
                    file: file.clone(),
                }],
                doc_id,
            ))
        })?;
        self.prompt(&doc_id)
    }

    pub fn prompt(&self, doc_id: &str) -> Result<PromptView, ServiceError> {
        let state = self.read();
        let doc = state.prompts.get(doc_id).ok_or_else(|| not_found("prompt", doc_id))?;
        Ok(PromptView::of(doc))
    }

    pub fn prompts(&self) -> Vec<PromptView> {
        self.read().prompts.values().map(PromptView::of).collect()
    }

    pub fn export_prompt(&self, doc_id: &str) -> Result<String, ServiceError> {
        let state = self.read();
        let doc = state.prompts.get(doc_id).ok_or_else(|| not_found("prompt", doc_id))?;
        Ok(doc.export())
    }

    pub fn update_prompt(&self, actor: &str, doc_id: &str, updates: Vec<PromptUpdate>) -> Result<PromptView, ServiceError> {
        self.mutate(actor, |state, _| {
            let mut scratch = state.prompts.get(doc_id).ok_or_else(|| not_found("prompt", doc_id))?.clone();
            let id = doc_id.to_string();
            let mut bodies = Vec::new();
            for u in &updates {
                match u {
                    PromptUpdate::AddBlock(b) => {
                        let block_id = b
                            .block_id
                            .clone()
                            .unwrap_or_else(|| next_block_id(&scratch));
                        bodies.extend(add_block_events(&mut scratch, &block_id, b.role, &b.text)?);
                    }
                    PromptUpdate::SetRole { block_id, role } => {
                        scratch.set_role(block_id, *role)?;
                        bodies.push(EventBody::BlockRoleSet {
                            doc_id: id.clone(),
                            block_id: block_id.clone(),
                            role: *role,
                        });
                    }
                    PromptUpdate::MoveBlock { block_id, position } => {
                        scratch.move_block(block_id, *position)?;
                        bodies.push(EventBody::BlockMoved {
                            doc_id: id.clone(),
                            block_id: block_id.clone(),
                            position: *position,
                        });
                    }
                    PromptUpdate::SetSample { name, value } => {
                        scratch.set_sample(name, value.clone())?;
                        bodies.push(EventBody::SampleSet {
                            doc_id: id.clone(),
                            name: name.clone(),
                            value: value.clone(),
                        });
                    }
                    PromptUpdate::SetVersionLabel { label } => {
                        if label.is_empty() {
                            return Err(ServiceError::Validation("empty version label".into()));
                        }
                        scratch.version_label = label.clone();
                        bodies.push(EventBody::VersionLabelSet {
                            doc_id: id.clone(),
                            label: label.clone(),
                        });
                    }
                }
            }
            Ok((bodies, ()))
        })?;
        self.prompt(doc_id)
    }

    /// Commits one client edit, rebased over concurrent revisions.
    pub fn edit(&self, actor: &str, doc_id: &str, block_id: &str, op: EditOp) -> Result<Vec<Committed>, ServiceError> {
        self.mutate(actor, |state, _| {
            let doc = state.prompts.get(doc_id).ok_or_else(|| not_found("prompt", doc_id))?;
            let mut log = doc.block(block_id)?.log.clone();
            let committed = log.commit(op)?;
            Ok((
                vec![EventBody::EditCommitted {
                    doc_id: doc_id.to_string(),
                    block_id: block_id.to_string(),
                    committed: committed.clone(),
                }],
                committed,
            ))
        })
    }

    /// Appends compensating edits so the block text equals revision
    /// `target_rev`. Returns the new head revision.
    pub fn rollback(&self, actor: &str, doc_id: &str, block_id: &str, target_rev: u64) -> Result<u64, ServiceError> {
        self.mutate(actor, |state, _| {
            let doc = state.prompts.get(doc_id).ok_or_else(|| not_found("prompt", doc_id))?;
            let block = doc.block(block_id)?;
            let mut log = block.log.clone();
            let mut committed = Vec::new();
            for op in block.rollback_ops(target_rev)? {
                committed.extend(log.commit(op)?);
            }
            let head = log.head_rev();
            let bodies = if committed.is_empty() {
                vec![]
            } else {
                vec![EventBody::EditCommitted {
                    doc_id: doc_id.to_string(),
                    block_id: block_id.to_string(),
                    committed,
                }]
            };
            Ok((bodies, head))
        })
    }

    pub fn revision_diff(&self, doc_id: &str, block_id: &str, from_rev: u64, to_rev: u64) -> Result<RevisionDiff, ServiceError> {
        let state = self.read();
        let doc = state.prompts.get(doc_id).ok_or_else(|| not_found("prompt", doc_id))?;
        let block = doc.block(block_id)?;
        let delta = block.revision_delta(from_rev, to_rev)?;
        Ok(RevisionDiff {
            block_id: block_id.to_string(),
            from_rev,
            to_rev,
            from_text: block.text_at(from_rev)?,
            to_text: block.text_at(to_rev)?,
            insertions: delta.insertions,
            deletions: delta.deletions,
        })
    }

    /// Renders the prompt with its palette (overridden by `bindings`) into
    /// a request for `model_id`.
    pub fn test_request(
        &self,
        doc_id: &str,
        model_id: &str,
        params: GenerationParams,
        bindings: BTreeMap<String, String>,
    ) -> Result<CompletionRequest, ServiceError> {
        if self.0.gateway.model(model_id).is_none() {
            return Err(ServiceError::Validation(format!("unknown model {model_id}")));
        }
        let state = self.read();
        let doc = state.prompts.get(doc_id).ok_or_else(|| not_found("prompt", doc_id))?;
        let mut all = doc.palette.clone();
        all.extend(bindings);
        let rendered = doc.render(&all)?;
        Ok(CompletionRequest {
            model_id: model_id.to_string(),
            system: rendered.system,
            user: rendered.user,
            params,
        })
    }

    /// Streams one completion of the rendered prompt through `on_chunk`.
    pub fn test_prompt(
        &self,
        doc_id: &str,
        model_id: &str,
        params: GenerationParams,
        bindings: BTreeMap<String, String>,
        on_chunk: &mut dyn FnMut(&str),
    ) -> Result<UsageRecord, ServiceError> {
        let req = self.test_request(doc_id, model_id, params, bindings)?;
        Ok(self.0.gateway.complete_streaming(&req, on_chunk)?)
    }

    /// Full document state for a sync client.
    pub fn sync_snapshot(&self, doc_id: &str, session_id: &str) -> Result<SyncMessage, ServiceError> {
        let state = self.read();
        let doc = state.prompts.get(doc_id).ok_or_else(|| not_found("prompt", doc_id))?;
        Ok(SyncMessage::Snapshot {
            session_id: session_id.to_string(),
            doc_id: doc_id.to_string(),
            blocks: block_states(doc),
        })
    }

    /// Current block states and a receiver for later changes, taken
    /// atomically. Each call gets a fresh server-assigned session id.
    pub fn subscribe(&self, doc_id: &str) -> Result<(SyncMessage, broadcast::Receiver<SyncMessage>), ServiceError> {
        let state = self.read();
        let doc = state.prompts.get(doc_id).ok_or_else(|| not_found("prompt", doc_id))?;
        let rx = self
            .0
            .hub
            .lock()
            .expect("hub poisoned")
            .entry(doc_id.to_string())
            .or_insert_with(|| broadcast::channel(HUB_CAPACITY).0)
            .subscribe();
        let session_id = {
            let mut n = self.0.sessions.lock().expect("poisoned");
            *n += 1;
            format!("s{:06}", *n)
        };
        Ok((
            SyncMessage::Snapshot {
                session_id,
                doc_id: doc_id.to_string(),
                blocks: block_states(doc),
            },
            rx,
        ))
    }

    pub fn block_state(&self, doc_id: &str, block_id: &str) -> Result<BlockState, ServiceError> {
        let state = self.read();
        let doc = state.prompts.get(doc_id).ok_or_else(|| not_found("prompt", doc_id))?;
        let b = doc.block(block_id)?;
        Ok(BlockState {
            block_id: block_id.to_string(),
            role: b.role,
            rev: b.head_rev(),
            text: b.text().to_string(),
        })
    }

    pub fn models(&self) -> Vec<ModelSpec> {
        self.0.gateway.list_models()
    }

    // -----------------------------------------------------------------
    // Datasets

    /// Imports a table. Identical input maps to the same dataset id and is
    /// recorded once.
    pub fn import_dataset(&self, actor: &str, raw: &str, name: &str, format: TableFormat) -> Result<Dataset, ServiceError> {
        let dataset = import_table(raw, name, format)?;
        self.mutate(actor, |state, _| {
            let bodies = if state.datasets.contains_key(&dataset.dataset_id) {
                vec![]
            } else {
                vec![EventBody::DatasetImported {
                    dataset: dataset.clone(),
                }]
            };
            Ok((bodies, ()))
        })?;
        Ok(dataset)
    }

    pub fn dataset(&self, dataset_id: &str) -> Result<Dataset, ServiceError> {
        self.read()
            .datasets
            .get(dataset_id)
            .cloned()
            .ok_or_else(|| not_found("dataset", dataset_id))
    }

    // -----------------------------------------------------------------
    // Batches

    /// Freezes the current prompt versions into a plan. The plan id is the
    /// job id.
    pub fn plan_batch(&self, actor: &str, req: PlanRequest) -> Result<BatchPlan, ServiceError> {
        self.mutate(actor, |state, _| {
            let dataset = state
                .datasets
                .get(&req.dataset_id)
                .ok_or_else(|| not_found("dataset", &req.dataset_id))?;
            let mut prompts = Vec::with_capacity(req.prompt_ids.len());
            for id in &req.prompt_ids {
                let doc = state.prompts.get(id).ok_or_else(|| not_found("prompt", id))?;
                prompts.push(doc.snapshot());
            }
            let plan = plan_matrix(
                state.next_job_id(),
                prompts,
                req.model_ids.clone(),
                dataset,
                req.params.clone(),
                req.budget_cap,
                &self.0.gateway,
            )?;
            Ok((vec![EventBody::BatchPlanned { plan: plan.clone() }], plan))
        })
    }

    fn transition(
        &self,
        actor: &str,
        job_id: &str,
        allowed: &[JobState],
        to: JobState,
        budget_cap: Option<Option<u64>>,
    ) -> Result<(), ServiceError> {
        self.mutate(actor, |state, _| {
            let job = state.jobs.get(job_id).ok_or_else(|| not_found("job", job_id))?;
            if !allowed.contains(&job.state) {
                return Err(ServiceError::Batch(BatchError::InvalidState(format!(
                    "job {job_id} is {:?}",
                    job.state
                ))));
            }
            Ok((
                vec![EventBody::BatchStateChanged {
                    job_id: job_id.to_string(),
                    state: to,
                    budget_cap,
                }],
                (),
            ))
        })
    }

    pub fn start_batch(&self, actor: &str, job_id: &str) -> Result<JobSummary, ServiceError> {
        self.transition(actor, job_id, &[JobState::Planned], JobState::Running, None)?;
        self.spawn_runner(job_id);
        self.job(job_id)
    }

    /// Stops dispatching. In-flight tasks still record their outputs.
    pub fn pause_batch(&self, actor: &str, job_id: &str) -> Result<JobSummary, ServiceError> {
        self.transition(actor, job_id, &[JobState::Running], JobState::PausedUser, None)?;
        self.job(job_id)
    }

    /// Resumes a paused job, optionally replacing the budget cap
    /// (`Some(None)` removes it).
    pub fn resume_batch(&self, actor: &str, job_id: &str, budget_cap: Option<Option<u64>>) -> Result<JobSummary, ServiceError> {
        self.transition(
            actor,
            job_id,
            &[JobState::PausedBudget, JobState::PausedUser],
            JobState::Running,
            budget_cap,
        )?;
        self.spawn_runner(job_id);
        self.job(job_id)
    }

    pub fn job(&self, job_id: &str) -> Result<JobSummary, ServiceError> {
        let state = self.read();
        let job = state.jobs.get(job_id).ok_or_else(|| not_found("job", job_id))?;
        Ok(JobSummary::of(job))
    }

    pub fn jobs(&self) -> Vec<JobSummary> {
        self.read().jobs.values().map(JobSummary::of).collect()
    }

    /// Outputs in arrival order starting at position `from`, plus whether
    /// the job is still able to produce more.
    pub fn outputs_since(&self, job_id: &str, from: usize) -> Result<(Vec<GenerationOutput>, bool), ServiceError> {
        let state = self.read();
        let job = state.jobs.get(job_id).ok_or_else(|| not_found("job", job_id))?;
        let live = job.state == JobState::Running
            || self
                .0
                .runners
                .lock()
                .expect("poisoned")
                .get(job_id)
                .is_some_and(|h| !h.is_finished());
        Ok((job.outputs.iter().skip(from).cloned().collect(), live))
    }

    pub fn export_batch(&self, job_id: &str, format: ExportFormat) -> Result<Vec<u8>, ServiceError> {
        let state = self.read();
        let job = state.jobs.get(job_id).ok_or_else(|| not_found("job", job_id))?;
        Ok(export_outputs(job, format))
    }

    fn spawn_runner(&self, job_id: &str) {
        let mut runners = self.0.runners.lock().expect("poisoned");
        let previous = runners.remove(job_id);
        let svc = self.clone();
        let id = job_id.to_string();
        let handle = std::thread::spawn(move || {
            if let Some(prev) = previous {
                let _ = prev.join();
            }
            if let Err(e) = svc.run_job(&id) {
                tracing::error!(job_id = %id, error = %e, "batch runner stopped");
            }
        });
        runners.insert(job_id.to_string(), handle);
    }

    fn run_job(&self, job_id: &str) -> Result<JobState, ServiceError> {
        let (plan, pending, dataset) = {
            let state = self.read();
            let job = state.jobs.get(job_id).ok_or_else(|| not_found("job", job_id))?;
            if job.state != JobState::Running {
                return Ok(job.state);
            }
            let dataset = state
                .datasets
                .get(&job.plan.dataset_id)
                .cloned()
                .ok_or_else(|| not_found("dataset", &job.plan.dataset_id))?;
            (job.plan.clone(), job.pending_tasks(), dataset)
        };
        let sink = ServiceSink {
            svc: self.clone(),
            job_id: job_id.to_string(),
            reserved: Mutex::new(0),
        };
        Ok(run_tasks(job_id, &plan, &dataset, pending, &self.0.gateway, &sink, self.0.opts.run)?)
    }

    /// Blocks until the job's current runner exits, then returns the job.
    pub fn wait_batch(&self, job_id: &str) -> Result<JobSummary, ServiceError> {
        loop {
            let handle = self.0.runners.lock().expect("poisoned").remove(job_id);
            match handle {
                Some(h) => {
                    let _ = h.join();
                }
                None => break,
            }
        }
        self.job(job_id)
    }

    /// Creates a scenario from a finished job's done outputs, carrying
    /// provenance per item.
    pub fn scenario_from_batch(&self, actor: &str, job_id: &str, eval_type: EvaluationType) -> Result<ScenarioSummary, ServiceError> {
        self.mutate(actor, |state, _| {
            let job = state.jobs.get(job_id).ok_or_else(|| not_found("job", job_id))?;
            let items = scenario_items(job)?;
            let scenario = Scenario::create(
                state.next_scenario_id(),
                actor,
                ScenarioSource::Batch {
                    job_id: job_id.to_string(),
                },
                items,
                eval_type,
            )?;
            let summary = ScenarioSummary::of(&scenario);
            Ok((vec![EventBody::ScenarioCreated { scenario }], summary))
        })
    }

    // -----------------------------------------------------------------
    // Scenarios

    pub fn create_scenario(&self, actor: &str, eval_type: EvaluationType, items: Vec<NewEvalItem>) -> Result<ScenarioSummary, ServiceError> {
        self.mutate(actor, |state, _| {
            let scenario = Scenario::create(state.next_scenario_id(), actor, ScenarioSource::Manual, items, eval_type)?;
            let summary = ScenarioSummary::of(&scenario);
            Ok((vec![EventBody::ScenarioCreated { scenario }], summary))
        })
    }

    fn scenario_ref<'a>(state: &'a State, scenario_id: &str) -> Result<&'a Scenario, ServiceError> {
        state
            .scenarios
            .get(scenario_id)
            .ok_or_else(|| not_found("scenario", scenario_id))
    }

    pub fn scenario(&self, scenario_id: &str) -> Result<ScenarioSummary, ServiceError> {
        Ok(ScenarioSummary::of(Self::scenario_ref(&self.read(), scenario_id)?))
    }

    pub fn scenarios(&self) -> Vec<ScenarioSummary> {
        self.read().scenarios.values().map(ScenarioSummary::of).collect()
    }

    /// Distributes the scenario's targets and opens it.
    pub fn assign(&self, actor: &str, scenario_id: &str, evaluators: Vec<Evaluator>, coverage: Coverage) -> Result<ScenarioSummary, ServiceError> {
        for e in &evaluators {
            if e.kind == EvaluatorKind::Llm {
                let model = e.model_id.as_deref().ok_or(EvalError::InvalidEvaluators(format!(
                    "LLM evaluator {} needs a model_id",
                    e.evaluator_id
                )))?;
                if self.0.gateway.model(model).is_none() {
                    return Err(ServiceError::Validation(format!("unknown model {model}")));
                }
            }
        }
        self.mutate(actor, |state, _| {
            let s = Self::scenario_ref(state, scenario_id)?;
            if s.state != ScenarioState::Draft {
                return Err(EvalError::InvalidState("scenario already assigned".into()).into());
            }
            compute_assignments(&s.targets(), &evaluators, coverage)?;
            Ok((
                vec![EventBody::ScenarioAssigned {
                    scenario_id: scenario_id.to_string(),
                    evaluators: evaluators.clone(),
                    coverage,
                }],
                (),
            ))
        })?;
        self.scenario(scenario_id)
    }

    /// The evaluator's blinded queue.
    pub fn queue(&self, scenario_id: &str, evaluator_id: &str) -> Result<Vec<Presentation>, ServiceError> {
        let state = self.read();
        Ok(Self::scenario_ref(&state, scenario_id)?.presentation_queue(evaluator_id)?)
    }

    /// The single write path for assessments, human or LLM.
    pub fn submit_assessment(
        &self,
        actor: &str,
        scenario_id: &str,
        evaluator_id: &str,
        target_id: &str,
        payload: Payload,
    ) -> Result<Assessment, ServiceError> {
        self.mutate(actor, |state, now| {
            let s = Self::scenario_ref(state, scenario_id)?;
            let a = s.check_submission(evaluator_id, target_id, payload, now)?;
            Ok((vec![EventBody::AssessmentSubmitted { assessment: a.clone() }], a))
        })
    }

    /// Runs an LLM evaluator over its queue. Items whose answers cannot be
    /// parsed after one retry are skipped and reported.
    pub fn run_llm_evaluator(
        &self,
        actor: &str,
        scenario_id: &str,
        evaluator_id: &str,
        rubric: Option<&str>,
        params: GenerationParams,
    ) -> Result<LlmRunReport, ServiceError> {
        let model_id = {
            let state = self.read();
            let s = Self::scenario_ref(&state, scenario_id)?;
            let e = s.evaluator(evaluator_id).ok_or_else(|| not_found("evaluator", evaluator_id))?;
            match (&e.kind, &e.model_id) {
                (EvaluatorKind::Llm, Some(m)) => m.clone(),
                _ => {
                    return Err(ServiceError::Validation(format!(
                        "{evaluator_id} is not an LLM evaluator"
                    )))
                }
            }
        };
        let queue = self.queue(scenario_id, evaluator_id)?;
        let validate = |target: &str, p: &Payload| -> Result<(), EvalError> {
            let state = self.read();
            match state.scenarios.get(scenario_id) {
                Some(s) => s.validate_payload(target, p),
                None => Err(EvalError::InvalidState("scenario gone".into())),
            }
        };
        let mut storage_error = None;
        let mut submit = |target: &str, payload: Payload| -> Result<Assessment, EvalError> {
            self.submit_assessment(actor, scenario_id, evaluator_id, target, payload)
                .map_err(|e| match e {
                    ServiceError::Eval(e) => e,
                    other => {
                        let msg = other.to_string();
                        if other.class() == crate::error::ErrorClass::Storage {
                            storage_error.get_or_insert(other);
                        }
                        EvalError::InvalidState(msg)
                    }
                })
        };
        let report = evaluation::run_llm_evaluator(
            &queue,
            &self.0.gateway,
            &model_id,
            &params,
            rubric.unwrap_or(DEFAULT_RUBRIC),
            &validate,
            &mut submit,
        );
        if let Some(e) = storage_error {
            return Err(e);
        }
        Ok(report)
    }

    pub fn close_scenario(&self, actor: &str, scenario_id: &str) -> Result<ScenarioSummary, ServiceError> {
        self.mutate(actor, |state, _| {
            Self::scenario_ref(state, scenario_id)?;
            Ok((
                vec![EventBody::ScenarioClosed {
                    scenario_id: scenario_id.to_string(),
                }],
                (),
            ))
        })?;
        self.scenario(scenario_id)
    }

    pub fn agreement(&self, scenario_id: &str, facet: Option<&str>, metric: Option<Metric>) -> Result<AgreementReport, ServiceError> {
        let state = self.read();
        Ok(agreement_report(Self::scenario_ref(&state, scenario_id)?, facet, metric)?)
    }

    pub fn provenance(&self, scenario_id: &str) -> Result<ProvenanceReport, ServiceError> {
        let state = self.read();
        Ok(provenance_report(Self::scenario_ref(&state, scenario_id)?)?)
    }

    pub fn comparison(&self, scenario_id: &str) -> Result<Vec<ComparisonStats>, ServiceError> {
        let state = self.read();
        Ok(comparison_summary(Self::scenario_ref(&state, scenario_id)?)?)
    }

    pub fn export_assessments(&self, scenario_id: &str, format: ExportFormat) -> Result<Vec<u8>, ServiceError> {
        let state = self.read();
        let s = Self::scenario_ref(&state, scenario_id)?;
        Ok(match format {
            ExportFormat::Csv => export_assessments_csv(s),
            ExportFormat::Structured => export_assessments_structured(s),
        })
    }
}

fn next_block_id(doc: &PromptDocument) -> String {
    (doc.blocks.len() + 1..)
        .map(|n| format!("b{n}"))
        .find(|id| doc.block(id).is_err())
        .expect("unbounded range")
}

/// Events for a new block with optional initial text, validated against
/// `scratch` (which is updated).
fn add_block_events(scratch: &mut PromptDocument, block_id: &str, role: Role, text: &str) -> Result<Vec<EventBody>, ServiceError> {
    scratch.add_block(block_id.to_string(), role)?;
    let doc_id = scratch.doc_id.clone();
    let mut bodies = vec![EventBody::BlockAdded {
        doc_id: doc_id.clone(),
        block_id: block_id.to_string(),
        role,
    }];
    if !text.is_empty() {
        let committed = scratch.commit_edit(block_id, EditOp::new(OpKind::insert(0, text), SERVER_SESSION, 0))?;
        bodies.push(EventBody::EditCommitted {
            doc_id,
            block_id: block_id.to_string(),
            committed,
        });
    }
    Ok(bodies)
}

/// Persists runner progress through the service's event path.
struct ServiceSink {
    svc: Service,
    job_id: String,
    /// Estimates of dispatched tasks not yet recorded.
    reserved: Mutex<u64>,
}

fn to_batch_error(e: ServiceError) -> BatchError {
    match e {
        ServiceError::Batch(b) => b,
        other => BatchError::Storage(other.to_string()),
    }
}

impl JobSink for ServiceSink {
    fn admit(&self, task: &TaskSpec) -> Result<Admission, BatchError> {
        let mut reserved = self.reserved.lock().expect("poisoned");
        let decision = self
            .svc
            .mutate(SYSTEM_ACTOR, |state, _| {
                let job = state.jobs.get(&self.job_id).ok_or_else(|| not_found("job", &self.job_id))?;
                let decision = job.admission(task.estimate, *reserved);
                let bodies = match decision {
                    Admission::PauseBudget => vec![EventBody::BatchStateChanged {
                        job_id: self.job_id.clone(),
                        state: JobState::PausedBudget,
                        budget_cap: None,
                    }],
                    _ => vec![],
                };
                Ok((bodies, decision))
            })
            .map_err(to_batch_error)?;
        if decision == Admission::Dispatch {
            *reserved += task.estimate;
        }
        Ok(decision)
    }

    fn record(&self, task: &TaskSpec, output: GenerationOutput) -> Result<(), BatchError> {
        let mut reserved = self.reserved.lock().expect("poisoned");
        *reserved -= task.estimate;
        self.svc
            .mutate(SYSTEM_ACTOR, |state, _| {
                let job = state.jobs.get(&self.job_id).ok_or_else(|| not_found("job", &self.job_id))?;
                if job.has_output(output.task_index) {
                    return Err(BatchError::DuplicateOutput(output.task_index).into());
                }
                Ok((
                    vec![EventBody::OutputRecorded {
                        job_id: self.job_id.clone(),
                        output: output.clone(),
                    }],
                    (),
                ))
            })
            .map_err(to_batch_error)
    }

    fn settle(&self) -> Result<JobState, BatchError> {
        self.svc
            .mutate(SYSTEM_ACTOR, |state, _| {
                let job = state.jobs.get(&self.job_id).ok_or_else(|| not_found("job", &self.job_id))?;
                match (job.state, job.completion_state()) {
                    (JobState::Running, Some(done)) => Ok((
                        vec![EventBody::BatchStateChanged {
                            job_id: self.job_id.clone(),
                            state: done,
                            budget_cap: None,
                        }],
                        done,
                    )),
                    (s, _) => Ok((vec![], s)),
                }
            })
            .map_err(to_batch_error)
    }
}
