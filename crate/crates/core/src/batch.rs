//! Batch generation over prompts × models × data items.
//!
//! Planning enumerates every task item-major (then prompt, then model) and
//! prices it with the gateway's estimator. Execution admits tasks strictly in
//! that order: before each dispatch the job checks
//! `spent + in-flight estimates + next estimate <= budget_cap` and pauses
//! instead of dispatching when the check fails. When actual cost equals the
//! estimate, spend therefore never exceeds the cap.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{validate_variables, DataItem, Dataset};
use crate::evaluation::{NewEvalItem, ProvenanceLink};
use crate::prompt::{PromptError, PromptSnapshot, PromptVersion};
use crate::provider::{CompletionRequest, Gateway, GenerationParams, ProviderError, UsageRecord};

pub const DEFAULT_GLOBAL_PARALLELISM: usize = 8;
pub const DEFAULT_MAX_RETRIES: u32 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BatchError {
    #[error("missing bindings for prompt {doc_id}: {}", .names.join(", "))]
    MissingBinding { doc_id: String, names: Vec<String> },
    #[error("unknown model {0}")]
    UnknownModel(String),
    #[error("empty dimension: {0}")]
    EmptyDimension(&'static str),
    #[error("job {0} not found")]
    JobNotFound(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("job has no completed outputs")]
    EmptyJob,
    #[error("unknown export format {0}")]
    UnknownFormat(String),
    #[error("task {0} already has an output")]
    DuplicateOutput(usize),
    #[error("storage failure: {0}")]
    Storage(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub index: usize,
    pub item_id: String,
    pub prompt_index: usize,
    pub model_id: String,
    /// Estimated cost in micro-USD.
    pub estimate: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub plan_id: String,
    pub prompts: Vec<PromptSnapshot>,
    pub model_ids: Vec<String>,
    pub dataset_id: String,
    pub params: GenerationParams,
    pub task_count: usize,
    pub estimated_cost: u64,
    pub budget_cap: Option<u64>,
    pub tasks: Vec<TaskSpec>,
}

impl BatchPlan {
    pub fn prompt_version(&self, task: &TaskSpec) -> &PromptVersion {
        &self.prompts[task.prompt_index].version
    }
}

fn request_for(
    plan_prompts: &[PromptSnapshot],
    params: &GenerationParams,
    item: &DataItem,
    prompt_index: usize,
    model_id: &str,
) -> Result<CompletionRequest, PromptError> {
    let rendered = plan_prompts[prompt_index].render(&item.fields)?;
    Ok(CompletionRequest {
        model_id: model_id.to_string(),
        system: rendered.system,
        user: rendered.user,
        params: params.clone(),
    })
}

/// Enumerates and prices the Cartesian product. Prompt versions are the
/// snapshots passed in, frozen at this moment.
pub fn plan_matrix(
    plan_id: impl Into<String>,
    prompts: Vec<PromptSnapshot>,
    model_ids: Vec<String>,
    dataset: &Dataset,
    params: GenerationParams,
    budget_cap: Option<u64>,
    gateway: &Gateway,
) -> Result<BatchPlan, BatchError> {
    if prompts.is_empty() {
        return Err(BatchError::EmptyDimension("prompts"));
    }
    if model_ids.is_empty() {
        return Err(BatchError::EmptyDimension("models"));
    }
    if dataset.items.is_empty() {
        return Err(BatchError::EmptyDimension("data items"));
    }
    for m in &model_ids {
        if gateway.model(m).is_none() {
            return Err(BatchError::UnknownModel(m.clone()));
        }
    }
    for p in &prompts {
        let report = validate_variables(dataset, &p.variables());
        if !report.is_ok() {
            return Err(BatchError::MissingBinding {
                doc_id: p.version.doc_id.clone(),
                names: report.missing,
            });
        }
    }

    let mut tasks = Vec::with_capacity(dataset.items.len() * prompts.len() * model_ids.len());
    for item in &dataset.items {
        for prompt_index in 0..prompts.len() {
            for model_id in &model_ids {
                let req = request_for(&prompts, &params, item, prompt_index, model_id).map_err(|e| {
                    match e {
                        PromptError::MissingBinding(names) => BatchError::MissingBinding {
                            doc_id: prompts[prompt_index].version.doc_id.clone(),
                            names,
                        },
                        other => BatchError::InvalidState(other.to_string()),
                    }
                })?;
                let estimate = gateway
                    .estimate_request_cost(&req)
                    .map_err(|_| BatchError::UnknownModel(model_id.clone()))?;
                tasks.push(TaskSpec {
                    index: tasks.len(),
                    item_id: item.item_id.clone(),
                    prompt_index,
                    model_id: model_id.clone(),
                    estimate,
                });
            }
        }
    }
    Ok(BatchPlan {
        plan_id: plan_id.into(),
        task_count: tasks.len(),
        estimated_cost: tasks.iter().map(|t| t.estimate).sum(),
        prompts,
        model_ids,
        dataset_id: dataset.dataset_id.clone(),
        params,
        budget_cap,
        tasks,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputStatus {
    Done,
    Failed,
    Skipped,
}

impl OutputStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            OutputStatus::Done => "done",
            OutputStatus::Failed => "failed",
            OutputStatus::Skipped => "skipped",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationOutput {
    pub output_id: String,
    pub task_index: usize,
    pub item_id: String,
    pub prompt: PromptVersion,
    pub model_id: String,
    pub params: GenerationParams,
    pub text: Option<String>,
    pub usage: Option<UsageRecord>,
    pub status: OutputStatus,
    pub error: Option<String>,
}

impl GenerationOutput {
    pub fn cost(&self) -> u64 {
        match self.status {
            OutputStatus::Done => self.usage.map_or(0, |u| u.cost),
            _ => 0,
        }
    }
}

pub fn output_id(job_id: &str, task_index: usize) -> String {
    format!("{job_id}-t{task_index:05}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Planned,
    Running,
    PausedBudget,
    PausedUser,
    Completed,
    CompletedWithErrors,
}

impl JobState {
    pub fn is_terminal(&self) -> bool {
        matches!(self, JobState::Completed | JobState::CompletedWithErrors)
    }

    pub fn is_paused(&self) -> bool {
        matches!(self, JobState::PausedBudget | JobState::PausedUser)
    }
}

/// Outcome of the pre-dispatch check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admission {
    Dispatch,
    /// The budget check failed; the job must move to `paused_budget`.
    PauseBudget,
    /// The job is not running; stop dispatching.
    Stop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchJob {
    pub job_id: String,
    pub plan: BatchPlan,
    pub state: JobState,
    pub budget_cap: Option<u64>,
    /// Micro-USD spent on done outputs.
    pub spent: u64,
    /// Outputs in arrival order.
    pub outputs: Vec<GenerationOutput>,
    done_tasks: BTreeSet<usize>,
}

impl BatchJob {
    pub fn new(plan: BatchPlan) -> Self {
        BatchJob {
            job_id: plan.plan_id.clone(),
            budget_cap: plan.budget_cap,
            plan,
            state: JobState::Planned,
            spent: 0,
            outputs: Vec::new(),
            done_tasks: BTreeSet::new(),
        }
    }

    /// Tasks without an output, in enumeration order.
    pub fn pending_tasks(&self) -> Vec<usize> {
        (0..self.plan.task_count)
            .filter(|i| !self.done_tasks.contains(i))
            .collect()
    }

    pub fn has_output(&self, task_index: usize) -> bool {
        self.done_tasks.contains(&task_index)
    }

    pub fn admission(&self, estimate: u64, reserved: u64) -> Admission {
        match self.state {
            JobState::Running => match self.budget_cap {
                Some(cap) if self.spent + reserved + estimate > cap => Admission::PauseBudget,
                _ => Admission::Dispatch,
            },
            _ => Admission::Stop,
        }
    }

    pub fn record_output(&mut self, output: GenerationOutput) -> Result<(), BatchError> {
        if output.task_index >= self.plan.task_count {
            return Err(BatchError::InvalidState(format!(
                "task {} outside plan",
                output.task_index
            )));
        }
        if !self.done_tasks.insert(output.task_index) {
            return Err(BatchError::DuplicateOutput(output.task_index));
        }
        self.spent += output.cost();
        self.outputs.push(output);
        Ok(())
    }

    /// Terminal state implied by the outputs, if every task has one.
    pub fn completion_state(&self) -> Option<JobState> {
        if self.done_tasks.len() < self.plan.task_count {
            return None;
        }
        let clean = self.outputs.iter().all(|o| o.status == OutputStatus::Done);
        Some(if clean {
            JobState::Completed
        } else {
            JobState::CompletedWithErrors
        })
    }

    /// Outputs sorted in task enumeration order.
    pub fn ordered_outputs(&self) -> Vec<&GenerationOutput> {
        let mut v: Vec<&GenerationOutput> = self.outputs.iter().collect();
        v.sort_by_key(|o| o.task_index);
        v
    }

    pub fn count(&self, status: OutputStatus) -> usize {
        self.outputs.iter().filter(|o| o.status == status).count()
    }
}

/// Where the runner reports to. Implementations serialize calls per job.
pub trait JobSink: Send + Sync {
    /// Pre-dispatch check for `task`. On [`Admission::Dispatch`] the sink
    /// reserves the task's estimate until [`JobSink::record`] is called.
    fn admit(&self, task: &TaskSpec) -> Result<Admission, BatchError>;
    fn record(&self, task: &TaskSpec, output: GenerationOutput) -> Result<(), BatchError>;
    /// Called once after the last worker exits.
    fn settle(&self) -> Result<JobState, BatchError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub parallelism: usize,
    pub max_retries: u32,
    pub backoff: Duration,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            parallelism: DEFAULT_GLOBAL_PARALLELISM,
            max_retries: DEFAULT_MAX_RETRIES,
            backoff: Duration::from_millis(100),
        }
    }
}

fn generate(
    job_id: &str,
    plan: &BatchPlan,
    item: &DataItem,
    task: &TaskSpec,
    gateway: &Gateway,
    opts: &RunOptions,
) -> GenerationOutput {
    let mut out = GenerationOutput {
        output_id: output_id(job_id, task.index),
        task_index: task.index,
        item_id: task.item_id.clone(),
        prompt: plan.prompt_version(task).clone(),
        model_id: task.model_id.clone(),
        params: plan.params.clone(),
        text: None,
        usage: None,
        status: OutputStatus::Failed,
        error: None,
    };
    let req = match request_for(&plan.prompts, &plan.params, item, task.prompt_index, &task.model_id) {
        Ok(r) => r,
        Err(e) => {
            out.status = OutputStatus::Skipped;
            out.error = Some(e.to_string());
            return out;
        }
    };
    if req.user.is_empty() {
        out.status = OutputStatus::Skipped;
        out.error = Some("rendered user prompt is empty".into());
        return out;
    }
    let mut attempt = 0;
    loop {
        match gateway.complete(&req) {
            Ok(c) => {
                out.text = Some(c.text);
                out.usage = Some(c.usage);
                out.status = OutputStatus::Done;
                return out;
            }
            Err(e) if e.is_retryable() && attempt < opts.max_retries => {
                attempt += 1;
                std::thread::sleep(opts.backoff * 2u32.pow(attempt - 1));
            }
            Err(e) => {
                out.error = Some(match e {
                    ProviderError::Unavailable(_) => format!("{e} (after {attempt} retries)"),
                    _ => e.to_string(),
                });
                return out;
            }
        }
    }
}

/// Runs `tasks` (indices into the plan) until they finish or the sink stops
/// admitting. Dispatch follows task order; completions may interleave.
pub fn run_tasks(
    job_id: &str,
    plan: &BatchPlan,
    dataset: &Dataset,
    tasks: Vec<usize>,
    gateway: &Gateway,
    sink: &dyn JobSink,
    opts: RunOptions,
) -> Result<JobState, BatchError> {
    let items: BTreeMap<&str, &DataItem> =
        dataset.items.iter().map(|i| (i.item_id.as_str(), i)).collect();
    let queue = Mutex::new((VecDeque::from(tasks), false));
    let failure: Mutex<Option<BatchError>> = Mutex::new(None);

    let next = || -> Option<&TaskSpec> {
        let mut q = queue.lock().expect("queue poisoned");
        if q.1 {
            return None;
        }
        let idx = q.0.front().copied()?;
        let task = &plan.tasks[idx];
        match sink.admit(task) {
            Ok(Admission::Dispatch) => {
                q.0.pop_front();
                Some(task)
            }
            Ok(_) => {
                q.1 = true;
                None
            }
            Err(e) => {
                q.1 = true;
                failure.lock().expect("poisoned").get_or_insert(e);
                None
            }
        }
    };

    std::thread::scope(|s| {
        for _ in 0..opts.parallelism.max(1) {
            s.spawn(|| {
                while let Some(task) = next() {
                    let Some(item) = items.get(task.item_id.as_str()) else {
                        failure
                            .lock()
                            .expect("poisoned")
                            .get_or_insert(BatchError::InvalidState(format!(
                                "item {} missing from dataset",
                                task.item_id
                            )));
                        queue.lock().expect("poisoned").1 = true;
                        return;
                    };
                    let output = generate(job_id, plan, item, task, gateway, &opts);
                    if let Err(e) = sink.record(task, output) {
                        failure.lock().expect("poisoned").get_or_insert(e);
                        queue.lock().expect("poisoned").1 = true;
                        return;
                    }
                }
            });
        }
    });

    if let Some(e) = failure.into_inner().expect("poisoned") {
        return Err(e);
    }
    sink.settle()
}

/// In-memory job holder, for library use without persistence.
#[derive(Debug)]
pub struct MemoryJob {
    inner: Mutex<(BatchJob, u64)>,
}

impl MemoryJob {
    pub fn new(job: BatchJob) -> Self {
        MemoryJob {
            inner: Mutex::new((job, 0)),
        }
    }

    pub fn snapshot(&self) -> BatchJob {
        self.inner.lock().expect("job poisoned").0.clone()
    }

    pub fn with<R>(&self, f: impl FnOnce(&mut BatchJob) -> R) -> R {
        f(&mut self.inner.lock().expect("job poisoned").0)
    }

    /// Starts or resumes the job, optionally replacing the budget cap.
    pub fn resume(&self, new_cap: Option<Option<u64>>) -> Result<(), BatchError> {
        let mut g = self.inner.lock().expect("job poisoned");
        let job = &mut g.0;
        match job.state {
            JobState::Planned | JobState::PausedBudget | JobState::PausedUser => {
                if let Some(cap) = new_cap {
                    job.budget_cap = cap;
                }
                job.state = JobState::Running;
                Ok(())
            }
            s => Err(BatchError::InvalidState(format!("cannot resume from {s:?}"))),
        }
    }

    pub fn pause(&self) -> Result<(), BatchError> {
        let mut g = self.inner.lock().expect("job poisoned");
        match g.0.state {
            JobState::Running => {
                g.0.state = JobState::PausedUser;
                Ok(())
            }
            s => Err(BatchError::InvalidState(format!("cannot pause from {s:?}"))),
        }
    }

    pub fn run(&self, dataset: &Dataset, gateway: &Gateway, opts: RunOptions) -> Result<JobState, BatchError> {
        let (job_id, plan, pending) = {
            let g = self.inner.lock().expect("job poisoned");
            (g.0.job_id.clone(), g.0.plan.clone(), g.0.pending_tasks())
        };
        run_tasks(&job_id, &plan, dataset, pending, gateway, self, opts)
    }
}

impl JobSink for MemoryJob {
    fn admit(&self, task: &TaskSpec) -> Result<Admission, BatchError> {
        let mut g = self.inner.lock().expect("job poisoned");
        let decision = g.0.admission(task.estimate, g.1);
        match decision {
            Admission::Dispatch => g.1 += task.estimate,
            Admission::PauseBudget => g.0.state = JobState::PausedBudget,
            Admission::Stop => {}
        }
        Ok(decision)
    }

    fn record(&self, task: &TaskSpec, output: GenerationOutput) -> Result<(), BatchError> {
        let mut g = self.inner.lock().expect("job poisoned");
        g.1 -= task.estimate;
        g.0.record_output(output)
    }

    fn settle(&self) -> Result<JobState, BatchError> {
        let mut g = self.inner.lock().expect("job poisoned");
        if g.0.state == JobState::Running {
            if let Some(done) = g.0.completion_state() {
                g.0.state = done;
            }
        }
        Ok(g.0.state)
    }
}

pub const EXPORT_COLUMNS: [&str; 13] = [
    "output_id",
    "item_id",
    "doc_id",
    "prompt_version_label",
    "model_id",
    "temperature",
    "max_output_tokens",
    "seed",
    "input_tokens",
    "output_tokens",
    "cost_microusd",
    "status",
    "text",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportFormat {
    Csv,
    /// JSON array of records.
    Structured,
}

impl std::str::FromStr for ExportFormat {
    type Err = BatchError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ExportFormat::Csv),
            "structured" | "json" => Ok(ExportFormat::Structured),
            other => Err(BatchError::UnknownFormat(other.to_string())),
        }
    }
}

fn export_row(o: &GenerationOutput) -> [String; 13] {
    let opt = |v: Option<u64>| v.map(|x| x.to_string()).unwrap_or_default();
    [
        o.output_id.clone(),
        o.item_id.clone(),
        o.prompt.doc_id.clone(),
        o.prompt.version_label.clone(),
        o.model_id.clone(),
        o.params.temperature.to_string(),
        o.params.max_output_tokens.to_string(),
        opt(o.params.seed),
        opt(o.usage.map(|u| u.input_tokens)),
        opt(o.usage.map(|u| u.output_tokens)),
        o.cost().to_string(),
        o.status.as_str().to_string(),
        o.text.clone().unwrap_or_default(),
    ]
}

pub fn export_outputs(job: &BatchJob, format: ExportFormat) -> Vec<u8> {
    let rows: Vec<[String; 13]> = job.ordered_outputs().into_iter().map(export_row).collect();
    match format {
        ExportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(EXPORT_COLUMNS).expect("in-memory write");
            for r in &rows {
                w.write_record(r).expect("in-memory write");
            }
            w.into_inner().expect("in-memory flush")
        }
        ExportFormat::Structured => {
            let records: Vec<serde_json::Map<String, serde_json::Value>> = rows
                .into_iter()
                .map(|r| {
                    EXPORT_COLUMNS
                        .iter()
                        .zip(r)
                        .map(|(k, v)| (k.to_string(), serde_json::Value::String(v)))
                        .collect()
                })
                .collect();
            let mut out = serde_json::to_vec_pretty(&records).expect("serializable");
            out.push(b'\n');
            out
        }
    }
}

/// Evaluation items for a finished job: one per done output, grouped by
/// source item so comparison kinds see all variants of one input together.
pub fn scenario_items(job: &BatchJob) -> Result<Vec<NewEvalItem>, BatchError> {
    if !job.state.is_terminal() {
        return Err(BatchError::InvalidState(format!(
            "job {} is {:?}",
            job.job_id, job.state
        )));
    }
    let items: Vec<NewEvalItem> = job
        .ordered_outputs()
        .into_iter()
        .filter(|o| o.status == OutputStatus::Done)
        .map(|o| NewEvalItem {
            content: o.text.clone().unwrap_or_default(),
            group: Some(o.item_id.clone()),
            provenance: Some(ProvenanceLink {
                job_id: job.job_id.clone(),
                output_id: o.output_id.clone(),
                item_id: o.item_id.clone(),
                model_id: o.model_id.clone(),
                prompt: o.prompt.clone(),
            }),
        })
        .collect();
    if items.is_empty() {
        return Err(BatchError::EmptyJob);
    }
    Ok(items)
}
