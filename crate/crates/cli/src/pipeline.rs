//! Headless end-to-end run: import, plan, generate, evaluate, report.
//!
//! The pipeline file is a regular service config with an extra
//! `[pipeline]` table:
//!
//! ```toml
//! [[providers]]
//! provider_id = "mock"
//! kind = "mock"
//! models = [{ model_id = "model-a", price_in = 150, price_out = 600, max_context = 16384 }]
//!
//! [pipeline]
//! prompts = ["prompts/polite.json"]
//! dataset = "threads.csv"
//! models = ["model-a"]
//! eval_type = "buckets"
//!
//! [[pipeline.evaluators]]
//! kind = "scripted"
//! evaluator_id = "rater-1"
//! seed = 1
//! noise = 0.1
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;

use promptloop_core::analytics::Metric;
use promptloop_core::dataset::TableFormat;
use promptloop_core::evaluation::{Coverage, EvaluationType, Evaluator, EvaluatorKind, ScriptedAssessor};
use promptloop_core::provider::GenerationParams;
use promptloop_service::config::Config;
use promptloop_service::events::MemoryLog;
use promptloop_service::service::{system_clock, Clock, PlanRequest};
use promptloop_service::{Service, ServiceError, ServiceOptions};
use serde::{Deserialize, Serialize};

use crate::{check_job, Failure};

pub const ACTOR: &str = "cli";

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EvaluatorSpec {
    /// Deterministic stand-in for a human rater. Submits as a human.
    Scripted {
        evaluator_id: String,
        seed: u64,
        #[serde(default)]
        noise: f64,
    },
    Llm {
        evaluator_id: String,
        model_id: String,
        /// Rubric text; the built-in rubric is used when absent.
        #[serde(default)]
        rubric: Option<String>,
    },
}

impl EvaluatorSpec {
    pub fn evaluator(&self) -> Evaluator {
        match self {
            EvaluatorSpec::Scripted { evaluator_id, .. } => Evaluator::human(evaluator_id.clone()),
            EvaluatorSpec::Llm {
                evaluator_id, model_id, ..
            } => Evaluator {
                evaluator_id: evaluator_id.clone(),
                kind: EvaluatorKind::Llm,
                model_id: Some(model_id.clone()),
            },
        }
    }
}

fn eval_type<'de, D: serde::Deserializer<'de>>(d: D) -> Result<EvaluationType, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Preset(String),
        Explicit(EvaluationType),
    }
    match Raw::deserialize(d)? {
        Raw::Preset(name) => crate::parse_eval_type(&name).map_err(serde::de::Error::custom),
        Raw::Explicit(t) => Ok(t),
    }
}

fn csv_format() -> TableFormat {
    TableFormat::Csv
}

fn all() -> Coverage {
    Coverage::All
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSpec {
    /// Prompt files in the export format.
    pub prompts: Vec<PathBuf>,
    pub dataset: PathBuf,
    /// Defaults to the dataset file stem.
    #[serde(default)]
    pub dataset_name: Option<String>,
    #[serde(default = "csv_format")]
    pub dataset_format: TableFormat,
    pub models: Vec<String>,
    #[serde(default)]
    pub params: GenerationParams,
    #[serde(default)]
    pub budget_cap: Option<u64>,
    /// Preset name or a full evaluation type table.
    #[serde(deserialize_with = "eval_type")]
    pub eval_type: EvaluationType,
    #[serde(default = "all")]
    pub coverage: Coverage,
    #[serde(default)]
    pub evaluators: Vec<EvaluatorSpec>,
    #[serde(default)]
    pub facet: Option<String>,
    #[serde(default)]
    pub metric: Option<Metric>,
}

#[derive(Deserialize)]
struct PipelineFile {
    pipeline: PipelineSpec,
}

impl PipelineSpec {
    /// Reads the `[pipeline]` table and resolves its paths against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        let file: PipelineFile =
            toml::from_str(&raw).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        let mut spec = file.pipeline;
        let base = path.parent().unwrap_or(Path::new("."));
        spec.dataset = base.join(&spec.dataset);
        spec.prompts = spec.prompts.iter().map(|p| base.join(p)).collect();
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestCombination {
    pub model_id: String,
    pub doc_id: String,
    pub prompt_version_label: String,
    pub top_bucket_hits: u64,
    pub total: u64,
    pub hit_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub task_count: usize,
    pub outputs_done: usize,
    /// µUSD.
    pub total_cost: u64,
    pub assessments: usize,
    pub alpha_combined: Option<f64>,
    /// Only for bucket ranking scenarios.
    pub best_combination: Option<BestCombination>,
}

pub struct PipelineRun {
    pub service: Service,
    pub job_id: String,
    pub scenario_id: String,
    pub summary: Summary,
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

/// Opens the service behind `config`. Without `persist` the event log
/// lives in memory and nothing touches the data directory.
pub fn open_service(config: &Config, persist: bool, clock: Option<Clock>) -> Result<Service, Failure> {
    if persist {
        return Ok(Service::open_with_config(config, clock)?);
    }
    let opts = ServiceOptions {
        snapshot_every: 0,
        run: config.batch.run_options(),
        resume_running_jobs: config.resume_running_jobs,
        clock: clock.unwrap_or_else(system_clock),
    };
    Ok(Service::open(Box::new(MemoryLog::new()), Arc::new(config.gateway()?), opts)?)
}

pub fn run(svc: Service, spec: &PipelineSpec) -> Result<PipelineRun, Failure> {
    let mut prompt_ids = Vec::new();
    for path in &spec.prompts {
        prompt_ids.push(svc.import_prompt(ACTOR, &read(path)?)?.doc_id);
    }
    let name = match &spec.dataset_name {
        Some(n) => n.clone(),
        None => spec
            .dataset
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into()),
    };
    let dataset = svc.import_dataset(ACTOR, &read(&spec.dataset)?, &name, spec.dataset_format)?;
    tracing::info!(dataset = %dataset.dataset_id, items = dataset.items.len(), "dataset imported");

    let plan = svc.plan_batch(
        ACTOR,
        PlanRequest {
            prompt_ids,
            model_ids: spec.models.clone(),
            dataset_id: dataset.dataset_id,
            params: spec.params.clone(),
            budget_cap: spec.budget_cap,
        },
    )?;
    let job_id = plan.plan_id.clone();
    tracing::info!(%job_id, tasks = plan.tasks.len(), estimated = plan.estimated_cost, "planned");
    svc.start_batch(ACTOR, &job_id)?;
    let job = check_job(svc.wait_batch(&job_id)?)?;
    tracing::info!(%job_id, done = job.done, spent = job.spent, "batch finished");

    let scenario_id = svc.scenario_from_batch(ACTOR, &job_id, spec.eval_type.clone())?.scenario_id;
    let evaluators = spec.evaluators.iter().map(EvaluatorSpec::evaluator).collect();
    svc.assign(ACTOR, &scenario_id, evaluators, spec.coverage)?;

    for e in &spec.evaluators {
        match e {
            EvaluatorSpec::Scripted {
                evaluator_id,
                seed,
                noise,
            } => {
                let assessor = ScriptedAssessor {
                    seed: *seed,
                    noise: *noise,
                };
                for p in svc.queue(&scenario_id, evaluator_id)? {
                    svc.submit_assessment(evaluator_id, &scenario_id, evaluator_id, &p.eval_item_id, assessor.assess(&p))?;
                }
            }
            EvaluatorSpec::Llm {
                evaluator_id, rubric, ..
            } => {
                let report =
                    svc.run_llm_evaluator(ACTOR, &scenario_id, evaluator_id, rubric.as_deref(), spec.params.clone())?;
                for s in &report.skipped {
                    tracing::warn!(evaluator = %evaluator_id, target = %s.target_id, reason = %s.reason, "skipped");
                }
            }
        }
    }

    let summary = summarize(&svc, &job_id, &scenario_id, spec)?;
    Ok(PipelineRun {
        service: svc,
        job_id,
        scenario_id,
        summary,
    })
}

fn summarize(svc: &Service, job_id: &str, scenario_id: &str, spec: &PipelineSpec) -> Result<Summary, ServiceError> {
    let job = svc.job(job_id)?;
    let scenario = svc.scenario(scenario_id)?;
    let alpha_combined = match svc.agreement(scenario_id, spec.facet.as_deref(), spec.metric) {
        Ok(r) => r.combined.alpha(),
        Err(e) => {
            tracing::warn!(error = %e, "agreement unavailable");
            None
        }
    };
    let best_combination = match spec.eval_type {
        EvaluationType::BucketRanking { .. } => svc.provenance(scenario_id)?.best().map(|b| BestCombination {
            model_id: b.combination.model_id.clone(),
            doc_id: b.combination.prompt.doc_id.clone(),
            prompt_version_label: b.combination.prompt.version_label.clone(),
            top_bucket_hits: b.top_bucket_hits,
            total: b.total,
            hit_rate: b.hit_rate.as_f64(),
        }),
        _ => None,
    };
    Ok(Summary {
        task_count: job.task_count,
        outputs_done: job.done,
        total_cost: job.spent,
        assessments: scenario.assessments,
        alpha_combined,
        best_combination,
    })
}
