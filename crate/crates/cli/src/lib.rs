//! Library half of the `promptloop` command: exit codes and the scripted
//! end-to-end pipeline.

pub mod pipeline;

use promptloop_core::batch::JobState;
use promptloop_core::evaluation::EvaluationType;
use promptloop_service::service::JobSummary;
use promptloop_service::{ErrorClass, ServiceError};

pub const EXIT_OK: u8 = 0;
pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_PROVIDER: u8 = 3;
pub const EXIT_BUDGET_PAUSED: u8 = 4;
pub const EXIT_STORAGE: u8 = 5;

#[derive(Debug)]
pub enum Failure {
    Service(ServiceError),
    /// The batch stopped at its budget cap.
    BudgetPaused(JobSummary),
    /// The batch finished with failed tasks.
    TasksFailed(JobSummary),
    Usage(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Service(e) => match e.class() {
                ErrorClass::Provider => EXIT_PROVIDER,
                ErrorClass::Storage => EXIT_STORAGE,
                _ => EXIT_VALIDATION,
            },
            Failure::BudgetPaused(_) => EXIT_BUDGET_PAUSED,
            Failure::TasksFailed(_) => EXIT_PROVIDER,
            Failure::Usage(_) => EXIT_VALIDATION,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Service(e) => write!(f, "{}: {e}", e.code()),
            Failure::BudgetPaused(j) => write!(
                f,
                "budget_exceeded: {} paused after spending {} of {:?} µUSD ({} of {} tasks done)",
                j.job_id, j.spent, j.budget_cap, j.done, j.task_count
            ),
            Failure::TasksFailed(j) => write!(f, "provider: {} finished with {} failed tasks", j.job_id, j.failed),
            Failure::Usage(m) => write!(f, "usage: {m}"),
        }
    }
}

impl From<ServiceError> for Failure {
    fn from(e: ServiceError) -> Self {
        Failure::Service(e)
    }
}

/// Maps the end state of a finished or stopped job to a failure, if any.
pub fn check_job(job: JobSummary) -> Result<JobSummary, Failure> {
    match job.state {
        JobState::PausedBudget => Err(Failure::BudgetPaused(job)),
        JobState::CompletedWithErrors => Err(Failure::TasksFailed(job)),
        _ => Ok(job),
    }
}

/// Accepts a preset name (`buckets`, `mail_rating`, `ranking`,
/// `authenticity`, `pairwise`) or a JSON evaluation type.
pub fn parse_eval_type(raw: &str) -> Result<EvaluationType, Failure> {
    match raw.trim() {
        "buckets" | "bucket_ranking" => Ok(EvaluationType::default_buckets()),
        "mail_rating" => Ok(EvaluationType::mail_rating()),
        "ranking" => Ok(EvaluationType::Ranking),
        "authenticity" => Ok(EvaluationType::Authenticity),
        "pairwise" => Ok(EvaluationType::Pairwise { allow_tie: true }),
        json => serde_json::from_str(json).map_err(|e| Failure::Usage(format!("eval type: {e}"))),
    }
}
