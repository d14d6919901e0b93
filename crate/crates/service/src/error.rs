use promptloop_core::analytics::AnalyticsError;
use promptloop_core::batch::BatchError;
use promptloop_core::dataset::DatasetError;
use promptloop_core::evaluation::EvalError;
use promptloop_core::prompt::PromptError;
use promptloop_core::provider::{ProviderError, RegistryError};
use promptloop_core::sync::SyncError;
use thiserror::Error;

use crate::events::StorageError;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{0} not found")]
    NotFound(String),
    #[error("{0}")]
    Validation(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("unknown token")]
    UnknownToken,
    #[error("forbidden: {0}")]
    Forbidden(String),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Sync(#[from] SyncError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

/// Coarse error classes shared by HTTP status mapping and CLI exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    NotFound,
    Conflict,
    Auth,
    Forbidden,
    Provider,
    Storage,
}

impl ServiceError {
    pub fn class(&self) -> ErrorClass {
        use ErrorClass::*;
        match self {
            ServiceError::NotFound(_) => NotFound,
            ServiceError::Validation(_) => Validation,
            ServiceError::Conflict(_) => Conflict,
            ServiceError::UnknownToken => Auth,
            ServiceError::Forbidden(_) => Forbidden,
            ServiceError::Storage(_) => Storage,
            ServiceError::Provider(_) => Provider,
            ServiceError::Sync(SyncError::StaleBase { .. } | SyncError::RevisionUnavailable { .. }) => Conflict,
            ServiceError::Batch(BatchError::Storage(_)) => Storage,
            ServiceError::Batch(BatchError::JobNotFound(_)) => NotFound,
            ServiceError::Batch(BatchError::InvalidState(_) | BatchError::DuplicateOutput(_)) => Conflict,
            ServiceError::Eval(EvalError::ScenarioClosed | EvalError::InvalidState(_)) => Conflict,
            ServiceError::Eval(EvalError::NotAssigned { .. }) => Forbidden,
            ServiceError::Prompt(PromptError::UnknownBlock(_)) => NotFound,
            ServiceError::Prompt(PromptError::Sync(SyncError::StaleBase { .. })) => Conflict,
            _ => Validation,
        }
    }

    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::NotFound(_) => "not_found",
            ServiceError::Validation(_) => "validation",
            ServiceError::Conflict(_) => "conflict",
            ServiceError::UnknownToken => "unknown_token",
            ServiceError::Forbidden(_) => "forbidden",
            ServiceError::Storage(_) | ServiceError::Batch(BatchError::Storage(_)) => "storage_failure",
            ServiceError::Prompt(PromptError::MissingBinding(_)) => "missing_binding",
            ServiceError::Prompt(PromptError::RevisionOutOfRange { .. }) => "revision_out_of_range",
            ServiceError::Prompt(PromptError::Sync(e)) | ServiceError::Sync(e) => match e {
                SyncError::StaleBase { .. } => "stale_base",
                SyncError::RevisionUnavailable { .. } => "revision_unavailable",
                SyncError::InvalidOffset(_) => "invalid_offset",
                _ => "invalid_op",
            },
            ServiceError::Prompt(_) => "invalid_prompt",
            ServiceError::Dataset(_) => "invalid_dataset",
            ServiceError::Batch(BatchError::MissingBinding { .. }) => "missing_binding",
            ServiceError::Batch(BatchError::EmptyDimension(_)) => "empty_dimension",
            ServiceError::Batch(BatchError::UnknownModel(_)) => "unknown_model",
            ServiceError::Batch(_) => "batch",
            ServiceError::Eval(EvalError::NotAssigned { .. }) => "not_assigned",
            ServiceError::Eval(EvalError::ScenarioClosed) => "scenario_closed",
            ServiceError::Eval(EvalError::ValidationFailed(_)) => "validation_failed",
            ServiceError::Eval(EvalError::KTooLarge { .. }) => "k_too_large",
            ServiceError::Eval(_) => "evaluation",
            ServiceError::Analytics(AnalyticsError::InsufficientData) => "insufficient_data",
            ServiceError::Analytics(AnalyticsError::NoProvenance) => "no_provenance",
            ServiceError::Analytics(AnalyticsError::WrongKind { .. }) => "wrong_kind",
            ServiceError::Analytics(AnalyticsError::UnknownDimension(_)) => "unknown_dimension",
            ServiceError::Analytics(_) => "analytics",
            ServiceError::Provider(ProviderError::Unavailable(_)) => "provider_unavailable",
            ServiceError::Provider(ProviderError::ContextOverflow { .. }) => "context_overflow",
            ServiceError::Provider(ProviderError::UnknownModel(_)) => "unknown_model",
            ServiceError::Provider(_) => "provider_error",
            ServiceError::Registry(_) => "registry",
        }
    }
}
