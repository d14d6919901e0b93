//! Static bearer-token principals and the role matrix.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::ServiceError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Evaluator,
    Editor,
    Owner,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Principal {
    pub user_id: String,
    #[serde(default)]
    pub display_name: String,
    pub role: Role,
}

impl Principal {
    pub fn owner(user_id: impl Into<String>) -> Self {
        let user_id = user_id.into();
        Principal {
            display_name: user_id.clone(),
            user_id,
            role: Role::Owner,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action<'a> {
    ReadPrompt,
    EditPrompt,
    TestPrompt,
    ListModels,
    ImportDataset,
    PlanBatch,
    ControlBatch,
    ViewBatch,
    ExportBatch,
    ManageScenario,
    ViewQueue { evaluator_id: &'a str },
    SubmitAssessment { evaluator_id: &'a str },
    ViewAnalytics,
    ExportAssessments,
    Admin,
}

impl Action<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Action::ReadPrompt => "read_prompt",
            Action::EditPrompt => "edit_prompt",
            Action::TestPrompt => "test_prompt",
            Action::ListModels => "list_models",
            Action::ImportDataset => "import_dataset",
            Action::PlanBatch => "plan_batch",
            Action::ControlBatch => "control_batch",
            Action::ViewBatch => "view_batch",
            Action::ExportBatch => "export_batch",
            Action::ManageScenario => "manage_scenario",
            Action::ViewQueue { .. } => "view_queue",
            Action::SubmitAssessment { .. } => "submit_assessment",
            Action::ViewAnalytics => "view_analytics",
            Action::ExportAssessments => "export_assessments",
            Action::Admin => "admin",
        }
    }
}

/// Role matrix. Evaluators only reach their own blinded queue and their
/// own submissions; editors work on prompts, datasets and batches; owners
/// do everything.
pub fn permits(principal: &Principal, action: &Action) -> Result<(), String> {
    let own = |id: &str| id == principal.user_id;
    let ok = match principal.role {
        Role::Owner => true,
        Role::Editor => matches!(
            action,
            Action::ReadPrompt
                | Action::EditPrompt
                | Action::TestPrompt
                | Action::ListModels
                | Action::ImportDataset
                | Action::PlanBatch
                | Action::ControlBatch
                | Action::ViewBatch
        ),
        Role::Evaluator => match action {
            Action::ViewQueue { evaluator_id } | Action::SubmitAssessment { evaluator_id } => own(evaluator_id),
            _ => false,
        },
    };
    if ok {
        Ok(())
    } else {
        Err(format!("{:?} may not {}", principal.role, action.name()).to_lowercase())
    }
}

#[derive(Debug, Clone, Deserialize)]
struct TokenEntry {
    user_id: String,
    #[serde(default)]
    display_name: String,
    role: Role,
    #[serde(default)]
    token: Option<String>,
    /// Environment variable holding the token.
    #[serde(default)]
    token_env: Option<String>,
}

#[derive(Debug, Deserialize)]
struct TokenFile {
    #[serde(default)]
    principals: Vec<TokenEntry>,
}

#[derive(Debug, Clone, Default)]
pub struct Auth {
    tokens: BTreeMap<String, Principal>,
}

impl Auth {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, token: impl Into<String>, principal: Principal) {
        self.tokens.insert(token.into(), principal);
    }

    /// Parses the TOML token file:
    ///
    /// ```toml
    /// [[principals]]
    /// user_id = "ana"
    /// role = "owner"
    /// token_env = "ANA_TOKEN"
    /// ```
    pub fn from_toml(raw: &str) -> Result<Self, ServiceError> {
        let file: TokenFile =
            toml::from_str(raw).map_err(|e| ServiceError::Validation(format!("token file: {e}")))?;
        let mut auth = Auth::new();
        for e in file.principals {
            let token = match (e.token, e.token_env) {
                (Some(t), _) => t,
                (None, Some(var)) => std::env::var(&var).map_err(|_| {
                    ServiceError::Validation(format!("token variable {var} for {} is not set", e.user_id))
                })?,
                (None, None) => {
                    return Err(ServiceError::Validation(format!("principal {} has no token", e.user_id)))
                }
            };
            if token.is_empty() {
                return Err(ServiceError::Validation(format!("empty token for {}", e.user_id)));
            }
            let display_name = if e.display_name.is_empty() {
                e.user_id.clone()
            } else {
                e.display_name
            };
            auth.add(
                token,
                Principal {
                    user_id: e.user_id,
                    display_name,
                    role: e.role,
                },
            );
        }
        Ok(auth)
    }

    pub fn from_file(path: &Path) -> Result<Self, ServiceError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::Validation(format!("token file {}: {e}", path.display())))?;
        Self::from_toml(&raw)
    }

    pub fn principal(&self, token: &str) -> Result<&Principal, ServiceError> {
        self.tokens.get(token).ok_or(ServiceError::UnknownToken)
    }

    /// Resolves the token and checks the action. Denials are logged.
    pub fn authorize(&self, token: &str, action: &Action) -> Result<Principal, ServiceError> {
        let principal = self.principal(token).inspect_err(|_| {
            tracing::warn!(action = action.name(), "unknown token");
        })?;
        permits(principal, action).map_err(|reason| {
            tracing::warn!(user = %principal.user_id, action = action.name(), %reason, "denied");
            ServiceError::Forbidden(reason)
        })?;
        Ok(principal.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_file_parses_literal_and_env_tokens() {
        std::env::set_var("PROMPTLOOP_TEST_TOKEN_EV", "ev-secret");
        let auth = Auth::from_toml(
            r#"
            [[principals]]
            user_id = "ana"
            role = "owner"
            token = "owner-secret"

            [[principals]]
            user_id = "rater-1"
            role = "evaluator"
            token_env = "PROMPTLOOP_TEST_TOKEN_EV"
            "#,
        )
        .unwrap();
        assert_eq!(auth.principal("owner-secret").unwrap().role, Role::Owner);
        assert_eq!(auth.principal("ev-secret").unwrap().user_id, "rater-1");
        assert!(matches!(auth.principal("nope"), Err(ServiceError::UnknownToken)));
    }

    #[test]
    fn missing_token_is_rejected() {
        let err = Auth::from_toml("[[principals]]\nuser_id = \"x\"\nrole = \"editor\"\n").unwrap_err();
        assert!(matches!(err, ServiceError::Validation(_)));
    }
}
