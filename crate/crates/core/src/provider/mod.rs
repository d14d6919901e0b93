//! Provider registry, cost accounting and streaming completion.
//!
//! Money is always integer USD micro-units. Prices are quoted per 1,000
//! tokens, so every per-call cost is rounded half-up to a whole micro-unit.

mod http;
mod mock;

use std::collections::BTreeMap;
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::HttpProvider;
pub use mock::{FailureMode, MockBehavior, MockConfig, MockProvider};

pub const DEFAULT_PROVIDER_CONCURRENCY: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProviderError {
    #[error("provider unavailable: {0}")]
    Unavailable(String),
    #[error("context overflow: {input_tokens} input tokens exceed {max_context}")]
    ContextOverflow { input_tokens: u64, max_context: u64 },
    #[error("provider error: {0}")]
    Provider(String),
    #[error("unknown model {0}")]
    UnknownModel(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl ProviderError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ProviderError::Unavailable(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("duplicate model id {0}")]
    DuplicateModelId(String),
    #[error("unknown provider {0}")]
    UnknownProvider(String),
    #[error("duplicate provider id {0}")]
    DuplicateProvider(String),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub model_id: String,
    /// May be left empty inside a provider config entry.
    #[serde(default)]
    pub provider_id: String,
    #[serde(default)]
    pub display_name: String,
    /// Micro-USD per 1,000 input tokens.
    pub price_in: u64,
    /// Micro-USD per 1,000 output tokens.
    pub price_out: u64,
    pub max_context: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_output_tokens: u64,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            temperature: 0.0,
            max_output_tokens: 512,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model_id: String,
    pub system: Option<String>,
    pub user: String,
    pub params: GenerationParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageRecord {
    pub input_tokens: u64,
    pub output_tokens: u64,
    /// Micro-USD.
    pub cost: u64,
    pub latency_ms: u64,
}

impl UsageRecord {
    /// Equality ignoring wall-clock latency.
    pub fn same_accounting(&self, other: &UsageRecord) -> bool {
        self.input_tokens == other.input_tokens
            && self.output_tokens == other.output_tokens
            && self.cost == other.cost
    }
}

/// Estimated token count: `ceil(chars / 4)`.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

fn per_thousand_half_up(tokens: u64, price: u64) -> u64 {
    (tokens * price + 500) / 1000
}

pub fn estimate_cost(spec: &ModelSpec, input_tokens: u64, output_tokens: u64) -> u64 {
    per_thousand_half_up(input_tokens, spec.price_in)
        + per_thousand_half_up(output_tokens, spec.price_out)
}

/// Tokens counted for the request's input (system followed by user text).
pub fn request_input_tokens(system: Option<&str>, user: &str) -> u64 {
    match system {
        Some(s) => estimate_tokens(&format!("{s}{user}")),
        None => estimate_tokens(user),
    }
}

/// A completion backend. Implementations stream chunks through `on_chunk`
/// and return token usage once the response is complete.
pub trait Provider: Send + Sync {
    fn complete(
        &self,
        model: &ModelSpec,
        req: &CompletionRequest,
        on_chunk: &mut dyn FnMut(&str),
    ) -> Result<TokenUsage, ProviderError>;

    /// Output tokens this provider will produce for `req`, when that is
    /// known ahead of time. Used for cost previews.
    fn predict_output_tokens(&self, _model: &ModelSpec, _req: &CompletionRequest) -> Option<u64> {
        None
    }

    fn kind(&self) -> &'static str;
}

/// Counting semaphore bounding in-flight requests per provider.
#[derive(Debug)]
pub struct Limiter {
    available: Mutex<usize>,
    cv: Condvar,
}

impl Limiter {
    pub fn new(permits: usize) -> Self {
        Limiter {
            available: Mutex::new(permits.max(1)),
            cv: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> LimiterGuard<'_> {
        let mut n = self.available.lock().expect("limiter poisoned");
        while *n == 0 {
            n = self.cv.wait(n).expect("limiter poisoned");
        }
        *n -= 1;
        LimiterGuard { limiter: self }
    }
}

pub struct LimiterGuard<'a> {
    limiter: &'a Limiter,
}

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        let mut n = self.limiter.available.lock().expect("limiter poisoned");
        *n += 1;
        self.limiter.cv.notify_one();
    }
}

struct ProviderSlot {
    provider: Arc<dyn Provider>,
    limiter: Arc<Limiter>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub usage: UsageRecord,
}

/// Thread-safe model registry fronting all configured providers.
#[derive(Default)]
pub struct Gateway {
    providers: RwLock<BTreeMap<String, ProviderSlot>>,
    models: RwLock<BTreeMap<String, ModelSpec>>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("providers", &self.provider_ids())
            .field("models", &self.list_models().len())
            .finish()
    }
}

impl Gateway {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_provider(
        &self,
        provider_id: impl Into<String>,
        provider: Arc<dyn Provider>,
        max_in_flight: usize,
    ) -> Result<(), RegistryError> {
        let provider_id = provider_id.into();
        let mut providers = self.providers.write().expect("registry poisoned");
        if providers.contains_key(&provider_id) {
            return Err(RegistryError::DuplicateProvider(provider_id));
        }
        providers.insert(
            provider_id,
            ProviderSlot {
                provider,
                limiter: Arc::new(Limiter::new(max_in_flight)),
            },
        );
        Ok(())
    }

    pub fn provider_ids(&self) -> Vec<String> {
        self.providers
            .read()
            .expect("registry poisoned")
            .keys()
            .cloned()
            .collect()
    }

    pub fn register_model(&self, spec: ModelSpec) -> Result<(), RegistryError> {
        if spec.max_context == 0 {
            return Err(RegistryError::InvalidSpec("max_context must be positive".into()));
        }
        if spec.model_id.is_empty() {
            return Err(RegistryError::InvalidSpec("empty model id".into()));
        }
        if !self
            .providers
            .read()
            .expect("registry poisoned")
            .contains_key(&spec.provider_id)
        {
            return Err(RegistryError::UnknownProvider(spec.provider_id));
        }
        let mut models = self.models.write().expect("registry poisoned");
        if models.contains_key(&spec.model_id) {
            return Err(RegistryError::DuplicateModelId(spec.model_id));
        }
        models.insert(spec.model_id.clone(), spec);
        Ok(())
    }

    pub fn list_models(&self) -> Vec<ModelSpec> {
        self.models
            .read()
            .expect("registry poisoned")
            .values()
            .cloned()
            .collect()
    }

    pub fn model(&self, model_id: &str) -> Option<ModelSpec> {
        self.models.read().expect("registry poisoned").get(model_id).cloned()
    }

    fn slot(&self, provider_id: &str) -> Option<(Arc<dyn Provider>, Arc<Limiter>)> {
        self.providers
            .read()
            .expect("registry poisoned")
            .get(provider_id)
            .map(|s| (s.provider.clone(), s.limiter.clone()))
    }

    fn validate(&self, req: &CompletionRequest) -> Result<ModelSpec, ProviderError> {
        let spec = self
            .model(&req.model_id)
            .ok_or_else(|| ProviderError::UnknownModel(req.model_id.clone()))?;
        if req.user.is_empty() {
            return Err(ProviderError::InvalidRequest("empty user prompt".into()));
        }
        if req.params.temperature.is_nan() || req.params.temperature < 0.0 {
            return Err(ProviderError::InvalidRequest("temperature must be >= 0".into()));
        }
        if req.params.max_output_tokens == 0 || req.params.max_output_tokens > spec.max_context {
            return Err(ProviderError::InvalidRequest(format!(
                "max_output_tokens must be in 1..={}",
                spec.max_context
            )));
        }
        let input_tokens = request_input_tokens(req.system.as_deref(), &req.user);
        if input_tokens > spec.max_context {
            return Err(ProviderError::ContextOverflow {
                input_tokens,
                max_context: spec.max_context,
            });
        }
        Ok(spec)
    }

    /// Expected output tokens for cost previews: the provider's own
    /// prediction when it has one, otherwise the request's output cap.
    pub fn expected_output_tokens(&self, req: &CompletionRequest) -> Result<u64, ProviderError> {
        let spec = self
            .model(&req.model_id)
            .ok_or_else(|| ProviderError::UnknownModel(req.model_id.clone()))?;
        let (provider, _) = self
            .slot(&spec.provider_id)
            .ok_or_else(|| ProviderError::Provider(format!("provider {} gone", spec.provider_id)))?;
        Ok(provider
            .predict_output_tokens(&spec, req)
            .unwrap_or(req.params.max_output_tokens))
    }

    /// Cost preview for a request, using [`Gateway::expected_output_tokens`].
    pub fn estimate_request_cost(&self, req: &CompletionRequest) -> Result<u64, ProviderError> {
        let spec = self
            .model(&req.model_id)
            .ok_or_else(|| ProviderError::UnknownModel(req.model_id.clone()))?;
        let input = request_input_tokens(req.system.as_deref(), &req.user);
        let output = self.expected_output_tokens(req)?;
        Ok(estimate_cost(&spec, input, output))
    }

    /// Streams a completion. Chunks arrive in order through `on_chunk`; the
    /// usage record is returned after the last chunk.
    pub fn complete_streaming(
        &self,
        req: &CompletionRequest,
        on_chunk: &mut dyn FnMut(&str),
    ) -> Result<UsageRecord, ProviderError> {
        let spec = self.validate(req)?;
        let (provider, limiter) = self
            .slot(&spec.provider_id)
            .ok_or_else(|| ProviderError::Provider(format!("provider {} gone", spec.provider_id)))?;
        let _permit = limiter.acquire();
        let started = Instant::now();
        let tokens = provider.complete(&spec, req, on_chunk)?;
        Ok(UsageRecord {
            input_tokens: tokens.input_tokens,
            output_tokens: tokens.output_tokens,
            cost: estimate_cost(&spec, tokens.input_tokens, tokens.output_tokens),
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }

    pub fn complete(&self, req: &CompletionRequest) -> Result<Completion, ProviderError> {
        let mut text = String::new();
        let usage = self.complete_streaming(req, &mut |c| text.push_str(c))?;
        Ok(Completion { text, usage })
    }
}

/// One provider entry of the provider configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub provider_id: String,
    pub kind: ProviderKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    /// Name of the environment variable holding the API key.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_in_flight: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock: Option<MockConfig>,
    #[serde(default)]
    pub models: Vec<ModelSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Mock,
    Http,
}

impl ProviderConfig {
    pub fn build(&self) -> Result<Arc<dyn Provider>, RegistryError> {
        Ok(match self.kind {
            ProviderKind::Mock => Arc::new(MockProvider::new(self.mock.clone().unwrap_or_default())),
            ProviderKind::Http => {
                let base_url = self.base_url.clone().ok_or_else(|| {
                    RegistryError::InvalidSpec(format!("provider {} needs base_url", self.provider_id))
                })?;
                Arc::new(HttpProvider::new(base_url, self.api_key_env.clone()))
            }
        })
    }

    /// Adds the provider and its models to `gateway`.
    pub fn install(&self, gateway: &Gateway) -> Result<(), RegistryError> {
        gateway.add_provider(
            self.provider_id.clone(),
            self.build()?,
            self.max_in_flight.unwrap_or(DEFAULT_PROVIDER_CONCURRENCY),
        )?;
        for m in &self.models {
            let mut spec = m.clone();
            if spec.provider_id.is_empty() {
                spec.provider_id = self.provider_id.clone();
            }
            gateway.register_model(spec)?;
        }
        Ok(())
    }
}
