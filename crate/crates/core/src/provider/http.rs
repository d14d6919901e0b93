//! Thin adapter for OpenAI-compatible `/chat/completions` endpoints.

use std::io::{BufRead, BufReader};
use std::time::Duration;

use serde_json::{json, Value};

use super::{estimate_tokens, request_input_tokens, CompletionRequest, ModelSpec, Provider, ProviderError, TokenUsage};

#[derive(Debug)]
pub struct HttpProvider {
    base_url: String,
    api_key_env: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpProvider {
    pub fn new(base_url: impl Into<String>, api_key_env: Option<String>) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .expect("http client builds");
        HttpProvider {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key_env,
            client,
        }
    }

    fn body(req: &CompletionRequest) -> Value {
        let mut messages = Vec::new();
        if let Some(system) = &req.system {
            messages.push(json!({"role": "system", "content": system}));
        }
        messages.push(json!({"role": "user", "content": req.user}));
        let mut body = json!({
            "model": req.model_id,
            "messages": messages,
            "temperature": req.params.temperature,
            "max_tokens": req.params.max_output_tokens,
            "stream": true,
            "stream_options": {"include_usage": true},
        });
        if let Some(seed) = req.params.seed {
            body["seed"] = json!(seed);
        }
        body
    }
}

/// Parses one server-sent-event data payload. Returns the content delta and
/// any usage block it carries.
fn parse_event(data: &str) -> Result<(Option<String>, Option<TokenUsage>), ProviderError> {
    let v: Value = serde_json::from_str(data)
        .map_err(|e| ProviderError::Provider(format!("bad stream event: {e}")))?;
    let delta = v["choices"][0]["delta"]["content"].as_str().map(str::to_string);
    let usage = v.get("usage").filter(|u| !u.is_null()).map(|u| TokenUsage {
        input_tokens: u["prompt_tokens"].as_u64().unwrap_or(0),
        output_tokens: u["completion_tokens"].as_u64().unwrap_or(0),
    });
    Ok((delta, usage))
}

impl Provider for HttpProvider {
    fn complete(
        &self,
        _model: &ModelSpec,
        req: &CompletionRequest,
        on_chunk: &mut dyn FnMut(&str),
    ) -> Result<TokenUsage, ProviderError> {
        let mut call = self
            .client
            .post(format!("{}/chat/completions", self.base_url))
            .json(&Self::body(req));
        if let Some(var) = &self.api_key_env {
            let key = std::env::var(var)
                .map_err(|_| ProviderError::Provider(format!("environment variable {var} not set")))?;
            call = call.bearer_auth(key);
        }
        let resp = call
            .send()
            .map_err(|e| ProviderError::Unavailable(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(ProviderError::Unavailable(format!("upstream status {status}")));
        }
        if !status.is_success() {
            let detail = resp.text().unwrap_or_default();
            return Err(ProviderError::Provider(format!("upstream status {status}: {detail}")));
        }

        let mut output = String::new();
        let mut usage = None;
        for line in BufReader::new(resp).lines() {
            let line = line.map_err(|e| ProviderError::Unavailable(e.to_string()))?;
            let Some(data) = line.strip_prefix("data:").map(str::trim) else {
                continue;
            };
            if data == "[DONE]" {
                break;
            }
            let (delta, u) = parse_event(data)?;
            if let Some(d) = delta.filter(|d| !d.is_empty()) {
                on_chunk(&d);
                output.push_str(&d);
            }
            if u.is_some() {
                usage = u;
            }
        }
        // Some servers omit usage; fall back to the estimator.
        Ok(usage.unwrap_or_else(|| TokenUsage {
            input_tokens: request_input_tokens(req.system.as_deref(), &req.user),
            output_tokens: estimate_tokens(&output),
        }))
    }

    fn kind(&self) -> &'static str {
        "http"
    }
}
