//! Deterministic offline provider.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{estimate_tokens, request_input_tokens, CompletionRequest, ModelSpec, Provider, ProviderError, TokenUsage};

const CHUNK_CHARS: usize = 16;
const ECHO_PREFIX_CHARS: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MockBehavior {
    /// A digest line followed by the first 64 characters of the user input.
    #[default]
    Echo,
    /// Always answers with `text`.
    Fixed { text: String },
    /// Answers the `- name: ...` field list of an answer-format section with
    /// compliant values derived from the request digest.
    Judge,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FailureMode {
    #[default]
    None,
    /// Every call fails with a retryable error.
    Unavailable,
    /// Every call fails with a permanent error.
    Error { detail: String },
    /// The first `failures` calls for each distinct request are retryable
    /// failures; later calls succeed.
    Flaky { failures: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct MockConfig {
    #[serde(default)]
    pub behavior: MockBehavior,
    #[serde(default)]
    pub latency_ms: u64,
    #[serde(default)]
    pub failure: FailureMode,
}

#[derive(Debug, Default)]
pub struct MockProvider {
    config: MockConfig,
    attempts: Mutex<HashMap<String, u32>>,
}

impl MockProvider {
    pub fn new(config: MockConfig) -> Self {
        MockProvider {
            config,
            attempts: Mutex::new(HashMap::new()),
        }
    }

    fn digest(req: &CompletionRequest) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(req.model_id.as_bytes());
        h.update([0]);
        h.update(req.system.as_deref().unwrap_or("").as_bytes());
        h.update([0]);
        h.update(req.user.as_bytes());
        h.update([0]);
        h.update(req.params.seed.map(|s| s.to_string()).unwrap_or_default().as_bytes());
        h.finalize().into()
    }

    /// Full output text for `req`, before chunking.
    pub fn output_for(&self, req: &CompletionRequest) -> String {
        let digest = Self::digest(req);
        let text = match &self.config.behavior {
            MockBehavior::Echo => {
                let head: String = req.user.chars().take(ECHO_PREFIX_CHARS).collect();
                format!("[mock {}]\n{head}", &hex::encode(digest)[..16])
            }
            MockBehavior::Fixed { text } => text.clone(),
            MockBehavior::Judge => {
                let prompt = match &req.system {
                    Some(s) => format!("{s}\n{}", req.user),
                    None => req.user.clone(),
                };
                judge_answer(&prompt, digest)
            }
        };
        let cap = (req.params.max_output_tokens as usize).saturating_mul(4);
        text.chars().take(cap).collect()
    }

    fn check_failure(&self, req: &CompletionRequest) -> Result<(), ProviderError> {
        match &self.config.failure {
            FailureMode::None => Ok(()),
            FailureMode::Unavailable => Err(ProviderError::Unavailable("mock outage".into())),
            FailureMode::Error { detail } => Err(ProviderError::Provider(detail.clone())),
            FailureMode::Flaky { failures } => {
                let key = hex::encode(Self::digest(req));
                let mut attempts = self.attempts.lock().expect("mock poisoned");
                let n = attempts.entry(key).or_insert(0);
                *n += 1;
                if *n <= *failures {
                    Err(ProviderError::Unavailable(format!("transient failure {n}")))
                } else {
                    Ok(())
                }
            }
        }
    }
}

impl Provider for MockProvider {
    fn complete(
        &self,
        _model: &ModelSpec,
        req: &CompletionRequest,
        on_chunk: &mut dyn FnMut(&str),
    ) -> Result<TokenUsage, ProviderError> {
        if self.config.latency_ms > 0 {
            std::thread::sleep(Duration::from_millis(self.config.latency_ms));
        }
        self.check_failure(req)?;
        let text = self.output_for(req);
        let chars: Vec<char> = text.chars().collect();
        for chunk in chars.chunks(CHUNK_CHARS) {
            let s: String = chunk.iter().collect();
            on_chunk(&s);
        }
        Ok(TokenUsage {
            input_tokens: request_input_tokens(req.system.as_deref(), &req.user),
            output_tokens: estimate_tokens(&text),
        })
    }

    fn predict_output_tokens(&self, _model: &ModelSpec, req: &CompletionRequest) -> Option<u64> {
        Some(estimate_tokens(&self.output_for(req)))
    }

    fn kind(&self) -> &'static str {
        "mock"
    }
}

fn field_patterns() -> &'static [Regex; 3] {
    static RE: OnceLock<[Regex; 3]> = OnceLock::new();
    RE.get_or_init(|| {
        [
            Regex::new(r"^- ([A-Za-z0-9_]+): integer from (-?\d+) to (-?\d+)\s*$").unwrap(),
            Regex::new(r"^- ([A-Za-z0-9_]+): one of (.+?)\s*$").unwrap(),
            Regex::new(r"^- ([A-Za-z0-9_]+): ordering of (\d+) candidates").unwrap(),
        ]
    })
}

fn judge_answer(prompt: &str, digest: [u8; 32]) -> String {
    let mut rng = ChaCha8Rng::from_seed(digest);
    let [int_re, choice_re, order_re] = field_patterns();
    let mut lines = Vec::new();
    for line in prompt.lines().map(str::trim) {
        if let Some(c) = int_re.captures(line) {
            let lo: i64 = c[2].parse().unwrap_or(0);
            let hi: i64 = c[3].parse().unwrap_or(lo);
            let v = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            lines.push(format!("{}: {v}", &c[1]));
        } else if let Some(c) = order_re.captures(line) {
            let n: usize = c[2].parse().unwrap_or(0);
            let mut order: Vec<usize> = (1..=n).collect();
            order.shuffle(&mut rng);
            let order: Vec<String> = order.iter().map(|i| i.to_string()).collect();
            lines.push(format!("{}: {}", &c[1], order.join(",")));
        } else if let Some(c) = choice_re.captures(line) {
            let options: Vec<&str> = c[2].split(", ").map(str::trim).collect();
            let pick = options[rng.random_range(0..options.len())];
            lines.push(format!("{}: {pick}", &c[1]));
        }
    }
    lines.join("\n")
}
