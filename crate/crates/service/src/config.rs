//! Service configuration: one TOML file plus environment overrides.

use std::path::{Path, PathBuf};
use std::time::Duration;

use promptloop_core::batch::{RunOptions, DEFAULT_GLOBAL_PARALLELISM, DEFAULT_MAX_RETRIES};
use promptloop_core::provider::{Gateway, ProviderConfig};
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;

pub const ENV_LISTEN: &str = "PROMPTLOOP_LISTEN";
pub const ENV_TOKEN_FILE: &str = "PROMPTLOOP_TOKEN_FILE";
pub const ENV_DATA_DIR: &str = "PROMPTLOOP_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatchConfig {
    pub parallelism: usize,
    pub max_retries: u32,
    pub backoff_ms: u64,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig {
            parallelism: DEFAULT_GLOBAL_PARALLELISM,
            max_retries: DEFAULT_MAX_RETRIES,
            backoff_ms: 100,
        }
    }
}

impl BatchConfig {
    pub fn run_options(&self) -> RunOptions {
        RunOptions {
            parallelism: self.parallelism.max(1),
            max_retries: self.max_retries,
            backoff: Duration::from_millis(self.backoff_ms),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub listen: String,
    pub data_dir: PathBuf,
    /// Sync the log to disk on every append. Off means flush to the OS only.
    pub fsync: bool,
    /// Write a full snapshot after this many events (0 disables).
    pub snapshot_every: u64,
    pub token_file: Option<PathBuf>,
    /// Restart jobs that were running when the process stopped.
    pub resume_running_jobs: bool,
    pub batch: BatchConfig,
    pub providers: Vec<ProviderConfig>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            listen: "127.0.0.1:8080".into(),
            data_dir: PathBuf::from("data"),
            fsync: false,
            snapshot_every: 1000,
            token_file: None,
            resume_running_jobs: true,
            batch: BatchConfig::default(),
            providers: Vec::new(),
        }
    }
}

impl Config {
    pub fn from_toml(raw: &str) -> Result<Self, ServiceError> {
        toml::from_str(raw).map_err(|e| ServiceError::Validation(format!("config: {e}")))
    }

    /// Reads `path` (relative paths inside resolve against its directory)
    /// and applies environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self, ServiceError> {
        let mut cfg = match path {
            Some(p) => {
                let raw = std::fs::read_to_string(p)
                    .map_err(|e| ServiceError::Validation(format!("config {}: {e}", p.display())))?;
                let mut cfg = Self::from_toml(&raw)?;
                let base = p.parent().unwrap_or(Path::new("."));
                cfg.data_dir = base.join(&cfg.data_dir);
                cfg.token_file = cfg.token_file.map(|t| base.join(t));
                cfg
            }
            None => Config::default(),
        };
        cfg.apply_env();
        Ok(cfg)
    }

    pub fn apply_env(&mut self) {
        if let Ok(v) = std::env::var(ENV_LISTEN) {
            self.listen = v;
        }
        if let Ok(v) = std::env::var(ENV_TOKEN_FILE) {
            self.token_file = Some(v.into());
        }
        if let Ok(v) = std::env::var(ENV_DATA_DIR) {
            self.data_dir = v.into();
        }
    }

    pub fn gateway(&self) -> Result<Gateway, ServiceError> {
        let g = Gateway::new();
        for p in &self.providers {
            p.install(&g)?;
        }
        Ok(g)
    }
}
