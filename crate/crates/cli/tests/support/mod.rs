#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use promptloop_service::service::Clock;
use serde_json::json;

pub const MODELS: [&str; 2] = ["model-alpha", "model-beta"];
pub const JUDGE: &str = "judge-1";

pub fn fixed_clock() -> Clock {
    Arc::new(|| "2026-03-01T12:00:00.000Z".to_string())
}

/// Providers section: two echo models and one judge model.
pub fn providers_toml(latency_ms: u64) -> String {
    format!(
        r#"
[batch]
parallelism = 4
max_retries = 2
backoff_ms = 1

[[providers]]
provider_id = "mock"
kind = "mock"
mock = {{ behavior = {{ kind = "echo" }}, latency_ms = {latency_ms} }}
models = [
  {{ model_id = "model-alpha", price_in = 150, price_out = 600, max_context = 16384 }},
  {{ model_id = "model-beta", price_in = 2500, price_out = 10000, max_context = 16384 }},
]

[[providers]]
provider_id = "judge"
kind = "mock"
mock = {{ behavior = {{ kind = "judge" }} }}
models = [{{ model_id = "{JUDGE}", price_in = 100, price_out = 400, max_context = 16384 }}]
"#
    )
}

pub fn threads_csv(n: usize) -> String {
    let mut raw = String::from("content,customer\n");
    for i in 0..n {
        raw.push_str(&format!(
            "\"Thread {i}: the parcel for order {} has not arrived, week {}.\",Customer {}\n",
            1000 + i * 7,
            i % 9,
            i % 13
        ));
    }
    raw
}

/// Prompt file in the export format.
pub fn prompt_file(doc_id: &str, title: &str, instruction: &str) -> String {
    serde_json::to_string_pretty(&json!({
        "doc_id": doc_id,
        "title": title,
        "version_label": "v1",
        "blocks": [
            {"block_id": "sys", "role": "system", "text": "You write replies for a customer service team."},
            {"block_id": "user", "role": "user", "text": format!("{instruction}\n\nThread from {{{{customer}}}}:\n{{{{content}}}}")}
        ],
        "palette": {"content": "Where is my parcel?", "customer": "Kim"}
    }))
    .unwrap()
}

pub const PROMPTS: [(&str, &str, &str); 2] = [
    ("reply-polite", "Polite reply", "Reply politely and thank the customer."),
    ("reply-brief", "Brief reply", "Reply in two sentences."),
];

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub config: PathBuf,
}

impl Fixture {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.path("data")
    }
}

/// Writes prompts, dataset and a pipeline config into a fresh directory.
pub fn pipeline_fixture(items: usize, prompts: usize, models: &[&str], pipeline_extra: &str, latency_ms: u64) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "threads.csv", &threads_csv(items));
    let mut files = Vec::new();
    for (id, title, text) in PROMPTS.iter().take(prompts) {
        let name = format!("{id}.json");
        write(dir.path(), &name, &prompt_file(id, title, text));
        files.push(format!("\"{name}\""));
    }
    let models: Vec<String> = models.iter().map(|m| format!("\"{m}\"")).collect();
    let config = format!(
        "data_dir = \"data\"\nsnapshot_every = 25\n{}\n[pipeline]\nprompts = [{}]\ndataset = \"threads.csv\"\nmodels = [{}]\n{}\n",
        providers_toml(latency_ms),
        files.join(", "),
        models.join(", "),
        pipeline_extra
    );
    write(dir.path(), "pipeline.toml", &config);
    let config = dir.path().join("pipeline.toml");
    Fixture { dir, config }
}

pub fn write(dir: &Path, name: &str, content: &str) {
    std::fs::write(dir.join(name), content).unwrap();
}

pub fn scripted(ids: &[&str], noise: f64) -> String {
    ids.iter()
        .enumerate()
        .map(|(i, id)| {
            format!(
                "[[pipeline.evaluators]]\nkind = \"scripted\"\nevaluator_id = \"{id}\"\nseed = {}\nnoise = {noise}\n",
                i + 1
            )
        })
        .collect()
}

pub fn llm(id: &str) -> String {
    format!("[[pipeline.evaluators]]\nkind = \"llm\"\nevaluator_id = \"{id}\"\nmodel_id = \"{JUDGE}\"\n")
}
