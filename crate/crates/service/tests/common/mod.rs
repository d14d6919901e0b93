#![allow(dead_code)]

use std::sync::Arc;
use std::time::Duration;

use promptloop_core::batch::RunOptions;
use promptloop_core::provider::{Gateway, MockBehavior, MockConfig, MockProvider, ModelSpec};
use promptloop_service::service::{Clock, NewBlock, NewPrompt};
use promptloop_service::ServiceOptions;
use promptloop_core::prompt::Role;

pub fn fixed_clock() -> Clock {
    Arc::new(|| "2026-03-01T12:00:00.000Z".to_string())
}

pub fn options() -> ServiceOptions {
    ServiceOptions {
        snapshot_every: 0,
        run: RunOptions {
            parallelism: 4,
            max_retries: 3,
            backoff: Duration::from_millis(1),
        },
        resume_running_jobs: true,
        clock: fixed_clock(),
    }
}

fn model(id: &str, provider: &str, i: u64) -> ModelSpec {
    ModelSpec {
        model_id: id.into(),
        provider_id: provider.into(),
        display_name: id.into(),
        price_in: 150 + 50 * i,
        price_out: 600 + 100 * i,
        max_context: 16384,
    }
}

/// Two echo models and one judge model.
pub fn gateway() -> Arc<Gateway> {
    let g = Gateway::new();
    g.add_provider("mock", Arc::new(MockProvider::new(MockConfig::default())), 4).unwrap();
    g.add_provider(
        "judge",
        Arc::new(MockProvider::new(MockConfig {
            behavior: MockBehavior::Judge,
            ..Default::default()
        })),
        4,
    )
    .unwrap();
    g.register_model(model("model-alpha", "mock", 0)).unwrap();
    g.register_model(model("model-beta", "mock", 1)).unwrap();
    g.register_model(model("judge-1", "judge", 2)).unwrap();
    Arc::new(g)
}

pub fn prompt(title: &str, user: &str) -> NewPrompt {
    NewPrompt {
        title: title.into(),
        blocks: vec![
            NewBlock {
                block_id: Some("sys".into()),
                role: Role::System,
                text: "You answer customer email.".into(),
            },
            NewBlock {
                block_id: Some("user".into()),
                role: Role::User,
                text: user.into(),
            },
        ],
        palette: [("content".to_string(), "Can we meet on Friday?".to_string())].into(),
        version_label: None,
    }
}

pub fn threads_csv(n: usize) -> String {
    let mut raw = String::from("content\n");
    for i in 0..n {
        raw.push_str(&format!("\"Thread {i}: please confirm the order for week {}.\"\n", i % 7));
    }
    raw
}
