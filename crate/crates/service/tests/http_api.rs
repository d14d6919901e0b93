mod common;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use promptloop_service::auth::{Auth, Principal, Role};
use promptloop_service::events::MemoryLog;
use promptloop_service::http::router;
use promptloop_service::Service;
use serde_json::{json, Value};
use tower::ServiceExt;

use common::{gateway, options, threads_csv};

fn auth() -> Auth {
    let mut a = Auth::new();
    a.add("t-owner", Principal::owner("ana"));
    a.add(
        "t-editor",
        Principal {
            user_id: "bo".into(),
            display_name: "Bo".into(),
            role: Role::Editor,
        },
    );
    for i in 1..=2 {
        a.add(
            format!("t-rater-{i}"),
            Principal {
                user_id: format!("rater-{i}"),
                display_name: String::new(),
                role: Role::Evaluator,
            },
        );
    }
    a
}

fn app() -> Router {
    let svc = Service::open(Box::new(MemoryLog::new()), gateway(), options()).unwrap();
    router(svc, auth())
}

async fn call(app: &Router, method: &str, uri: &str, token: Option<&str>, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header("authorization", format!("Bearer {t}"));
    }
    let body = match body {
        Some(v) => Body::from(serde_json::to_vec(&v).unwrap()),
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn json_call(app: &Router, method: &str, uri: &str, token: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, Some(token), body).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

/// Prompt, dataset, finished 2x2 batch and an assigned bucket scenario.
async fn pipeline(app: &Router) -> (String, String) {
    let mut prompt_ids = vec![];
    for (title, text) in [("Polite", "Reply politely: {{content}}"), ("Brief", "Reply briefly: {{content}}")] {
        let (s, v) = json_call(
            app,
            "POST",
            "/prompts",
            "t-editor",
            Some(json!({"title": title, "blocks": [{"role": "user", "text": text}]})),
        )
        .await;
        assert_eq!(s, StatusCode::CREATED, "{v}");
        prompt_ids.push(v["doc_id"].as_str().unwrap().to_string());
    }
    let (s, ds) = json_call(
        app,
        "POST",
        "/datasets",
        "t-editor",
        Some(json!({"name": "threads", "content": threads_csv(5)})),
    )
    .await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(ds["item_count"], 5);
    let (s, plan) = json_call(
        app,
        "POST",
        "/batches/plan",
        "t-editor",
        Some(json!({"prompt_ids": prompt_ids, "model_ids": ["model-alpha", "model-beta"], "dataset_id": ds["dataset_id"]})),
    )
    .await;
    assert_eq!(s, StatusCode::CREATED, "{plan}");
    assert_eq!(plan["task_count"], 20);
    let job = plan["job_id"].as_str().unwrap().to_string();
    let (s, _) = json_call(app, "POST", &format!("/batches/{job}/start"), "t-editor", None).await;
    assert_eq!(s, StatusCode::OK);

    // Following the output stream returns every output once the job ends.
    let (s, body) = call(app, "GET", &format!("/batches/{job}/outputs?follow=true"), Some("t-editor"), None).await;
    assert_eq!(s, StatusCode::OK);
    let lines: Vec<Value> = String::from_utf8(body)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 20);
    let (_, summary) = json_call(app, "GET", &format!("/batches/{job}"), "t-editor", None).await;
    assert_eq!(summary["state"], "completed");

    let (s, sc) = json_call(
        app,
        "POST",
        &format!("/batches/{job}/to-scenario"),
        "t-owner",
        Some(json!({"eval_type": {"kind": "bucket_ranking", "buckets": ["best", "good", "poor"]}})),
    )
    .await;
    assert_eq!(s, StatusCode::CREATED, "{sc}");
    let sc = sc["scenario_id"].as_str().unwrap().to_string();
    let (s, _) = json_call(
        app,
        "POST",
        &format!("/scenarios/{sc}/assign"),
        "t-owner",
        Some(json!({
            "evaluators": [
                {"evaluator_id": "rater-1", "kind": "human"},
                {"evaluator_id": "rater-2", "kind": "human"},
                {"evaluator_id": "llm-1", "kind": "llm", "model_id": "judge-1"}
            ],
            "coverage": {"mode": "all"}
        })),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    (job, sc)
}

#[tokio::test]
async fn health_needs_no_token_and_everything_else_does() {
    let app = app();
    assert_eq!(call(&app, "GET", "/health", None, None).await.0, StatusCode::OK);
    let (s, body) = call(&app, "GET", "/prompts", None, None).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["error"], "unknown_token");
    assert_eq!(call(&app, "GET", "/prompts", Some("bogus"), None).await.0, StatusCode::UNAUTHORIZED);
}

#[tokio::test]
async fn role_matrix_is_enforced() {
    let app = app();
    let (job, sc) = pipeline(&app).await;

    // Evaluators reach neither provenance, analytics nor exports.
    for uri in [
        format!("/scenarios/{sc}/provenance"),
        format!("/scenarios/{sc}/provenance?format=csv"),
        format!("/scenarios/{sc}/agreement"),
        format!("/scenarios/{sc}/export"),
        format!("/scenarios/{sc}"),
        format!("/batches/{job}/export?format=csv"),
        format!("/batches/{job}/outputs"),
        format!("/batches/{job}"),
        "/prompts".to_string(),
        "/models".to_string(),
    ] {
        let (s, body) = call(&app, "GET", &uri, Some("t-rater-1"), None).await;
        assert_eq!(s, StatusCode::FORBIDDEN, "{uri}");
        let v: Value = serde_json::from_slice(&body).unwrap();
        assert_eq!(v["error"], "forbidden");
    }
    // Another evaluator's queue is off limits; their own is not.
    let other = format!("/scenarios/{sc}/queue?evaluator_id=rater-2");
    assert_eq!(call(&app, "GET", &other, Some("t-rater-1"), None).await.0, StatusCode::FORBIDDEN);
    let own = format!("/scenarios/{sc}/queue");
    assert_eq!(call(&app, "GET", &own, Some("t-rater-1"), None).await.0, StatusCode::OK);

    // Editors work on batches but do not export or see analytics.
    assert_eq!(call(&app, "GET", &format!("/batches/{job}/export"), Some("t-editor"), None).await.0, StatusCode::FORBIDDEN);
    assert_eq!(call(&app, "GET", &format!("/scenarios/{sc}/agreement"), Some("t-editor"), None).await.0, StatusCode::FORBIDDEN);
    assert_eq!(call(&app, "GET", "/admin/state", Some("t-editor"), None).await.0, StatusCode::FORBIDDEN);

    // Owners may export.
    let (s, csv) = call(&app, "GET", &format!("/batches/{job}/export?format=csv"), Some("t-owner"), None).await;
    assert_eq!(s, StatusCode::OK);
    let mut reader = csv::Reader::from_reader(csv.as_slice());
    assert_eq!(reader.records().count(), 20);
    let (s, _) = call(&app, "GET", &format!("/batches/{job}/export?format=structured"), Some("t-owner"), None).await;
    assert_eq!(s, StatusCode::OK);
    let (s, v) = json_call(&app, "GET", &format!("/batches/{job}/export?format=xml"), "t-owner", None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(v["message"].as_str().unwrap().contains("xml"));
}

#[tokio::test]
async fn evaluation_round_trip_over_http() {
    let app = app();
    let (_, sc) = pipeline(&app).await;

    for (token, rater) in [("t-rater-1", "rater-1"), ("t-rater-2", "rater-2")] {
        let (s, queue) = json_call(&app, "GET", &format!("/scenarios/{sc}/queue"), token, None).await;
        assert_eq!(s, StatusCode::OK);
        let queue = queue.as_array().unwrap();
        assert_eq!(queue.len(), 5);
        for p in queue {
            assert!(p.get("provenance").is_none());
            let members: Vec<&str> = p["group"]
                .as_array()
                .unwrap()
                .iter()
                .map(|m| m["eval_item_id"].as_str().unwrap())
                .collect();
            let placements: Vec<Value> = members
                .iter()
                .enumerate()
                .map(|(i, m)| {
                    let bucket = ["best", "good", "poor"][i % 3];
                    json!({"eval_item_id": m, "bucket": bucket, "rank": i / 3 + 1})
                })
                .collect();
            let (s, v) = json_call(
                &app,
                "POST",
                &format!("/scenarios/{sc}/assessments"),
                token,
                Some(json!({"target_id": p["eval_item_id"], "payload": {"kind": "buckets", "placements": placements}})),
            )
            .await;
            assert_eq!(s, StatusCode::CREATED, "{v}");
            assert!(v.get("payload").is_none());
        }
        // Submitting as somebody else is refused.
        let other = if rater == "rater-1" { "rater-2" } else { "rater-1" };
        let (s, _) = json_call(
            &app,
            "POST",
            &format!("/scenarios/{sc}/assessments"),
            token,
            Some(json!({"evaluator_id": other, "target_id": queue[0]["eval_item_id"], "payload": {"kind": "order", "order": []}})),
        )
        .await;
        assert_eq!(s, StatusCode::FORBIDDEN);
    }

    // Invalid payloads are rejected with 422.
    let (_, queue) = json_call(&app, "GET", &format!("/scenarios/{sc}/queue"), "t-rater-1", None).await;
    let (s, v) = json_call(
        &app,
        "POST",
        &format!("/scenarios/{sc}/assessments"),
        "t-rater-1",
        Some(json!({"target_id": queue[0]["eval_item_id"], "payload": {"kind": "buckets", "placements": []}})),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{v}");

    let (s, v) = json_call(&app, "POST", &format!("/scenarios/{sc}/llm-evaluators/llm-1/run"), "t-owner", Some(json!({}))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["submitted"], 5);

    let (s, agreement) = json_call(&app, "GET", &format!("/scenarios/{sc}/agreement"), "t-owner", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(agreement["assessments"], 15);
    assert_eq!(agreement["llms_only"]["status"], "insufficient_data");
    let (s, prov) = json_call(&app, "GET", &format!("/scenarios/{sc}/provenance"), "t-owner", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(prov["ranking"].as_array().unwrap().len(), 4);
    let (s, csv) = call(&app, "GET", &format!("/scenarios/{sc}/provenance?format=csv"), Some("t-owner"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(String::from_utf8(csv).unwrap().starts_with("model_id,doc_id,prompt_version_label,total"));
    let (s, export) = call(&app, "GET", &format!("/scenarios/{sc}/export?format=csv"), Some("t-owner"), None).await;
    assert_eq!(s, StatusCode::OK);
    // Four members per group, five groups, three evaluators.
    assert_eq!(String::from_utf8(export).unwrap().lines().count(), 1 + 4 * 5 * 3);

    let (s, v) = json_call(&app, "POST", &format!("/scenarios/{sc}/close"), "t-owner", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["state"], "closed");
    let (s, v) = json_call(&app, "GET", &format!("/scenarios/{sc}/queue"), "t-rater-1", None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["error"], "scenario_closed");
}

#[tokio::test]
async fn prompt_editing_testing_and_errors() {
    let app = app();
    let (s, p) = json_call(
        &app,
        "POST",
        "/prompts",
        "t-editor",
        Some(json!({
            "title": "Reply",
            "blocks": [{"role": "system", "text": "Be kind."}, {"role": "user", "text": "Answer {{content}} for {{name}}"}],
            "palette": {"content": "the invoice", "name": "Kim"}
        })),
    )
    .await;
    assert_eq!(s, StatusCode::CREATED, "{p}");
    let id = p["doc_id"].as_str().unwrap();
    assert_eq!(p["variables"], json!(["content", "name"]));

    // Two edits against the same base: the second is rebased.
    for (text, session) in [("Hi. ", "s1"), ("Yo. ", "s2")] {
        let (s, v) = json_call(
            &app,
            "POST",
            &format!("/prompts/{id}/edits"),
            "t-editor",
            Some(json!({"block_id": "b2", "op": {"kind": "insert", "offset": 0, "text": text, "session_id": session, "base_rev": 1}})),
        )
        .await;
        assert_eq!(s, StatusCode::OK, "{v}");
    }
    let (_, p) = json_call(&app, "GET", &format!("/prompts/{id}"), "t-editor", None).await;
    assert_eq!(p["blocks"][1]["text"], "Hi. Yo. Answer {{content}} for {{name}}");
    assert_eq!(p["blocks"][1]["rev"], 3);

    let (s, v) = json_call(
        &app,
        "POST",
        &format!("/prompts/{id}/edits"),
        "t-editor",
        Some(json!({"block_id": "b2", "op": {"kind": "insert", "offset": 0, "text": "x", "session_id": "s1", "base_rev": 9}})),
    )
    .await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["error"], "stale_base");

    let (s, v) = json_call(&app, "GET", &format!("/prompts/{id}/blocks/b2/diff?from=1"), "t-editor", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["insertions"], 8);
    let (s, v) = json_call(&app, "POST", &format!("/prompts/{id}/blocks/b2/rollback"), "t-editor", Some(json!({"target_rev": 1}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["rev"], 5);
    let (_, p) = json_call(&app, "GET", &format!("/prompts/{id}"), "t-editor", None).await;
    assert_eq!(p["blocks"][1]["text"], "Answer {{content}} for {{name}}");

    // Streamed test completion.
    let (s, body) = call(&app, "POST", &format!("/prompts/{id}/test"), Some("t-editor"), Some(json!({"model_id": "model-alpha"}))).await;
    assert_eq!(s, StatusCode::OK);
    let lines: Vec<Value> = String::from_utf8(body).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let text: String = lines
        .iter()
        .filter(|l| l["type"] == "chunk")
        .map(|l| l["text"].as_str().unwrap())
        .collect();
    assert!(text.contains("Answer the invoice for Kim"), "{text}");
    let last = lines.last().unwrap();
    assert_eq!(last["type"], "done");
    assert!(last["usage"]["cost"].as_u64().unwrap() > 0);

    // Missing bindings fail before streaming.
    let (s, v) = json_call(
        &app,
        "PATCH",
        &format!("/prompts/{id}"),
        "t-editor",
        Some(json!({"updates": [{"kind": "add_block", "role": "user", "text": "Sign as {{signature}}"}]})),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let (s, v) = json_call(&app, "POST", &format!("/prompts/{id}/test"), "t-editor", Some(json!({"model_id": "model-alpha"}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"], "missing_binding");
    let (s, _) = json_call(
        &app,
        "POST",
        &format!("/prompts/{id}/test"),
        "t-editor",
        Some(json!({"model_id": "model-alpha", "bindings": {"signature": "Team"}})),
    )
    .await;
    assert_eq!(s, StatusCode::OK);

    // Export and re-import.
    let (s, exported) = call(&app, "GET", &format!("/prompts/{id}/export"), Some("t-editor"), None).await;
    assert_eq!(s, StatusCode::OK);
    let req = Request::builder()
        .method("POST")
        .uri("/prompts/import")
        .header("authorization", "Bearer t-editor")
        .body(Body::from(exported.clone()))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::CREATED);
    let v: Value = serde_json::from_slice(&resp.into_body().collect().await.unwrap().to_bytes()).unwrap();
    let copy = v["doc_id"].as_str().unwrap();
    assert_ne!(copy, id);

    assert_eq!(call(&app, "GET", "/prompts/prompt-9999", Some("t-editor"), None).await.0, StatusCode::NOT_FOUND);
    let (s, v) = json_call(&app, "POST", "/prompts", "t-editor", Some(json!({"blocks": 3}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"], "validation");
}

#[tokio::test]
async fn batch_errors_map_to_statuses() {
    let app = app();
    let (s, p) = json_call(&app, "POST", "/prompts", "t-editor", Some(json!({"title": "x", "blocks": [{"role": "user", "text": "{{content}} {{tone}}"}]}))).await;
    assert_eq!(s, StatusCode::CREATED);
    let (_, ds) = json_call(&app, "POST", "/datasets", "t-editor", Some(json!({"name": "t", "content": threads_csv(2)}))).await;
    let (s, v) = json_call(
        &app,
        "POST",
        "/batches/plan",
        "t-editor",
        Some(json!({"prompt_ids": [p["doc_id"]], "model_ids": ["model-alpha"], "dataset_id": ds["dataset_id"]})),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"], "missing_binding");
    let (s, v) = json_call(
        &app,
        "POST",
        "/batches/plan",
        "t-editor",
        Some(json!({"prompt_ids": [p["doc_id"]], "model_ids": [], "dataset_id": ds["dataset_id"]})),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"], "empty_dimension");
    let (s, v) = json_call(&app, "POST", "/datasets", "t-editor", Some(json!({"name": "bad", "content": "a,b\n1\n"}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"], "invalid_dataset");
    assert_eq!(call(&app, "POST", "/batches/job-0042/start", Some("t-editor"), None).await.0, StatusCode::NOT_FOUND);
}
