//! End-to-end acceptance suite. Each criterion prints one PASS or FAIL line
//! straight to stderr so the lines show up even when output is captured.

mod support;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::{BufRead, BufReader, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use promptloop_cli::pipeline::{self, PipelineSpec, Summary};
use promptloop_core::analytics::{krippendorff_alpha, AlphaOutcome, HitRate, Metric, ReliabilityInput};
use promptloop_core::batch::{ExportFormat, JobState, RunOptions};
use promptloop_core::evaluation::{
    render_rubric, BucketPlacement, Coverage, EvaluationType, Evaluator, Payload, DEFAULT_RUBRIC,
};
use promptloop_core::prompt::Role;
use promptloop_core::provider::GenerationParams;
use promptloop_core::sync::{char_len, replay, ClientReplica, Committed, EditOp, OpKind};
use promptloop_service::config::Config;
use promptloop_service::events::MemoryLog;
use promptloop_service::service::{NewBlock, NewPrompt, PlanRequest};
use promptloop_service::{Service, ServiceOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use support::*;

const BUCKETS: &str = "eval_type = \"buckets\"\n";
const RATERS: [&str; 3] = ["rater-1", "rater-2", "rater-3"];
/// The combination the scripted raters favour in the provenance check.
const BEST_MODEL: &str = "model-beta";
const BEST_PROMPT: &str = "reply-brief";

fn report(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

fn criterion(name: &str, f: impl FnOnce() -> String) -> bool {
    let started = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f));
    let secs = started.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            report(&format!("PASS {name} ({secs:.2}s): {detail}"));
            true
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            report(&format!("FAIL {name} ({secs:.2}s): {msg}"));
            false
        }
    }
}

#[test]
fn primary_acceptance_criteria() {
    let results = [
        criterion("cartesian_product_count", cartesian_product_count),
        criterion("case_study_arithmetic", case_study_arithmetic),
        criterion("krippendorff_alpha_correctness", alpha_correctness),
        criterion("ot_convergence", ot_convergence),
        criterion("budget_safety", budget_safety),
        criterion("blinding", blinding),
        criterion("provenance_report", provenance_report),
        criterion("durability", durability),
    ];
    let failed = results.iter().filter(|ok| !**ok).count();
    assert_eq!(failed, 0, "{failed} acceptance criteria failed");
}

// ---------------------------------------------------------------------------
// Helpers

fn load(fx: &Fixture) -> (Config, PipelineSpec) {
    (Config::load(Some(&fx.config)).unwrap(), PipelineSpec::load(&fx.config).unwrap())
}

fn run_in_memory(fx: &Fixture) -> pipeline::PipelineRun {
    let (cfg, spec) = load(fx);
    let svc = pipeline::open_service(&cfg, false, Some(fixed_clock())).unwrap();
    pipeline::run(svc, &spec).unwrap()
}

fn csv_records(bytes: &[u8]) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_reader(bytes);
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

fn column(header: &[String], name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"))
}

fn options() -> ServiceOptions {
    ServiceOptions {
        snapshot_every: 0,
        run: RunOptions {
            parallelism: 4,
            max_retries: 2,
            backoff: Duration::from_millis(1),
        },
        resume_running_jobs: true,
        clock: fixed_clock(),
    }
}

fn wait_until(what: &str, timeout: Duration, mut f: impl FnMut() -> bool) {
    let deadline = Instant::now() + timeout;
    while !f() {
        assert!(Instant::now() < deadline, "timed out waiting for {what}");
        std::thread::sleep(Duration::from_millis(20));
    }
}

const TOKENS: &str = r#"
[[principals]]
user_id = "ana"
role = "owner"
token = "owner-token"

[[principals]]
user_id = "rater-1"
role = "evaluator"
token = "rater-1-token"

[[principals]]
user_id = "rater-2"
role = "evaluator"
token = "rater-2-token"
"#;

/// `promptloop serve` child process. Dropping it sends SIGKILL.
struct Server {
    child: Child,
    http: reqwest::blocking::Client,
    base: String,
}

impl Server {
    fn start(config: &Path, tokens: &Path) -> Server {
        let mut child = Command::new(env!("CARGO_BIN_EXE_promptloop"))
            .arg("--config")
            .arg(config)
            .args(["serve", "--listen", "127.0.0.1:0", "--token-file"])
            .arg(tokens)
            .env("RUST_LOG", "error")
            .stdout(Stdio::piped())
            .spawn()
            .unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        let addr = line
            .trim()
            .strip_prefix("listening on ")
            .unwrap_or_else(|| panic!("unexpected server output {line:?}"))
            .to_string();
        Server {
            child,
            http: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(30))
                .build()
                .unwrap(),
            base: format!("http://{addr}"),
        }
    }

    fn kill(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }

    fn send(&self, req: reqwest::blocking::RequestBuilder, token: &str) -> (u16, String) {
        let resp = req.bearer_auth(token).send().unwrap();
        (resp.status().as_u16(), resp.text().unwrap())
    }

    fn get(&self, path: &str, token: &str) -> (u16, String) {
        self.send(self.http.get(format!("{}{path}", self.base)), token)
    }

    fn post(&self, path: &str, token: &str, body: Value) -> (u16, String) {
        let req = self
            .http
            .post(format!("{}{path}", self.base))
            .header("content-type", "application/json")
            .body(body.to_string());
        self.send(req, token)
    }

    fn get_json(&self, path: &str, token: &str) -> Value {
        let (status, body) = self.get(path, token);
        assert_eq!(status, 200, "GET {path}: {body}");
        serde_json::from_str(&body).unwrap()
    }

    fn post_json(&self, path: &str, token: &str, body: Value) -> Value {
        let (status, text) = self.post(path, token, body);
        assert!((200..300).contains(&status), "POST {path}: {status} {text}");
        serde_json::from_str(&text).unwrap()
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.kill();
    }
}

fn cli(fx: &Fixture, args: &[&str]) -> Value {
    let out = Command::new(env!("CARGO_BIN_EXE_promptloop"))
        .arg("--config")
        .arg(&fx.config)
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .unwrap();
    assert!(out.status.success(), "promptloop {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

// ---------------------------------------------------------------------------
// Criteria

fn cartesian_product_count() -> String {
    let fx = pipeline_fixture(50, 2, &MODELS, &format!("{BUCKETS}{}", scripted(&RATERS, 0.15)), 0);
    let started = Instant::now();
    let first = run_in_memory(&fx);
    let elapsed = started.elapsed();
    let svc = &first.service;

    let plan_tasks = svc.with_state(|s| s.jobs[&first.job_id].plan.task_count);
    assert_eq!(plan_tasks, 200);
    assert_eq!(first.summary.task_count, 200);
    assert_eq!(first.summary.outputs_done, 200);
    let csv = svc.export_batch(&first.job_id, ExportFormat::Csv).unwrap();
    let (header, rows) = csv_records(&csv);
    assert_eq!(rows.len(), 200);
    let ids: BTreeSet<&str> = rows.iter().map(|r| r[column(&header, "output_id")].as_str()).collect();
    assert_eq!(ids.len(), 200);
    assert!(rows.iter().all(|r| r[column(&header, "status")] == "done"));
    assert!(elapsed < Duration::from_secs(10), "took {elapsed:?}");

    // A second run from the same files exports the same bytes.
    let second = run_in_memory(&fx);
    assert_eq!(second.service.export_batch(&second.job_id, ExportFormat::Csv).unwrap(), csv);
    assert_eq!(
        second.service.export_batch(&second.job_id, ExportFormat::Structured).unwrap(),
        svc.export_batch(&first.job_id, ExportFormat::Structured).unwrap()
    );
    assert_eq!(second.summary, first.summary);

    // The binary prints the same summary.
    let printed: Summary = serde_json::from_value(cli(&fx, &["pipeline", fx.config.to_str().unwrap()])).unwrap();
    assert_eq!(printed, first.summary);
    format!(
        "task_count 200, 200 done, 200 export rows, identical re-export, pipeline {:.2}s",
        elapsed.as_secs_f64()
    )
}

fn case_study_arithmetic() -> String {
    let humans = ["h1", "h2", "h3", "h4", "h5"];
    let extra = format!("eval_type = \"mail_rating\"\n{}{}", scripted(&humans, 0.15), llm("llm-1"));
    let fx = pipeline_fixture(253, 1, &MODELS[..1], &extra, 0);
    let run = run_in_memory(&fx);
    assert_eq!(run.summary.task_count, 253);
    assert_eq!(run.summary.assessments, 1518);
    let stored = run.service.with_state(|s| s.scenarios[&run.scenario_id].all_assessments().count());
    assert_eq!(stored, 1518);
    let r = run.service.agreement(&run.scenario_id, None, None).unwrap();
    let combined = r.combined.alpha().expect("combined alpha defined");
    let humans_only = r.humans_only.alpha().expect("humans alpha defined");
    assert!(
        matches!(r.llms_only, AlphaOutcome::InsufficientData { .. }),
        "{:?}",
        r.llms_only
    );
    format!(
        "1518 assessments; combined {combined:.4}, humans {humans_only:.4}, llms insufficient data ({} facet)",
        r.facet
    )
}

/// Definitional Krippendorff alpha: enumerates every ordered pair of
/// pairable values within units and across the pooled data.
fn alpha_oracle(metric: Metric, table: &[Vec<Option<f64>>]) -> f64 {
    let units: Vec<Vec<f64>> = table
        .iter()
        .map(|r| r.iter().flatten().copied().collect::<Vec<f64>>())
        .filter(|u| u.len() >= 2)
        .collect();
    let pooled: Vec<f64> = units.iter().flatten().copied().collect();
    let n = pooled.len() as f64;
    let mut distinct = pooled.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let count = |v: f64| pooled.iter().filter(|x| **x == v).count() as f64;
    let delta2 = |a: f64, b: f64| -> f64 {
        match metric {
            Metric::Nominal => f64::from(u8::from(a != b)),
            Metric::Interval => (a - b) * (a - b),
            Metric::Ordinal => {
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                let between: f64 = distinct.iter().filter(|g| **g >= lo && **g <= hi).map(|g| count(*g)).sum();
                let d = between - (count(lo) + count(hi)) / 2.0;
                d * d
            }
        }
    };
    let mut observed = 0.0;
    for u in &units {
        let m = u.len() as f64;
        for i in 0..u.len() {
            for j in 0..u.len() {
                if i != j {
                    observed += delta2(u[i], u[j]) / (m - 1.0);
                }
            }
        }
    }
    let mut expected = 0.0;
    for i in 0..pooled.len() {
        for j in 0..pooled.len() {
            if i != j {
                expected += delta2(pooled[i], pooled[j]);
            }
        }
    }
    1.0 - (observed / n) / (expected / (n * (n - 1.0)))
}

fn alpha_correctness() -> String {
    let metrics = [Metric::Nominal, Metric::Ordinal, Metric::Interval];
    let alpha = |metric, rows: &[Vec<Option<f64>>]| krippendorff_alpha(&ReliabilityInput::from_table(metric, rows)).unwrap();

    // Perfect agreement across three categories.
    let perfect: Vec<Vec<Option<f64>>> = [1.0, 2.0, 3.0, 2.0, 1.0]
        .iter()
        .map(|v| vec![Some(*v), Some(*v), Some(*v)])
        .collect();
    for m in metrics {
        assert_eq!(alpha(m, &perfect), 1.0, "{m:?}");
    }

    // Two coders, four units.
    let ab: Vec<Vec<Option<f64>>> = [(1.0, 1.0), (2.0, 2.0), (3.0, 3.0), (3.0, 4.0)]
        .iter()
        .map(|(a, b)| vec![Some(*a), Some(*b)])
        .collect();
    let frozen_ab = [16.0 / 23.0, 71.0 / 78.0, 8.0 / 9.0];
    // Four coders, twelve units, with gaps.
    let (s, n) = (Some, None);
    let table: Vec<Vec<Option<f64>>> = vec![
        vec![s(1.), s(1.), n, s(1.)],
        vec![s(2.), s(2.), s(3.), s(2.)],
        vec![s(3.), s(3.), s(3.), s(3.)],
        vec![s(3.), s(3.), s(3.), s(3.)],
        vec![s(2.), s(2.), s(2.), s(2.)],
        vec![s(1.), s(2.), s(3.), s(4.)],
        vec![s(4.), s(4.), s(4.), s(4.)],
        vec![s(1.), s(1.), s(2.), s(1.)],
        vec![s(2.), s(2.), s(2.), s(2.)],
        vec![n, s(5.), s(5.), s(5.)],
        vec![n, n, s(1.), s(1.)],
        vec![n, s(3.), n, n],
    ];
    let frozen_table = [0.743421052631579, 0.8153875037548813, 0.8491071428571428];
    for (i, m) in metrics.into_iter().enumerate() {
        for (rows, frozen) in [(&ab, frozen_ab[i]), (&table, frozen_table[i])] {
            let got = alpha(m, rows);
            let oracle = alpha_oracle(m, rows);
            assert!((got - oracle).abs() <= 1e-9, "{m:?}: {got} vs oracle {oracle}");
            assert!((got - frozen).abs() <= 1e-9, "{m:?}: {got} vs frozen {frozen}");
        }
    }

    // Relabelling and affine invariance over random tables.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let names = ["a", "b", "c", "d", "e"];
    let renamed = ["omega", "kappa", "zeta", "mu", "x"];
    let mut checked = 0;
    for _ in 0..300 {
        let units = rng.random_range(2..15);
        let raw: Vec<Vec<Option<u8>>> = (0..units)
            .map(|_| (0..3).map(|_| rng.random_bool(0.85).then(|| rng.random_range(0..5u8))).collect())
            .collect();
        let labelled = |labels: &[&str]| {
            let mut input = ReliabilityInput::new(Metric::Nominal);
            for (u, row) in raw.iter().enumerate() {
                for (c, v) in row.iter().enumerate() {
                    if let Some(v) = v {
                        input.add(format!("u{u}"), format!("c{c}"), labels[*v as usize]);
                    }
                }
            }
            krippendorff_alpha(&input)
        };
        let (scale, shift) = (rng.random_range(0.25..8.0), rng.random_range(-50.0..50.0));
        let numeric = |f: &dyn Fn(f64) -> f64| {
            let rows: Vec<Vec<Option<f64>>> = raw
                .iter()
                .map(|r| r.iter().map(|v| v.map(|v| f(f64::from(v)))).collect())
                .collect();
            krippendorff_alpha(&ReliabilityInput::from_table(Metric::Interval, &rows))
        };
        for (x, y) in [
            (labelled(&names), labelled(&renamed)),
            (numeric(&|v| v), numeric(&|v| scale * v + shift)),
        ] {
            match (x, y) {
                (Ok(x), Ok(y)) => {
                    assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
                    checked += 1;
                }
                (x, y) => assert_eq!(x, y),
            }
        }
    }
    format!("perfect = 1.0, 6 fixture values within 1e-9 of oracle, {checked} invariance pairs within 1e-12")
}

const ALPHABET: &[char] = &['a', 'b', 'c', 'é', '→', ' ', '\n'];

fn random_kind(rng: &mut ChaCha8Rng, len: usize) -> OpKind {
    if len == 0 || rng.random_bool(0.6) {
        let n = rng.random_range(1..=3);
        let text: String = (0..n).map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())]).collect();
        OpKind::insert(rng.random_range(0..=len), text)
    } else {
        let offset = rng.random_range(0..len);
        OpKind::delete(offset, rng.random_range(1..=(len - offset).min(4)))
    }
}

/// Three clients edit one block through the service with randomly
/// interleaved delivery over FIFO channels.
fn ot_convergence() -> String {
    let cfg = Config::from_toml(&providers_toml(0)).unwrap();
    let gateway = Arc::new(cfg.gateway().unwrap());
    let (clients, ops) = (3, 100);
    let mut revisions = 0;
    for seed in 0..200u64 {
        let log = MemoryLog::new();
        let svc = Service::open(Box::new(log.clone()), gateway.clone(), options()).unwrap();
        let doc = svc
            .create_prompt(
                "ana",
                NewPrompt {
                    title: "shared".into(),
                    blocks: vec![NewBlock {
                        block_id: Some("b1".into()),
                        role: Role::User,
                        text: String::new(),
                    }],
                    ..NewPrompt::default()
                },
            )
            .unwrap()
            .doc_id;
        let start = svc.block_state(&doc, "b1").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut replicas: Vec<ClientReplica> = (0..clients)
            .map(|i| ClientReplica::new(format!("s{i}"), start.text.clone(), start.rev))
            .collect();
        let mut uplink: Vec<VecDeque<EditOp>> = vec![VecDeque::new(); clients];
        let mut downlink: Vec<VecDeque<Committed>> = vec![VecDeque::new(); clients];
        let mut remaining = vec![ops; clients];
        loop {
            let can_edit: Vec<usize> = (0..clients).filter(|&c| remaining[c] > 0).collect();
            let can_up: Vec<usize> = (0..clients).filter(|&c| !uplink[c].is_empty()).collect();
            let can_down: Vec<usize> = (0..clients).filter(|&c| !downlink[c].is_empty()).collect();
            if can_edit.is_empty() && can_up.is_empty() && can_down.is_empty() {
                break;
            }
            match rng.random_range(0..3) {
                0 if !can_edit.is_empty() => {
                    let c = can_edit[rng.random_range(0..can_edit.len())];
                    let kind = random_kind(&mut rng, char_len(replicas[c].text()));
                    if let Some(op) = replicas[c].local_edit(kind).unwrap() {
                        uplink[c].push_back(op);
                    }
                    remaining[c] -= 1;
                }
                1 if !can_up.is_empty() => {
                    let c = can_up[rng.random_range(0..can_up.len())];
                    let op = uplink[c].pop_front().unwrap();
                    for committed in svc.edit(&format!("user-{c}"), &doc, "b1", op).unwrap() {
                        for d in downlink.iter_mut() {
                            d.push_back(committed.clone());
                        }
                    }
                }
                2 if !can_down.is_empty() => {
                    let c = can_down[rng.random_range(0..can_down.len())];
                    let committed = downlink[c].pop_front().unwrap();
                    if let Some(op) = replicas[c].receive(committed.rev, &committed.op).unwrap() {
                        uplink[c].push_back(op);
                    }
                }
                _ => {}
            }
        }
        let server = svc.block_state(&doc, "b1").unwrap();
        svc.with_state(|s| {
            let block = s.prompts[&doc].block("b1").unwrap();
            let ops = block.log.ops_since(0);
            assert_eq!(replay(ops).unwrap(), server.text, "seed {seed}");
            for rev in 0..=block.log.head_rev() {
                let prefix = replay(&ops[..rev as usize]).unwrap();
                assert_eq!(block.log.text_at(rev).unwrap(), prefix, "seed {seed} rev {rev}");
            }
        });
        for r in &replicas {
            assert!(r.is_settled(), "seed {seed}");
            assert_eq!(r.text(), server.text, "seed {seed} {}", r.session_id());
            assert_eq!(r.last_rev(), server.rev, "seed {seed}");
        }
        // Rebuilding from the event log lands on the same text.
        let reopened = Service::open(Box::new(log.clone()), gateway.clone(), options()).unwrap();
        assert_eq!(reopened.block_state(&doc, "b1").unwrap(), server, "seed {seed}");
        assert_eq!(reopened.digest(), svc.digest(), "seed {seed}");
        revisions += server.rev;
    }
    format!("200 seeds x 3 clients x 100 ops converged, {revisions} revisions, all prefixes replay")
}

fn budget_safety() -> String {
    let fx = pipeline_fixture(10, 2, &MODELS, BUCKETS, 0);
    let (cfg, spec) = load(&fx);
    let svc = pipeline::open_service(&cfg, false, Some(fixed_clock())).unwrap();
    let mut prompt_ids = Vec::new();
    for p in &spec.prompts {
        prompt_ids.push(svc.import_prompt("ana", &std::fs::read_to_string(p).unwrap()).unwrap().doc_id);
    }
    let raw = std::fs::read_to_string(&spec.dataset).unwrap();
    let dataset = svc
        .import_dataset("ana", &raw, "threads", promptloop_core::dataset::TableFormat::Csv)
        .unwrap();
    let request = |cap: Option<u64>| PlanRequest {
        prompt_ids: prompt_ids.clone(),
        model_ids: MODELS.iter().map(|m| m.to_string()).collect(),
        dataset_id: dataset.dataset_id.clone(),
        params: GenerationParams::default(),
        budget_cap: cap,
    };
    let preview = svc.plan_batch("ana", request(None)).unwrap();
    let estimated = preview.estimated_cost;
    let cheapest = preview.tasks.iter().map(|t| t.estimate).min().unwrap();

    let mut caps = vec![0, 1, cheapest - 1, cheapest, estimated / 3, estimated / 2, estimated - 1, estimated, estimated + 1];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    caps.extend((0..30).map(|_| rng.random_range(0..=estimated + estimated / 10)));
    let mut paused = 0;
    for cap in &caps {
        let plan = svc.plan_batch("ana", request(Some(*cap))).unwrap();
        svc.start_batch("ana", &plan.plan_id).unwrap();
        let job = svc.wait_batch(&plan.plan_id).unwrap();
        assert!(
            matches!(job.state, JobState::Completed | JobState::PausedBudget),
            "cap {cap}: {:?}",
            job.state
        );
        assert!(job.spent <= *cap, "cap {cap}: spent {}", job.spent);
        let (header, rows) = csv_records(&svc.export_batch(&plan.plan_id, ExportFormat::Csv).unwrap());
        let cost_col = column(&header, "cost_microusd");
        let sum: u64 = rows.iter().map(|r| r[cost_col].parse::<u64>().unwrap()).sum();
        assert_eq!(sum, job.spent, "cap {cap}");
        if *cap == 0 {
            assert_eq!(svc.outputs_since(&plan.plan_id, 0).unwrap().0.len(), 0);
            assert_eq!(job.spent, 0);
        }
        if *cap >= estimated {
            assert_eq!(job.state, JobState::Completed, "cap {cap}");
        } else {
            paused += 1;
            assert_eq!(job.state, JobState::PausedBudget, "cap {cap}");
        }
    }
    format!("{} caps, spent <= cap every time, {paused} paused at budget, cap 0 gave no outputs", caps.len())
}

fn blinding() -> String {
    let fx = pipeline_fixture(50, 2, &MODELS, &format!("{BUCKETS}{}", scripted(&RATERS, 0.15)), 0);
    let (cfg, spec) = load(&fx);
    let (job_id, scenarios, forbidden) = {
        let svc = pipeline::open_service(&cfg, true, Some(fixed_clock())).unwrap();
        let run = pipeline::run(svc, &spec).unwrap();
        let svc = run.service;
        assert_eq!(run.summary.outputs_done, 200);
        let humans = || vec![Evaluator::human("rater-1"), Evaluator::human("rater-2")];
        let llm = Evaluator {
            evaluator_id: "llm-1".into(),
            kind: promptloop_core::evaluation::EvaluatorKind::Llm,
            model_id: Some(JUDGE.into()),
        };
        let mut scenarios = vec![];
        for eval_type in [EvaluationType::default_buckets(), EvaluationType::mail_rating()] {
            let sc = svc.scenario_from_batch("ana", &run.job_id, eval_type).unwrap().scenario_id;
            let mut evaluators = humans();
            evaluators.push(llm.clone());
            svc.assign("ana", &sc, evaluators, Coverage::All).unwrap();
            scenarios.push(sc);
        }
        let forbidden: BTreeSet<String> = svc.with_state(|s| {
            let job = &s.jobs[&run.job_id];
            let mut f: BTreeSet<String> = job.plan.model_ids.iter().cloned().collect();
            f.extend(job.plan.prompts.iter().map(|p| p.version.doc_id.clone()));
            f.insert(run.job_id.clone());
            f.insert(job.plan.dataset_id.clone());
            f.extend(s.datasets[&job.plan.dataset_id].items.iter().map(|i| i.item_id.clone()));
            f.extend(job.outputs.iter().map(|o| o.output_id.clone()));
            f
        });
        (run.job_id, scenarios, forbidden)
    };

    let tokens = fx.path("tokens.toml");
    write(fx.dir.path(), "tokens.toml", TOKENS);
    let server = Server::start(&fx.config, &tokens);
    let mut corpus = Vec::new();
    let mut presentations = 0;
    for sc in &scenarios {
        for rater in ["rater-1", "rater-2"] {
            let token = format!("{rater}-token");
            let (status, body) = server.get(&format!("/scenarios/{sc}/queue"), &token);
            assert_eq!(status, 200, "{body}");
            let queue: Vec<Value> = serde_json::from_str(&body).unwrap();
            presentations += queue.len();
            corpus.push(body);
            // Submitting echoes only blinded fields.
            let first = &queue[0];
            let payload = match first["config"]["kind"].as_str().unwrap() {
                "bucket_ranking" => {
                    let placements: Vec<Value> = first["group"]
                        .as_array()
                        .unwrap()
                        .iter()
                        .enumerate()
                        .map(|(i, m)| json!({"eval_item_id": m["eval_item_id"], "bucket": "top", "rank": i + 1}))
                        .collect();
                    json!({"kind": "buckets", "placements": placements})
                }
                _ => json!({"kind": "rating", "scores": {"empathy": 4, "clarity": 4, "appropriateness": 5, "overall": 4}}),
            };
            let (status, body) = server.post(
                &format!("/scenarios/{sc}/assessments"),
                &token,
                json!({"target_id": first["eval_item_id"], "payload": payload}),
            );
            assert_eq!(status, 201, "{body}");
            corpus.push(body);
        }
        // What the judge model would be sent.
        let (status, body) = server.get(&format!("/scenarios/{sc}/queue?evaluator_id=llm-1"), "owner-token");
        assert_eq!(status, 200);
        let queue: Vec<promptloop_core::evaluation::Presentation> = serde_json::from_str(&body).unwrap();
        for p in &queue {
            corpus.push(render_rubric(DEFAULT_RUBRIC, p).unwrap());
        }
        corpus.push(body);
    }
    let leaks: Vec<&String> = forbidden.iter().filter(|v| corpus.iter().any(|c| c.contains(v.as_str()))).collect();
    assert!(leaks.is_empty(), "provenance values visible to evaluators: {leaks:?}");

    let sc = &scenarios[0];
    let denied = [
        format!("/scenarios/{sc}/provenance"),
        format!("/scenarios/{sc}/provenance?format=csv"),
        format!("/scenarios/{sc}/export"),
        format!("/scenarios/{sc}/export?format=structured"),
        format!("/scenarios/{sc}/agreement"),
        format!("/scenarios/{sc}/summary"),
        format!("/scenarios/{sc}"),
        format!("/scenarios/{sc}/queue?evaluator_id=rater-2"),
        format!("/batches/{job_id}"),
        format!("/batches/{job_id}/outputs"),
        format!("/batches/{job_id}/export?format=csv"),
        format!("/batches/{job_id}/export?format=structured"),
        "/prompts".to_string(),
        "/admin/state".to_string(),
    ];
    for path in &denied {
        let (status, body) = server.get(path, "rater-1-token");
        assert_eq!(status, 403, "{path}: {body}");
    }
    for path in &denied[..4] {
        assert_eq!(server.get(path, "owner-token").0, 200, "{path}");
    }
    format!(
        "{presentations} presentations and {} payloads scanned for {} provenance values, none found; {} evaluator requests refused",
        corpus.len(),
        forbidden.len(),
        denied.len()
    )
}

fn provenance_report() -> String {
    let fx = pipeline_fixture(50, 2, &MODELS, &format!("{BUCKETS}{}", scripted(&RATERS, 0.15)), 0);
    let run = run_in_memory(&fx);
    let svc = &run.service;
    let sc = svc
        .scenario_from_batch("ana", &run.job_id, EvaluationType::default_buckets())
        .unwrap()
        .scenario_id;
    svc.assign("ana", &sc, RATERS.iter().map(|r| Evaluator::human(*r)).collect(), Coverage::All)
        .unwrap();
    // Owner-side map from opaque item id to its combination.
    let combos: BTreeMap<String, (String, String)> = svc.with_state(|s| {
        s.scenarios[&sc]
            .items
            .iter()
            .map(|i| {
                let p = i.provenance.as_ref().unwrap();
                (i.eval_item_id.clone(), (p.model_id.clone(), p.prompt.doc_id.clone()))
            })
            .collect()
    });

    // Raters favour the declared pair and place the rest at random.
    let buckets = ["top", "mid", "low"];
    for (r, rater) in RATERS.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + r as u64);
        for p in svc.queue(&sc, rater).unwrap() {
            let mut ranks: BTreeMap<&str, usize> = BTreeMap::new();
            let placements = p
                .group
                .as_ref()
                .unwrap()
                .iter()
                .map(|m| {
                    let (model, doc) = &combos[&m.eval_item_id];
                    let favoured = model == BEST_MODEL && doc == BEST_PROMPT;
                    let bucket = if favoured {
                        if rng.random_bool(0.85) { "top" } else { "mid" }
                    } else {
                        buckets[rng.random_range(0..3)]
                    };
                    let rank = ranks.entry(bucket).or_insert(0);
                    *rank += 1;
                    BucketPlacement {
                        eval_item_id: m.eval_item_id.clone(),
                        bucket: bucket.into(),
                        rank: *rank,
                    }
                })
                .collect();
            svc.submit_assessment(rater, &sc, rater, &p.eval_item_id, Payload::Buckets { placements })
                .unwrap();
        }
    }

    // Recount from the exported CSV.
    let (header, rows) = csv_records(&svc.export_assessments(&sc, ExportFormat::Csv).unwrap());
    let (item_col, bucket_col) = (column(&header, "eval_item_id"), column(&header, "bucket"));
    let mut tally: BTreeMap<(String, String), BTreeMap<String, u64>> = BTreeMap::new();
    for row in &rows {
        *tally
            .entry(combos[&row[item_col]].clone())
            .or_default()
            .entry(row[bucket_col].clone())
            .or_default() += 1;
    }
    let report = svc.provenance(&sc).unwrap();
    assert_eq!(report.ranking.len(), 4);
    assert_eq!(tally.len(), 4);
    for stats in &report.ranking {
        let key = (stats.combination.model_id.clone(), stats.combination.prompt.doc_id.clone());
        let counts = &tally[&key];
        let expected: Vec<(String, u64)> = buckets
            .iter()
            .map(|b| (b.to_string(), counts.get(*b).copied().unwrap_or(0)))
            .collect();
        assert_eq!(stats.bucket_distribution, expected, "{key:?}");
        let total: u64 = counts.values().sum();
        let hits = counts.get("top").copied().unwrap_or(0);
        assert_eq!((stats.top_bucket_hits, stats.total), (hits, total), "{key:?}");
        assert_eq!(stats.hit_rate, HitRate { hits, total }, "{key:?}");
    }
    for pair in report.ranking.windows(2) {
        assert!(pair[0].hit_rate.as_f64() >= pair[1].hit_rate.as_f64());
    }
    let best = report.best().unwrap();
    assert_eq!(
        (best.combination.model_id.as_str(), best.combination.prompt.doc_id.as_str()),
        (BEST_MODEL, BEST_PROMPT)
    );
    format!(
        "{} exported rows recounted, 4 combinations match, head {BEST_MODEL}/{BEST_PROMPT} at {}/{}",
        rows.len(),
        best.top_bucket_hits,
        best.total
    )
}

fn durability() -> String {
    let fx = pipeline_fixture(60, 2, &MODELS, BUCKETS, 40);
    write(fx.dir.path(), "tokens.toml", TOKENS);
    let tokens = fx.path("tokens.toml");

    // Set up through the command line.
    let ds = cli(&fx, &["import-dataset", "--file", fx.path("threads.csv").to_str().unwrap()]);
    for (id, _, _) in PROMPTS {
        cli(&fx, &["import-prompt", "--file", fx.path(&format!("{id}.json")).to_str().unwrap()]);
    }
    let plan = cli(
        &fx,
        &[
            "plan",
            "--prompt-id",
            "reply-polite,reply-brief",
            "--model-id",
            "model-alpha,model-beta",
            "--dataset-id",
            ds["dataset_id"].as_str().unwrap(),
        ],
    );
    assert_eq!(plan["task_count"], 240);
    let job = plan["job_id"].as_str().unwrap().to_string();
    let owner = "owner-token";
    let job_path = format!("/batches/{job}");
    let state = |s: &Server| s.get_json("/admin/state", owner);

    // Pause part-way, then kill -9: the restart replays to the same state.
    let mut server = Server::start(&fx.config, &tokens);
    server.post_json(&format!("{job_path}/start"), owner, json!({}));
    wait_until("40 outputs", Duration::from_secs(60), || {
        server.get_json(&job_path, owner)["done"].as_u64().unwrap() >= 40
    });
    server.post_json(&format!("{job_path}/pause"), owner, json!({}));
    let mut last = state(&server);
    wait_until("quiescence", Duration::from_secs(30), || {
        std::thread::sleep(Duration::from_millis(200));
        let now = state(&server);
        std::mem::replace(&mut last, now.clone()) == now
    });
    let paused = server.get_json(&job_path, owner);
    assert_eq!(paused["state"], "paused_user");
    server.kill();
    let mut server = Server::start(&fx.config, &tokens);
    assert_eq!(state(&server), last, "state after restart differs from the paused state");

    // Resume and kill mid-flight.
    server.post_json(&format!("{job_path}/resume"), owner, json!({}));
    let floor = paused["done"].as_u64().unwrap() + 30;
    wait_until("progress", Duration::from_secs(60), || {
        server.get_json(&job_path, owner)["done"].as_u64().unwrap() >= floor
    });
    let (status, body) = server.get(&format!("{job_path}/outputs"), owner);
    assert_eq!(status, 200);
    let acknowledged: Vec<Value> = body.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    server.kill();
    assert!(acknowledged.len() < 240, "batch finished before the kill");

    // The restarted server resumes the job by itself.
    let server = Server::start(&fx.config, &tokens);
    wait_until("completion", Duration::from_secs(60), || {
        server.get_json(&job_path, owner)["state"] == "completed"
    });
    let summary = server.get_json(&job_path, owner);
    let (_, body) = server.get(&format!("{job_path}/outputs"), owner);
    let outputs: Vec<Value> = body.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(outputs.len(), 240);
    let tasks: BTreeSet<u64> = outputs.iter().map(|o| o["task_index"].as_u64().unwrap()).collect();
    assert_eq!(tasks, (0..240).collect::<BTreeSet<u64>>(), "duplicate or missing tasks");
    let ids: BTreeSet<&str> = outputs.iter().map(|o| o["output_id"].as_str().unwrap()).collect();
    assert_eq!(ids.len(), 240);
    let by_id: BTreeMap<&str, &Value> = outputs.iter().map(|o| (o["output_id"].as_str().unwrap(), o)).collect();
    for a in &acknowledged {
        let b = by_id[a["output_id"].as_str().unwrap()];
        assert_eq!((&a["text"], &a["usage"]["cost"]), (&b["text"], &b["usage"]["cost"]), "{}", a["output_id"]);
    }
    let spent: u64 = outputs.iter().map(|o| o["usage"]["cost"].as_u64().unwrap()).sum();
    assert_eq!(summary["spent"].as_u64().unwrap(), spent);

    // An offline replay of the data directory agrees with the server.
    let final_state = state(&server);
    drop(server);
    let mut cfg = Config::load(Some(&fx.config)).unwrap();
    cfg.resume_running_jobs = false;
    let replayed = Service::open_with_config(&cfg, None).unwrap();
    assert_eq!(replayed.digest(), final_state["digest"].as_str().unwrap());
    format!(
        "paused state identical after kill -9; mid-flight kill at {} of 240 acknowledged, finished with 240 unique outputs and none lost",
        acknowledged.len()
    )
}
