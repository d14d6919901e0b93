use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use promptloop_cli::pipeline::{self, PipelineSpec, ACTOR};
use promptloop_cli::{check_job, parse_eval_type, Failure, EXIT_OK};
use promptloop_core::analytics::Metric;
use promptloop_core::batch::{ExportFormat, JobState};
use promptloop_core::dataset::TableFormat;
use promptloop_core::evaluation::{Coverage, Evaluator, EvaluatorKind, NewEvalItem};
use promptloop_core::provider::GenerationParams;
use promptloop_service::auth::Auth;
use promptloop_service::config::Config;
use promptloop_service::service::PlanRequest;
use promptloop_service::Service;
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "promptloop", version, about = "Prompt authoring, batch generation and blinded evaluation")]
struct Cli {
    /// Service config file (TOML).
    #[arg(long, global = true, env = "PROMPTLOOP_CONFIG")]
    config: Option<PathBuf>,
    /// Overrides the configured data directory.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP API and sync server.
    Serve {
        #[arg(long)]
        listen: Option<String>,
        #[arg(long)]
        token_file: Option<PathBuf>,
    },
    /// Import a CSV or JSON records table.
    ImportDataset {
        #[arg(long)]
        file: PathBuf,
        /// Defaults to the file stem.
        #[arg(long)]
        name: Option<String>,
        /// csv or records; guessed from the extension when absent.
        #[arg(long)]
        format: Option<String>,
    },
    /// Import a prompt file in the export format.
    ImportPrompt {
        #[arg(long)]
        file: PathBuf,
    },
    /// Plan a batch and print the cost preview.
    Plan {
        #[arg(long = "prompt-id", required = true, value_delimiter = ',')]
        prompt_ids: Vec<String>,
        #[arg(long = "model-id", required = true, value_delimiter = ',')]
        model_ids: Vec<String>,
        #[arg(long)]
        dataset_id: String,
        /// Generation parameters as JSON.
        #[arg(long)]
        params: Option<String>,
        /// µUSD.
        #[arg(long)]
        budget_cap: Option<u64>,
    },
    /// Start or resume a batch and wait until it stops.
    RunBatch {
        #[arg(long)]
        job_id: String,
        /// New cap in µUSD when resuming, or `none` to lift it.
        #[arg(long)]
        budget_cap: Option<String>,
    },
    /// Export batch outputs or scenario assessments.
    Export {
        #[command(flatten)]
        target: Target,
        /// csv or structured.
        #[arg(long, default_value = "csv")]
        format: String,
        /// Writes to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Create an evaluation scenario from a batch or from an item file.
    MakeScenario {
        #[arg(long, conflicts_with = "items", required_unless_present = "items")]
        job_id: Option<String>,
        /// JSON array of {content, group?, provenance?}.
        #[arg(long)]
        items: Option<PathBuf>,
        /// Preset (buckets, mail_rating, ranking, pairwise, authenticity) or JSON.
        #[arg(long, default_value = "buckets")]
        eval_type: String,
    },
    /// Assign evaluators to a scenario.
    Assign {
        #[arg(long)]
        scenario_id: String,
        #[arg(long = "human")]
        humans: Vec<String>,
        /// `evaluator_id=model_id`.
        #[arg(long = "llm")]
        llms: Vec<String>,
        /// `all` or the number of evaluators per item.
        #[arg(long, default_value = "all")]
        coverage: String,
    },
    /// Let an LLM evaluator work through its queue.
    RunLlmEval {
        #[arg(long)]
        scenario_id: String,
        #[arg(long)]
        evaluator_id: String,
        /// File holding the rubric text.
        #[arg(long)]
        rubric: Option<PathBuf>,
        #[arg(long)]
        params: Option<String>,
    },
    /// Print job, scenario and agreement figures.
    Stats {
        #[arg(long)]
        job_id: Option<String>,
        #[arg(long)]
        scenario_id: Option<String>,
        #[arg(long)]
        facet: Option<String>,
        /// nominal, ordinal or interval.
        #[arg(long)]
        metric: Option<String>,
    },
    /// Run import, batch and evaluation end to end from one file.
    Pipeline {
        file: PathBuf,
        /// Write events to the data directory instead of memory.
        #[arg(long)]
        persist: bool,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct Target {
    #[arg(long)]
    job_id: Option<String>,
    #[arg(long)]
    scenario_id: Option<String>,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn,promptloop=info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(f) => {
            eprintln!("error: {f}");
            if let Failure::BudgetPaused(job) | Failure::TasksFailed(job) = &f {
                let _ = print_json(job);
            }
            ExitCode::from(f.exit_code())
        }
    }
}

fn config(cli: &Cli, path: Option<&Path>) -> Result<Config, Failure> {
    let mut cfg = Config::load(path.or(cli.config.as_deref()))?;
    if let Some(d) = &cli.data_dir {
        cfg.data_dir = d.clone();
    }
    Ok(cfg)
}

fn open(cli: &Cli) -> Result<Service, Failure> {
    pipeline::open_service(&config(cli, None)?, true, None)
}

fn write_stdout(bytes: &[u8]) -> Result<(), Failure> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match out.write_all(bytes).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Failure::Usage(format!("stdout: {e}"))),
        _ => Ok(()),
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<(), Failure> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| Failure::Usage(e.to_string()))?;
    s.push('\n');
    write_stdout(s.as_bytes())
}

fn json_arg<T: DeserializeOwned + Default>(raw: Option<&str>, what: &str) -> Result<T, Failure> {
    match raw {
        None => Ok(T::default()),
        Some(s) => serde_json::from_str(s).map_err(|e| Failure::Usage(format!("{what}: {e}"))),
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Serve { listen, token_file } => {
            let mut cfg = config(&cli, None)?;
            if let Some(l) = listen {
                cfg.listen = l.clone();
            }
            if let Some(t) = token_file {
                cfg.token_file = Some(t.clone());
            }
            let token_file = cfg
                .token_file
                .clone()
                .ok_or_else(|| Failure::Usage("serve needs a token file (--token-file or PROMPTLOOP_TOKEN_FILE)".into()))?;
            let auth = Auth::from_file(&token_file)?;
            let svc = Service::open_with_config(&cfg, None)?;
            let rt = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()
                .map_err(|e| Failure::Usage(format!("runtime: {e}")))?;
            rt.block_on(promptloop_service::http::serve(&cfg.listen, svc, auth))
                .map_err(|e| Failure::Usage(format!("listen on {}: {e}", cfg.listen)))
        }
        Command::ImportDataset { file, name, format } => {
            let format = match format.as_deref() {
                Some("csv") => TableFormat::Csv,
                Some("records") | Some("json") => TableFormat::Records,
                Some(other) => return Err(Failure::Usage(format!("unknown dataset format {other}"))),
                None if file.extension().is_some_and(|e| e == "json") => TableFormat::Records,
                None => TableFormat::Csv,
            };
            let name = name.clone().unwrap_or_else(|| {
                file.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
            });
            let ds = open(&cli)?.import_dataset(ACTOR, &read(file)?, &name, format)?;
            print_json(&serde_json::json!({
                "dataset_id": ds.dataset_id,
                "name": ds.name,
                "columns": ds.columns,
                "item_count": ds.items.len(),
            }))
        }
        Command::ImportPrompt { file } => print_json(&open(&cli)?.import_prompt(ACTOR, &read(file)?)?),
        Command::Plan {
            prompt_ids,
            model_ids,
            dataset_id,
            params,
            budget_cap,
        } => {
            let params: GenerationParams = json_arg(params.as_deref(), "params")?;
            let plan = open(&cli)?.plan_batch(
                ACTOR,
                PlanRequest {
                    prompt_ids: prompt_ids.clone(),
                    model_ids: model_ids.clone(),
                    dataset_id: dataset_id.clone(),
                    params,
                    budget_cap: *budget_cap,
                },
            )?;
            print_json(&serde_json::json!({
                "job_id": plan.plan_id,
                "task_count": plan.tasks.len(),
                "estimated_cost": plan.estimated_cost,
                "budget_cap": plan.budget_cap,
            }))
        }
        Command::RunBatch { job_id, budget_cap } => {
            let cap = match budget_cap.as_deref() {
                None => None,
                Some("none") => Some(None),
                Some(n) => Some(Some(
                    n.parse::<u64>()
                        .map_err(|_| Failure::Usage(format!("budget cap {n} is not a number")))?,
                )),
            };
            let svc = open(&cli)?;
            let job = svc.job(job_id)?;
            match job.state {
                JobState::Planned => {
                    if cap.is_some() {
                        return Err(Failure::Usage("set the cap when planning".into()));
                    }
                    svc.start_batch(ACTOR, job_id)?;
                }
                JobState::PausedBudget | JobState::PausedUser => {
                    svc.resume_batch(ACTOR, job_id, cap)?;
                }
                // Opening the service already resumed it.
                _ => {}
            }
            let job = check_job(svc.wait_batch(job_id)?)?;
            print_json(&job)
        }
        Command::Export { target, format, out } => {
            let format: ExportFormat = format
                .parse()
                .map_err(|e: promptloop_core::batch::BatchError| Failure::Usage(e.to_string()))?;
            let svc = open(&cli)?;
            let bytes = match (&target.job_id, &target.scenario_id) {
                (Some(j), _) => svc.export_batch(j, format)?,
                (_, Some(s)) => svc.export_assessments(s, format)?,
                _ => unreachable!("clap requires one target"),
            };
            match out {
                Some(path) => std::fs::write(path, bytes).map_err(|e| Failure::Usage(format!("{}: {e}", path.display()))),
                None => write_stdout(&bytes),
            }
        }
        Command::MakeScenario {
            job_id,
            items,
            eval_type,
        } => {
            let eval_type = parse_eval_type(eval_type)?;
            let svc = open(&cli)?;
            let summary = match (job_id, items) {
                (Some(j), _) => svc.scenario_from_batch(ACTOR, j, eval_type)?,
                (None, Some(path)) => {
                    let items: Vec<NewEvalItem> = serde_json::from_str(&read(path)?)
                        .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
                    svc.create_scenario(ACTOR, eval_type, items)?
                }
                (None, None) => unreachable!("clap requires a source"),
            };
            print_json(&summary)
        }
        Command::Assign {
            scenario_id,
            humans,
            llms,
            coverage,
        } => {
            let mut evaluators: Vec<Evaluator> = humans.iter().map(Evaluator::human).collect();
            for spec in llms {
                let (id, model) = spec
                    .split_once('=')
                    .ok_or_else(|| Failure::Usage(format!("--llm {spec}: expected evaluator_id=model_id")))?;
                evaluators.push(Evaluator {
                    evaluator_id: id.into(),
                    kind: EvaluatorKind::Llm,
                    model_id: Some(model.into()),
                });
            }
            let coverage = match coverage.as_str() {
                "all" => Coverage::All,
                k => Coverage::KPerItem {
                    k: k.parse().map_err(|_| Failure::Usage(format!("coverage {k}: expected all or a number")))?,
                },
            };
            print_json(&open(&cli)?.assign(ACTOR, scenario_id, evaluators, coverage)?)
        }
        Command::RunLlmEval {
            scenario_id,
            evaluator_id,
            rubric,
            params,
        } => {
            let rubric = rubric.as_deref().map(read).transpose()?;
            let params: GenerationParams = json_arg(params.as_deref(), "params")?;
            let report = open(&cli)?.run_llm_evaluator(ACTOR, scenario_id, evaluator_id, rubric.as_deref(), params)?;
            print_json(&serde_json::json!({
                "submitted": report.submitted.len(),
                "skipped": report.skipped,
            }))
        }
        Command::Stats {
            job_id,
            scenario_id,
            facet,
            metric,
        } => {
            let metric: Option<Metric> = metric
                .as_deref()
                .map(|m| {
                    serde_json::from_value(serde_json::Value::String(m.into()))
                        .map_err(|_| Failure::Usage(format!("unknown metric {m}")))
                })
                .transpose()?;
            let svc = open(&cli)?;
            let mut out = serde_json::Map::new();
            if let Some(j) = job_id {
                out.insert("job".into(), serde_json::to_value(svc.job(j)?).expect("serializes"));
            }
            if let Some(s) = scenario_id {
                let summary = svc.scenario(s)?;
                let bucketed = summary.kind == "bucket_ranking";
                out.insert("scenario".into(), serde_json::to_value(summary).expect("serializes"));
                out.insert(
                    "agreement".into(),
                    serde_json::to_value(svc.agreement(s, facet.as_deref(), metric)?).expect("serializes"),
                );
                if bucketed {
                    out.insert(
                        "provenance".into(),
                        serde_json::to_value(svc.provenance(s)?).expect("serializes"),
                    );
                }
            }
            if job_id.is_none() && scenario_id.is_none() {
                out.insert("jobs".into(), serde_json::to_value(svc.jobs()).expect("serializes"));
                out.insert("scenarios".into(), serde_json::to_value(svc.scenarios()).expect("serializes"));
                out.insert("offset".into(), svc.offset().into());
            }
            print_json(&out)
        }
        Command::Pipeline { file, persist } => {
            let cfg = config(&cli, Some(file))?;
            let spec = PipelineSpec::load(file)?;
            let svc = pipeline::open_service(&cfg, *persist, None)?;
            let run = pipeline::run(svc, &spec)?;
            print_json(&run.summary)
        }
    }
}
