use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use planloop_core::audit::verify_file;
use planloop_core::docmodel::load_bundle;
use planloop_core::evalharness::{baseline_predictions, generate_fixtures, generate_synthetic_corpus, run_comparison_with_baseline, run_comparison_with_provider, ComparisonConfigs};
use planloop_core::pipeline::{ScriptedProvider, TaskKind, ENV_PROVIDER_URL};
use planloop_core::review::{ReviewAction, ReviewState};
use planloop_core::roi::{bundled_scenario, RoiInputs};
use planloop_service::{Engine, ProviderChoice, ServiceConfig, ServiceError, TaskRequest, DEFAULT_DATA_DIR, ENV_DATA_DIR, ENV_MOCK_PROVIDER};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "planloop", version, about = "Review-gated document processing for planning applications")]
struct Cli {
    /// Directory holding bundles, logs and job results.
    #[arg(long, global = true, env = ENV_DATA_DIR, default_value = DEFAULT_DATA_DIR)]
    data_dir: PathBuf,
    /// Answer provider calls from a fixtures directory instead of the network.
    #[arg(long, global = true, env = ENV_MOCK_PROVIDER)]
    mock_provider: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stores a bundle directory or .plb archive as revision 0.
    Ingest {
        path: PathBuf,
        #[command(flatten)]
        op: Operator,
    },
    /// Runs one task against a document and queues its suggestions.
    Run {
        #[arg(long)]
        task: TaskKind,
        #[arg(long)]
        doc: String,
        /// Restrict a visual_detection run to these rules.
        #[arg(long, value_delimiter = ',')]
        rules: Option<Vec<String>>,
        #[command(flatten)]
        op: Operator,
    },
    /// Lists review items and records review decisions.
    #[command(subcommand)]
    Review(Review),
    /// Redacts and commits approved PII items of a document.
    Commit {
        #[arg(long)]
        doc: String,
        /// Commit only these items. Defaults to every open PII item.
        #[arg(long, value_delimiter = ',')]
        items: Option<Vec<String>>,
        #[command(flatten)]
        op: Operator,
    },
    /// Verifies or shows the audit log.
    #[command(subcommand)]
    Audit(Audit),
    /// Runs the evaluation harness.
    #[command(subcommand)]
    Eval(Eval),
    /// Computes return on investment for a scenario.
    Roi {
        #[arg(long, conflicts_with = "file", required_unless_present = "file")]
        scenario: Option<String>,
        /// Scenario file in TOML.
        #[arg(long)]
        file: Option<PathBuf>,
    },
    /// Serves the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
    },
}

#[derive(Args)]
struct Operator {
    #[arg(long = "operator", env = "PLANLOOP_OPERATOR")]
    id: String,
}

#[derive(Subcommand)]
enum Review {
    /// Lists a document's items, in queue order with --queue.
    List {
        #[arg(long)]
        doc: String,
        #[arg(long)]
        queue: bool,
    },
    Confirm(Transition),
    Reject(Transition),
    /// Replaces an item's value.
    Edit {
        #[command(flatten)]
        t: Transition,
        value: String,
    },
}

#[derive(Args)]
struct Transition {
    item: String,
    /// Refuse unless the item is currently in this state.
    #[arg(long, value_parser = parse_state)]
    expect: Option<ReviewState>,
    #[command(flatten)]
    op: Operator,
}

#[derive(Subcommand)]
enum Audit {
    /// Checks the hash chain and head anchor of an audit log.
    Verify {
        /// Defaults to the data directory's log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Prints the events of one document.
    Show {
        #[arg(long)]
        doc: String,
        #[arg(long)]
        action: Option<String>,
    },
}

#[derive(Subcommand)]
enum Eval {
    /// Scores the classical baseline against the proposed pipeline on a
    /// synthetic corpus and prints the comparison table.
    Run {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        n: usize,
        /// Fixture corruption probability.
        #[arg(long, default_value_t = 0.08, value_parser = parse_fraction)]
        corruption: f64,
        /// Also write the table as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Writes provider fixtures for a synthetic corpus.
    Fixtures {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0.08, value_parser = parse_fraction)]
        corruption: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_state(s: &str) -> Result<ReviewState, String> {
    let all = [ReviewState::Suggested, ReviewState::Confirmed, ReviewState::Rejected, ReviewState::Edited, ReviewState::Committed];
    all.into_iter().find(|st| st.to_string().eq_ignore_ascii_case(s)).ok_or_else(|| format!("{s:?} is not a review state"))
}

fn parse_fraction(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside 0..=1"))
    }
}

/// A failure with a stable code and exit status.
struct Failure {
    code: String,
    exit: u8,
    message: String,
}

impl Failure {
    fn new(code: &str, exit: u8, message: impl Into<String>) -> Self {
        Failure { code: code.into(), exit, message: message.into() }
    }
}

impl From<ServiceError> for Failure {
    fn from(e: ServiceError) -> Self {
        let exit = match e.status().as_u16() {
            400 => 10,
            404 => 4,
            409 => 5,
            422 => 6,
            503 => 7,
            _ => 1,
        };
        let body = e.body();
        let message = if body.details.is_null() { body.message } else { format!("{}\n{}", body.message, serde_json::to_string_pretty(&body.details).unwrap_or_default()) };
        Failure { code: body.code, exit, message }
    }
}

type Outcome = Result<(), Failure>;

fn print_json<T: Serialize>(v: &T) -> Outcome {
    println!("{}", serde_json::to_string_pretty(v).map_err(|e| Failure::new("internal_error", 1, e.to_string()))?);
    Ok(())
}

fn open_engine(cli: &Cli) -> Result<Engine, Failure> {
    let mut config = ServiceConfig::new(&cli.data_dir);
    config.provider = match &cli.mock_provider {
        Some(dir) => ProviderChoice::Mock(dir.clone()),
        None if std::env::var_os(ENV_PROVIDER_URL).is_some() => ProviderChoice::Http,
        None => ProviderChoice::None,
    };
    Ok(Engine::open(config)?)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error[{}]: {}", f.code, f.message);
            ExitCode::from(f.exit)
        }
    }
}

fn dispatch(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::Ingest { path, op } => {
            let bundle = load_bundle(path).map_err(ServiceError::from)?;
            print_json(&open_engine(cli)?.ingest(&bundle, &op.id)?)
        }
        Command::Run { task, doc, rules, op } => {
            let engine = open_engine(cli)?;
            let job = engine.run_task_direct(doc, &TaskRequest { task_kind: *task, rule_ids: rules.clone() }, &op.id)?;
            let failed = job.error.clone();
            print_json(&job)?;
            match failed {
                Some(e) => Err(Failure::new(&e.code, 8, format!("job {} failed: {}", job.job_id, e.message))),
                None => Ok(()),
            }
        }
        Command::Review(r) => review(cli, r),
        Command::Commit { doc, items, op } => print_json(&open_engine(cli)?.commit(doc, &op.id, items.as_deref())?),
        Command::Audit(Audit::Verify { log }) => verify(&log.clone().unwrap_or_else(|| cli.data_dir.join("audit.log"))),
        Command::Audit(Audit::Show { doc, action }) => print_json(&open_engine(cli)?.audit_events(doc, action.as_deref())?),
        Command::Eval(e) => eval(cli, e),
        Command::Roi { scenario, file } => {
            let inputs = match (scenario, file) {
                (Some(name), _) => bundled_scenario(name).ok_or_else(|| Failure::new("not_found", 4, format!("no bundled scenario {name:?}; try authorityA")))?,
                (None, Some(path)) => RoiInputs::load(path).map_err(|e| Failure::new("invalid_roi_inputs", 6, e.to_string()))?,
                (None, None) => unreachable!("clap requires one of --scenario or --file"),
            };
            print_json(&Engine::roi(&inputs)?)
        }
        Command::Serve { bind } => serve(cli, bind),
    }
}

fn review(cli: &Cli, r: &Review) -> Outcome {
    let engine = open_engine(cli)?;
    let (t, action) = match r {
        Review::List { doc, queue } => return print_json(&if *queue { engine.queue(doc)? } else { engine.items(doc)? }),
        Review::Confirm(t) => (t, ReviewAction::Confirm),
        Review::Reject(t) => (t, ReviewAction::Reject),
        Review::Edit { t, value } => (t, ReviewAction::Edit(value.clone())),
    };
    print_json(&engine.transition(&t.item, &action, &t.op.id, t.expect)?)
}

fn verify(path: &Path) -> Outcome {
    let report = verify_file(path).map_err(|e| Failure::new("storage_error", 1, format!("{}: {e}", path.display())))?;
    print_json(&report)?;
    if report.intact() {
        return Ok(());
    }
    let message = match (&report.first_break, report.truncated) {
        (Some(b), _) => format!("audit chain broken at seq {}: {}", b.seq, b.reason),
        (None, true) => format!("audit log truncated: head anchor records more than the {} events present", report.events),
        (None, false) => "audit log does not match its head anchor".to_string(),
    };
    Err(Failure::new("audit_broken", 3, message))
}

fn eval(cli: &Cli, e: &Eval) -> Outcome {
    let invalid = |m: String| Failure::new("invalid_arguments", 2, m);
    match e {
        Eval::Run { seed, n, corruption, report } => {
            let corpus = generate_synthetic_corpus(*seed, *n).map_err(|e| invalid(e.to_string()))?;
            let per_mille = (corruption * 1000.0).round() as u32;
            let configs = ComparisonConfigs::bundled();
            let base = baseline_predictions(&corpus).map_err(|e| Failure::new("eval_failed", 1, e.to_string()))?;
            let table = match &cli.mock_provider {
                Some(dir) => {
                    let provider = ScriptedProvider::from_dir(dir).map_err(|e| Failure::new("provider_error", 1, format!("{}: {e}", dir.display())))?;
                    run_comparison_with_provider(&corpus, &base, &provider, per_mille, &configs)
                }
                None => run_comparison_with_baseline(&corpus, &base, &generate_fixtures(&corpus, per_mille), &configs),
            }
            .map_err(|e| Failure::new("eval_failed", 1, e.to_string()))?;
            print!("{}", table.to_tsv());
            if let Some(path) = report {
                let json = serde_json::to_vec_pretty(&table).map_err(|e| Failure::new("internal_error", 1, e.to_string()))?;
                std::fs::write(path, json).map_err(|e| Failure::new("storage_error", 1, format!("{}: {e}", path.display())))?;
            }
            Ok(())
        }
        Eval::Fixtures { seed, n, corruption, out } => {
            let corpus = generate_synthetic_corpus(*seed, *n).map_err(|e| invalid(e.to_string()))?;
            let fixtures = generate_fixtures(&corpus, (corruption * 1000.0).round() as u32);
            fixtures.write(out).map_err(|e| Failure::new("storage_error", 1, format!("{}: {e}", out.display())))?;
            eprintln!("wrote fixtures for {} documents to {}", fixtures.docs.len(), out.display());
            Ok(())
        }
    }
}

fn serve(cli: &Cli, bind: &str) -> Outcome {
    // The HTTP provider blocks, so the engine is built outside the runtime.
    let engine = Arc::new(open_engine(cli)?);
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(|e| Failure::new("internal_error", 1, e.to_string()))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(bind).await.map_err(|e| Failure::new("bind_failed", 1, format!("{bind}: {e}")))?;
        let addr = listener.local_addr().map(|a| a.to_string()).unwrap_or_else(|_| bind.to_string());
        eprintln!("listening on http://{addr}/api/v1 (data in {})", cli.data_dir.display());
        planloop_service::serve(engine, listener).await.map_err(|e| Failure::new("serve_failed", 1, e.to_string()))
    })
}
