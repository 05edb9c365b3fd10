use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use crowdpipe::clock::{format_ts, SystemClock};
use crowdpipe::lineage::{Lineage, LineageEvent};
use crowdpipe::operators::{
    filtered_join, load_records, simple_join, token_jaccard, transitive_join, JoinOutcome,
    PairOrder,
};
use crowdpipe::persistence::replay;
use crowdpipe::platform::{
    simulate_workers, worker_pool, HttpPlatform, OfflinePlatform, Platform, PlatformError,
    ServerHandle, SimMode, TranscriptEntry, WorkerApi,
};
use crowdpipe::{CrowdContext, Presenter, RunConfig, TableView};
use serde_json::Value;

const DEFAULT_PLATFORM: &str = "http://127.0.0.1:7878";

#[derive(Parser)]
#[command(
    name = "crowdpipe",
    version,
    about = "Reproducible crowdsourced data-processing pipelines"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the embedded crowdsourcing platform over HTTP.
    Serve(ServeArgs),
    /// Run an example pipeline.
    #[command(subcommand)]
    Run(RunCommand),
    /// Let simulated workers answer pending tasks.
    Simulate(SimulateArgs),
    /// Query answer lineage from a store.
    Lineage(LineageArgs),
    /// Validate a store file and print its records.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 7878)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Names the platform state file `<project>.platform.cpdb`.
    #[arg(long, default_value = "crowdpipe")]
    project: String,
    /// Platform state file; overrides the name derived from --project.
    #[arg(long)]
    state: Option<PathBuf>,
    /// Keep platform state in memory only.
    #[arg(long, conflicts_with = "state")]
    in_memory: bool,
    /// Static worker UI served under /worker.
    #[arg(long)]
    worker_ui: Option<PathBuf>,
}

#[derive(Subcommand)]
enum RunCommand {
    /// Label images with Yes/No answers and aggregate them.
    ImageLabel(ImageLabelArgs),
    /// Find matching records with a crowd join.
    EntityResolution(EntityResolutionArgs),
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    project: Option<String>,
    /// Table name; defaults to the project name.
    #[arg(long)]
    table: Option<String>,
    /// Store file; defaults to $CROWDPIPE_DB, then ./<project>.cpdb.
    #[arg(long)]
    db: Option<PathBuf>,
    #[arg(long, default_value = DEFAULT_PLATFORM)]
    platform: String,
    /// Run from the store alone; any platform call fails.
    #[arg(long, conflicts_with = "platform")]
    offline: bool,
    /// Directory holding template.html and schema.json.
    #[arg(long)]
    presenter: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    assignments: u32,
    #[arg(long, default_value_t = 200)]
    poll_ms: u64,
    #[arg(long, default_value_t = 60)]
    timeout_secs: u64,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ImageLabelArgs {
    /// One object (URL) per line.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = Qc::Mv)]
    qc: Qc,
    #[command(flatten)]
    common: PipelineArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum Qc {
    Mv,
    Em,
}

#[derive(Args)]
struct EntityResolutionArgs {
    /// JSON-lines records (or CSV with a header row).
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum)]
    join: JoinKind,
    /// Similarity threshold for the filtered join.
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    /// Pair order for the transitive join.
    #[arg(long, value_enum, default_value_t = Order::Similarity)]
    order: Order,
    #[command(flatten)]
    common: PipelineArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum JoinKind {
    Simple,
    Filtered,
    Transitive,
}

#[derive(Clone, Copy, ValueEnum)]
enum Order {
    Similarity,
    Id,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    workers: usize,
    #[arg(long)]
    accuracy: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON object mapping object fingerprint to label.
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, default_value = DEFAULT_PLATFORM)]
    platform: String,
    /// Only this project; otherwise every project on the platform.
    #[arg(long)]
    project_id: Option<String>,
    /// Keep polling for new tasks until idle this long.
    #[arg(long, default_value_t = 0)]
    linger_ms: u64,
    #[arg(long, value_enum, default_value_t = Mode::Deterministic)]
    mode: Mode,
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Deterministic,
    Concurrent,
}

#[derive(Args)]
struct LineageArgs {
    #[arg(long)]
    project: String,
    #[arg(long)]
    db: Option<PathBuf>,
    /// History of one object, by fingerprint.
    #[arg(long, group = "query")]
    object: Option<String>,
    /// Everything one worker answered.
    #[arg(long, group = "query")]
    worker: Option<String>,
    #[arg(long, group = "query")]
    summary: bool,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    db: PathBuf,
    #[arg(long)]
    json: bool,
}

type Failure = Box<dyn std::error::Error>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::Serve(a) => serve(a),
        Command::Run(RunCommand::ImageLabel(a)) => image_label(a),
        Command::Run(RunCommand::EntityResolution(a)) => entity_resolution(a),
        Command::Simulate(a) => simulate(a),
        Command::Lineage(a) => lineage(a),
        Command::Replay(a) => replay_store(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn serve(a: ServeArgs) -> Result<(), Failure> {
    let clock = Arc::new(SystemClock);
    let platform = if a.in_memory {
        Platform::in_memory(clock)
    } else {
        let state = a
            .state
            .unwrap_or_else(|| PathBuf::from(format!("{}.platform.cpdb", a.project)));
        Platform::open(&state, clock)?
    };
    let addr: SocketAddr = format!("{}:{}", a.host, a.port).parse()?;
    let handle = ServerHandle::spawn(Arc::new(platform), addr, a.worker_ui)?;
    println!("listening on {}", handle.url());
    handle.join()?;
    Ok(())
}

fn open_context(
    c: &PipelineArgs,
    default_project: &str,
) -> Result<(CrowdContext, String), Failure> {
    let project = c
        .project
        .clone()
        .unwrap_or_else(|| default_project.to_string());
    let db =
        c.db.clone()
            .unwrap_or_else(|| CrowdContext::default_store_path(&project));
    let config = RunConfig {
        n_assignments: c.assignments,
        poll_interval: Duration::from_millis(c.poll_ms),
        result_timeout: Duration::from_secs(c.timeout_secs),
        ..RunConfig::default()
    };
    let ctx = if c.offline {
        CrowdContext::open(&project, &db, OfflinePlatform, config)?
    } else {
        CrowdContext::open(&project, &db, HttpPlatform::new(&c.platform), config)?
    };
    let table = c.table.clone().unwrap_or_else(|| project.clone());
    Ok((ctx, table))
}

fn presenter(c: &PipelineArgs, default: Presenter) -> Result<Presenter, Failure> {
    Ok(match &c.presenter {
        Some(dir) => Presenter::from_dir(dir)?,
        None => default,
    })
}

fn image_label(a: ImageLabelArgs) -> Result<(), Failure> {
    let text =
        std::fs::read_to_string(&a.input).map_err(|e| format!("{}: {e}", a.input.display()))?;
    let objects: Vec<Value> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| Value::String(l.into()))
        .collect();
    let presenter = presenter(&a.common, Presenter::image_label())?;
    let (ctx, table) = open_context(&a.common, "imglabel")?;
    let column = match a.qc {
        Qc::Mv => "mv",
        Qc::Em => "em",
    };
    let mut cd = ctx.crowddata(objects, &table)?;
    cd.set_presenter(presenter)?;
    if let Some(pid) = cd.platform_project() {
        eprintln!("platform project {pid}");
    }
    cd.publish_task()?
        .get_result(true)?
        .quality_control(column)?;
    let view = cd.view();
    if a.common.json {
        println!("{}", serde_json::to_string_pretty(&view)?);
    } else {
        print!("{}", render_table(&view, column));
    }
    Ok(())
}

fn render_table(view: &TableView, column: &str) -> String {
    let mut out = format!("id\tobject\ttask\tstatus\tanswers\t{column}\n");
    let labels = view.derived.get(column);
    for row in &view.rows {
        let object = match &row.object {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        let (task, status) = match &row.task {
            Some(t) => (t.task_id.clone(), format!("{:?}", t.status).to_lowercase()),
            None => ("-".into(), "-".into()),
        };
        let answers = row.result.as_ref().map_or(0, |r| r.assignments.len());
        let label = labels
            .and_then(|l| l.get(&row.id))
            .map_or("-", |l| l.label.as_str());
        out.push_str(&format!(
            "{}\t{object}\t{task}\t{status}\t{answers}\t{label}\n",
            row.id
        ));
    }
    out
}

fn entity_resolution(a: EntityResolutionArgs) -> Result<(), Failure> {
    let records = load_records(&a.input)?;
    let presenter = presenter(&a.common, Presenter::entity_match())?;
    let (ctx, table) = open_context(&a.common, "entityres")?;
    let cd = ctx.crowddata(records, &table)?;
    let outcome = match a.join {
        JoinKind::Simple => simple_join(&ctx, &cd, None, &presenter)?,
        JoinKind::Filtered => filtered_join(&ctx, &cd, token_jaccard, a.tau, &presenter)?,
        JoinKind::Transitive => {
            let order = match a.order {
                Order::Similarity => PairOrder::SimilarityDescending,
                Order::Id => PairOrder::IdAscending,
            };
            transitive_join(&ctx, &cd, &order, &presenter)?
        }
    };
    if a.common.json {
        println!("{}", serde_json::to_string_pretty(&outcome)?);
    } else {
        print!("{}", render_join(&outcome));
    }
    Ok(())
}

fn render_join(outcome: &JoinOutcome) -> String {
    let mut out = String::from("left\tright\tverdict\tsource\n");
    for p in &outcome.pairs {
        let verdict = p.verdict.map_or("-".to_string(), |v| json_word(&v));
        out.push_str(&format!(
            "{}\t{}\t{verdict}\t{}\n",
            p.left_id,
            p.right_id,
            json_word(&p.source)
        ));
    }
    let matches = outcome.matches().count();
    out.push_str(&format!(
        "pairs {}, matches {matches}, published {}\n",
        outcome.pairs.len(),
        outcome.published
    ));
    for inc in &outcome.inconsistencies {
        out.push_str(&format!(
            "inconsistent {}-{}: crowd {}, deduced {}\n",
            inc.pair.0,
            inc.pair.1,
            json_word(&inc.crowd),
            json_word(&inc.deduced)
        ));
    }
    out
}

fn json_word<T: serde::Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(Value::String(s)) => s,
        Ok(other) => other.to_string(),
        Err(_) => "?".into(),
    }
}

/// Projects on the platform, found by probing the sequential ids.
fn discover_projects(api: &HttpPlatform) -> Result<Vec<String>, PlatformError> {
    let mut ids = Vec::new();
    for n in 1.. {
        let id = format!("prj-{n}");
        match api.next_task(&id, "") {
            Ok(_) => ids.push(id),
            Err(PlatformError::UnknownProject(_)) => break,
            Err(e) => return Err(e),
        }
    }
    Ok(ids)
}

fn simulate(a: SimulateArgs) -> Result<(), Failure> {
    if !(0.0..=1.0).contains(&a.accuracy) {
        return Err(format!("accuracy must lie in [0, 1], got {}", a.accuracy).into());
    }
    let truth: HashMap<String, Value> = serde_json::from_str(
        &std::fs::read_to_string(&a.truth).map_err(|e| format!("{}: {e}", a.truth.display()))?,
    )
    .map_err(|e| format!("{}: {e}", a.truth.display()))?;
    let api = HttpPlatform::new(&a.platform);
    let profiles = worker_pool(a.workers, a.accuracy, a.seed);
    let mode = match a.mode {
        Mode::Deterministic => SimMode::Deterministic,
        Mode::Concurrent => SimMode::Concurrent,
    };
    let linger = Duration::from_millis(a.linger_ms);
    let mut transcript: Vec<TranscriptEntry> = Vec::new();
    let mut idle_since = Instant::now();
    loop {
        let projects = match &a.project_id {
            Some(id) => vec![id.clone()],
            None => discover_projects(&api)?,
        };
        let mut answered = 0;
        for pid in &projects {
            let round = simulate_workers(&api, pid, &profiles, &truth, mode, Duration::ZERO)?;
            answered += round.len();
            transcript.extend(round);
        }
        if answered > 0 {
            idle_since = Instant::now();
        } else if idle_since.elapsed() >= linger {
            break;
        } else {
            std::thread::sleep(Duration::from_millis(50).min(linger));
        }
    }
    if a.json {
        for e in &transcript {
            println!("{}", serde_json::to_string(e)?);
        }
    } else {
        for e in &transcript {
            println!(
                "{}\t{}\t{}\t{}",
                format_ts(&e.ts),
                e.worker_id,
                e.task_id,
                answer_text(&e.answer)
            );
        }
    }
    eprintln!(
        "{} answers from {} workers",
        transcript.len(),
        profiles.len()
    );
    Ok(())
}

fn answer_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn lineage(a: LineageArgs) -> Result<(), Failure> {
    let db =
        a.db.clone()
            .unwrap_or_else(|| CrowdContext::default_store_path(&a.project));
    let lineage = Lineage::open(&db)?;
    let events = if let Some(fp) = &a.object {
        lineage.task_history(&a.project, fp)?
    } else if let Some(w) = &a.worker {
        lineage.worker_assignments(&a.project, w)?
    } else {
        let s = lineage.experiment_summary(&a.project)?;
        if a.json {
            println!("{}", serde_json::to_string_pretty(&s)?);
        } else {
            println!("project\t{}", s.project);
            println!("tasks\t{}", s.tasks);
            println!("assignments\t{}", s.assignments);
            println!("workers\t{}", s.workers);
            println!("first_ts\t{}", s.first_ts.as_deref().unwrap_or("-"));
            println!("last_ts\t{}", s.last_ts.as_deref().unwrap_or("-"));
            for (table, t) in &s.tables {
                println!(
                    "table {table}\ttasks={} assignments={} workers={}",
                    t.tasks, t.assignments, t.workers
                );
            }
        }
        return Ok(());
    };
    print_events(&events, a.json)
}

fn print_events(events: &[LineageEvent], json: bool) -> Result<(), Failure> {
    if json {
        println!("{}", serde_json::to_string_pretty(events)?);
        return Ok(());
    }
    println!("ts\tkind\ttable\ttask\tworker\tanswer");
    for e in events {
        println!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            format_ts(&e.ts),
            json_word(&e.kind),
            e.table,
            e.task_id,
            e.worker_id.as_deref().unwrap_or("-"),
            e.answer.as_ref().map_or("-".to_string(), answer_text),
        );
    }
    Ok(())
}

fn replay_store(a: ReplayArgs) -> Result<(), Failure> {
    if !Path::new(&a.db).exists() {
        return Err(format!("{}: no such file", a.db.display()).into());
    }
    let replayed = replay(&a.db)?;
    if replayed.dropped_tail {
        eprintln!(
            "warning: discarded a torn final record after byte {}",
            replayed.valid_len
        );
    }
    let records = replayed.state.records();
    if a.json {
        for r in records {
            println!("{}", serde_json::to_string(r)?);
        }
    } else {
        println!("seq\tts\tkind\tproject\ttable\tkey");
        for r in records {
            println!(
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.seq,
                format_ts(&r.ts),
                r.kind.as_str(),
                r.project,
                r.table,
                r.key
            );
        }
    }
    eprintln!(
        "{} records, {} valid bytes",
        records.len(),
        replayed.valid_len
    );
    Ok(())
}
