//! `gridfm`: solvers, optimizer runs, the charging assistant, document QA,
//! image evaluation and the HTTP service behind one command.

mod config;
mod output;

use std::io::{BufRead, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use gridfm_core::assistant::AssistantSession;
use gridfm_core::doc::{self, DocumentIndex, Embedder, HashingEmbedder, LiveEmbedder, PromptTemplate};
use gridfm_core::llm::GatewayError;
use gridfm_core::opro::{self, OproConfig, OproRunRecord, OproRunner, RunStatus, SolutionCostBuffer};
use gridfm_core::problem::fixtures;
use gridfm_core::sa::{self, EvalOptions, SaApproach, SaPromptConfig};
use gridfm_core::store::StoreError;
use gridfm_core::{schedule_to_csv, solve_dispatch, solve_ev, summarize_schedule, DispatchProblem, EvProblem};
use gridfm_service::{AppState, ProviderChoice, ServiceConfig};
use serde_json::json;

use config::{Overrides, ProviderDefault, ProviderSpec, Resolved};

/// `println!` that ends the process quietly when stdout is closed early.
macro_rules! out {
    ($($arg:tt)*) => {{
        if let Err(e) = writeln!(std::io::stdout(), $($arg)*) {
            if e.kind() == std::io::ErrorKind::BrokenPipe {
                std::process::exit(0);
            }
        }
    }};
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad invocation or missing configuration; exit code 2.
    #[error("{0}")]
    Usage(String),
    /// The command ran and failed; exit code 1.
    #[error("{0}")]
    Failure(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failure(_) => 1,
        }
    }
}

impl From<gridfm_core::Error> for CliError {
    fn from(e: gridfm_core::Error) -> Self {
        use gridfm_core::Error;
        match &e {
            Error::Gateway(GatewayError::Config(_)) | Error::Step { source: GatewayError::Config(_), .. } => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Failure(e.to_string()),
        }
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Failure(other.to_string()),
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        CliError::Failure(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Failure(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Failure(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "gridfm", version, about = "Power-system scheduling solvers and language-model workflows")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
#[command(next_help_heading = "Global options")]
struct Global {
    /// TOML file with provider, api_base, model, data_dir and port
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Model provider: mock, live or replay:<transcript>
    #[arg(long, global = true, value_name = "NAME")]
    provider: Option<String>,
    /// Chat-completions base URL for the live provider
    #[arg(long, global = true, value_name = "URL")]
    api_base: Option<String>,
    /// Model name for the live provider
    #[arg(long, global = true)]
    model: Option<String>,
    /// Append every model exchange to this JSONL transcript
    #[arg(long, global = true, value_name = "PATH")]
    chat_log: Option<PathBuf>,
    /// Print machine-readable JSON on stdout
    #[arg(long, global = true)]
    json: bool,
    /// Log progress to stderr; repeat for more detail
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
}

impl Global {
    fn resolve(&self, default: ProviderDefault) -> CliResult<Resolved> {
        config::resolve(
            &Overrides {
                config: self.config.as_deref(),
                provider: self.provider.as_deref(),
                api_base: self.api_base.as_deref(),
                model: self.model.as_deref(),
                chat_log: self.chat_log.as_deref(),
            },
            default,
        )
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Economic dispatch
    #[command(subcommand)]
    Dispatch(DispatchCmd),
    /// Electric-vehicle charging schedules
    #[command(subcommand)]
    Ev(EvCmd),
    /// Model-driven dispatch optimization runs
    #[command(subcommand)]
    Opro(OproCmd),
    /// Document ingestion, question answering and summaries
    #[command(subcommand)]
    Doc(DocCmd),
    /// Image situation-awareness evaluation
    #[command(subcommand)]
    Sa(SaCmd),
    /// Run the HTTP service
    Serve(ServeArgs),
    /// Talk to the charging assistant in the terminal
    Chat(ChatArgs),
}

#[derive(Debug, Subcommand)]
enum DispatchCmd {
    /// Solve a dispatch problem exactly
    Solve(DispatchSolve),
}

#[derive(Debug, Args)]
struct DispatchSolve {
    /// Fixture name (five_unit) or TOML problem file
    #[arg(long, default_value = "five_unit")]
    problem: String,
    /// Override the demand, MW
    #[arg(long)]
    demand: Option<f64>,
    /// Also write the JSON report here
    #[arg(long, value_name = "PATH")]
    report: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum EvCmd {
    /// Solve a charging problem exactly
    Solve(EvSolve),
}

#[derive(Debug, Args)]
struct EvSolve {
    /// Fixture name (ev_five_vehicle) or TOML problem file
    #[arg(long, default_value = "ev_five_vehicle")]
    problem: String,
    /// Write the vehicles x steps power matrix as CSV
    #[arg(long, value_name = "PATH")]
    schedule_out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum OproCmd {
    /// Optimize a dispatch problem with the model
    Run(OproRun),
    /// Continue from a finished run on a problem with a new demand
    Adapt(OproAdapt),
    /// Re-execute a run record against its own recorded replies
    Replay(OproReplay),
}

#[derive(Debug, Args)]
struct OproSettings {
    /// Model calls to make [default: 300 for run, 50 for adapt]
    #[arg(long)]
    steps: Option<usize>,
    /// Best pairs shown in each prompt
    #[arg(long, default_value_t = 20)]
    top_k: usize,
    /// Random feasible pairs in a fresh seed buffer
    #[arg(long, default_value_t = 2)]
    seed_count: usize,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Seed for the initial buffer sampler
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the run record (one step per line) here
    #[arg(long, value_name = "PATH")]
    transcript: Option<PathBuf>,
}

impl OproSettings {
    fn config(&self, default_steps: usize) -> CliResult<OproConfig> {
        let cfg = OproConfig {
            steps: self.steps.unwrap_or(default_steps),
            top_k: self.top_k,
            seed_count: self.seed_count,
            temperature: self.temperature,
            seed: self.seed,
            ..OproConfig::default()
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct OproRun {
    /// Fixture name (five_unit) or TOML problem file
    #[arg(long, default_value = "five_unit")]
    problem: String,
    /// Override the demand, MW
    #[arg(long)]
    demand: Option<f64>,
    /// TOML file of seed pairs instead of random samples
    #[arg(long, value_name = "PATH")]
    seed_file: Option<PathBuf>,
    #[command(flatten)]
    settings: OproSettings,
}

#[derive(Debug, Args)]
struct OproAdapt {
    /// Run record of the finished run
    #[arg(long, value_name = "PATH")]
    from: PathBuf,
    /// Demand of the new task, MW
    #[arg(long)]
    demand: f64,
    #[command(flatten)]
    settings: OproSettings,
}

#[derive(Debug, Args)]
struct OproReplay {
    /// Run record to re-execute
    #[arg(long, value_name = "PATH")]
    transcript: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EmbedderKind {
    /// Offline character n-gram hashing
    Hashing,
    /// Embeddings endpoint of the live provider
    Live,
}

#[derive(Debug, Subcommand)]
enum DocCmd {
    /// Chunk and embed a plain-text document into an index file
    Ingest {
        /// Plain text extracted from the document
        #[arg(long, value_name = "PATH")]
        file: PathBuf,
        #[arg(long, value_name = "PATH")]
        index: PathBuf,
        #[arg(long, default_value_t = doc::DEFAULT_CHUNK_SIZE)]
        chunk_size: usize,
        #[arg(long, default_value_t = doc::DEFAULT_OVERLAP)]
        overlap: usize,
        #[arg(long, value_enum, default_value_t = EmbedderKind::Hashing)]
        embedder: EmbedderKind,
        /// Embedding dimension
        #[arg(long, default_value_t = 1024)]
        dim: usize,
    },
    /// Ask a question about an indexed document
    Ask {
        #[arg(long, value_name = "PATH")]
        index: PathBuf,
        #[arg(long)]
        question: String,
        /// Ask without retrieved excerpts
        #[arg(long)]
        no_rag: bool,
        /// Excerpts to retrieve
        #[arg(long, default_value_t = doc::DEFAULT_K)]
        k: usize,
        /// TOML overrides for the prompt fields
        #[arg(long, value_name = "PATH")]
        template: Option<PathBuf>,
    },
    /// Summarize an indexed document
    Summarize {
        #[arg(long, value_name = "PATH")]
        index: PathBuf,
        /// TOML overrides for the prompt fields
        #[arg(long, value_name = "PATH")]
        template: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum SaCmd {
    /// Score an approach on a labeled image manifest
    Eval(SaEval),
}

#[derive(Debug, Args)]
struct SaEval {
    /// 1 direct, 2 engineered, 3 labeled examples, 4 explained examples
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
    approach: u8,
    /// CSV with path,label[,explanation] rows
    #[arg(long, value_name = "PATH")]
    manifest: PathBuf,
    #[arg(long, default_value_t = 1)]
    rounds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Requests in flight at once
    #[arg(long, default_value_t = 1)]
    concurrency: usize,
    /// TOML overrides for the prompt wording
    #[arg(long, value_name = "PATH")]
    prompt: Option<PathBuf>,
    /// Write the full JSON report here
    #[arg(long, value_name = "PATH")]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// Port to listen on [default: 8080]
    #[arg(long)]
    port: Option<u16>,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    /// Directory for sessions, runs, indexes and evaluations [default: data]
    #[arg(long, value_name = "PATH")]
    data_dir: Option<PathBuf>,
    /// Concurrent background jobs
    #[arg(long, default_value_t = gridfm_service::DEFAULT_WORKERS)]
    workers: usize,
}

#[derive(Debug, Args)]
struct ChatArgs {
    /// Session file to resume and keep up to date
    #[arg(long, value_name = "PATH")]
    session: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.global.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(level));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
}

fn run(cli: Cli) -> CliResult {
    let g = &cli.global;
    match cli.command {
        Command::Dispatch(DispatchCmd::Solve(a)) => dispatch_solve(g, a),
        Command::Ev(EvCmd::Solve(a)) => ev_solve(g, a),
        Command::Opro(OproCmd::Run(a)) => opro_run(g, a),
        Command::Opro(OproCmd::Adapt(a)) => opro_adapt(g, a),
        Command::Opro(OproCmd::Replay(a)) => opro_replay(g, a),
        Command::Doc(cmd) => doc_cmd(g, cmd),
        Command::Sa(SaCmd::Eval(a)) => sa_eval(g, a),
        Command::Serve(a) => serve(g, a),
        Command::Chat(a) => chat(g, a),
    }
}

fn print_json(value: &serde_json::Value) -> CliResult {
    out!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn read(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))
}

fn load_dispatch(spec: &str) -> CliResult<DispatchProblem> {
    if let Some(p) = fixtures::dispatch_by_name(spec) {
        return Ok(p);
    }
    let path = Path::new(spec);
    if !path.exists() {
        return Err(CliError::Usage(format!("no dispatch fixture or file named `{spec}`")));
    }
    Ok(DispatchProblem::load(path)?)
}

fn load_ev(spec: &str) -> CliResult<EvProblem> {
    if let Some(p) = fixtures::ev_by_name(spec) {
        return Ok(p);
    }
    let path = Path::new(spec);
    if !path.exists() {
        return Err(CliError::Usage(format!("no charging fixture or file named `{spec}`")));
    }
    Ok(EvProblem::load(path)?)
}

fn dispatch_solve(g: &Global, a: DispatchSolve) -> CliResult {
    let mut problem = load_dispatch(&a.problem)?;
    if let Some(d) = a.demand {
        problem = problem.with_demand(d)?;
    }
    let report = solve_dispatch(&problem)?;
    let text = output::six_decimals(&report)?;
    if let Some(path) = &a.report {
        std::fs::write(path, format!("{text}\n"))?;
    }
    if g.json {
        out!("{text}");
    } else {
        out!("demand   {:.3} MW", problem.demand);
        for (i, p) in report.solution.power.iter().enumerate() {
            out!("P{}       {p:.4} MW", i + 1);
        }
        out!("total    {:.4} MW", report.total_output());
        out!("cost     {:.6} $/h", report.solution.cost);
        out!("lambda   {:.6} $/MWh", report.lambda);
    }
    Ok(())
}

fn ev_solve(g: &Global, a: EvSolve) -> CliResult {
    let problem = load_ev(&a.problem)?;
    let schedule = solve_ev(&problem)?;
    let summary = summarize_schedule(&problem, &schedule);
    if let Some(path) = &a.schedule_out {
        std::fs::write(path, schedule_to_csv(&schedule))?;
    }
    if g.json {
        print_json(&json!({"schedule": schedule, "summary": summary}))
    } else {
        out!("{summary}");
        Ok(())
    }
}

fn drive_run(g: &Global, problem: DispatchProblem, cfg: OproConfig, seed: SolutionCostBuffer, transcript: Option<&Path>) -> CliResult {
    let resolved = g.resolve(ProviderDefault::Live)?;
    let model = resolved.provider(Some(&problem))?;
    let optimum = solve_dispatch(&problem)?.solution.cost;
    let mut runner = OproRunner::new(problem, cfg, seed)?;
    let mut save_error = None;
    runner.run(&*model, None, |record| {
        let n = record.steps.len();
        if n % 10 == 0 || record.status.is_terminal() {
            tracing::info!(step = n, best = record.best().map(|b| b.cost), "progress");
            if let Some(path) = transcript {
                if let Err(e) = record.save(path) {
                    save_error.get_or_insert(e);
                }
            }
        }
    });
    let record = runner.into_record();
    if let Some(path) = transcript {
        record.save(path)?;
    }
    if let Some(e) = save_error {
        tracing::warn!(error = %e, "an intermediate save failed");
    }
    report_run(g, &record, optimum, transcript)?;
    match &record.status {
        RunStatus::Aborted { reason } => Err(CliError::Failure(format!("run aborted: {reason}"))),
        _ => Ok(()),
    }
}

fn report_run(g: &Global, record: &OproRunRecord, optimum: f64, transcript: Option<&Path>) -> CliResult {
    let best = record.best();
    let gap = best.as_ref().map(|b| (b.cost - optimum) / optimum * 100.0);
    if g.json {
        return print_json(&json!({
            "status": record.status,
            "steps": record.steps.len(),
            "accepted": record.accepted_count(),
            "transport_failures": record.transport_failures.len(),
            "seed_best_cost": record.seed_best_cost(),
            "best_cost": best.as_ref().map(|b| b.cost),
            "best_solution": best.as_ref().map(|b| &b.solution),
            "optimum": optimum,
            "gap_percent": gap,
            "transcript": transcript,
        }));
    }
    out!("steps      {} ({} accepted)", record.steps.len(), record.accepted_count());
    out!("seed best  {:.3}", record.seed_best_cost());
    if let (Some(b), Some(gap)) = (best, gap) {
        let sol: Vec<String> = b.solution.iter().map(|x| opro::format_value(*x)).collect();
        out!("best       {:.3} at [{}]", b.cost, sol.join(", "));
        out!("optimum    {optimum:.3} (gap {gap:.4}%)");
    }
    if let Some(path) = transcript {
        out!("record     {}", path.display());
    }
    Ok(())
}

fn opro_run(g: &Global, a: OproRun) -> CliResult {
    let mut problem = load_dispatch(&a.problem)?;
    if let Some(d) = a.demand {
        problem = problem.with_demand(d)?;
    }
    let cfg = a.settings.config(OproConfig::default().steps)?;
    let seed = match &a.seed_file {
        Some(path) => opro::load_seed_buffer(&problem, &read(path)?, &cfg)?,
        None => opro::seed_buffer(&problem, cfg.seed_count, cfg.seed, &cfg)?,
    };
    drive_run(g, problem, cfg, seed, a.settings.transcript.as_deref())
}

fn opro_adapt(g: &Global, a: OproAdapt) -> CliResult {
    let previous = OproRunRecord::load(&a.from)?;
    let problem = previous.problem.with_demand(a.demand)?;
    let cfg = a.settings.config(50)?;
    let seed = opro::adapt_seed(&previous, &problem, &cfg)?;
    drive_run(g, problem, cfg, seed, a.settings.transcript.as_deref())
}

fn opro_replay(g: &Global, a: OproReplay) -> CliResult {
    let record = OproRunRecord::load(&a.transcript)?;
    let replayed = opro::replay_run(&record)?;
    if let Some(i) = (0..record.steps.len()).find(|&i| replayed.steps.get(i) != Some(&record.steps[i])) {
        return Err(CliError::Failure(format!("replay diverged at step {}", i + 1)));
    }
    if g.json {
        print_json(&json!({"steps": record.steps.len(), "matches": true}))
    } else {
        out!("replayed {} steps; every step matches the record", record.steps.len());
        Ok(())
    }
}

fn load_template(path: Option<&Path>) -> CliResult<PromptTemplate> {
    match path {
        Some(p) => Ok(PromptTemplate::from_toml_str(&read(p)?)?),
        None => Ok(PromptTemplate::default()),
    }
}

/// The embedder that built `index`, so queries land in the same space.
fn embedder_for(index: &DocumentIndex, resolved: &Resolved) -> CliResult<Box<dyn Embedder>> {
    if let Some(h) = HashingEmbedder::from_id(&index.embedder) {
        return Ok(Box::new(h));
    }
    let model = index
        .embedder
        .strip_prefix("live:")
        .and_then(|rest| rest.rsplit_once(":dim="))
        .map(|(model, _)| model.to_string())
        .ok_or_else(|| CliError::Failure(format!("index uses unknown embedder `{}`", index.embedder)))?;
    Ok(Box::new(LiveEmbedder::new(resolved.live_config()?, model, index.dim)))
}

fn doc_cmd(g: &Global, cmd: DocCmd) -> CliResult {
    match cmd {
        DocCmd::Ingest {
            file,
            index,
            chunk_size,
            overlap,
            embedder,
            dim,
        } => {
            let text = read(&file)?;
            let embedder: Box<dyn Embedder> = match embedder {
                EmbedderKind::Hashing => Box::new(HashingEmbedder::new(dim, 3, 0)?),
                EmbedderKind::Live => {
                    let resolved = g.resolve(ProviderDefault::Live)?;
                    let model = std::env::var(doc::ENV_EMBED_MODEL).unwrap_or_else(|_| doc::DEFAULT_EMBED_MODEL.into());
                    Box::new(LiveEmbedder::new(resolved.live_config()?, model, dim))
                }
            };
            let name = file.file_name().map_or_else(|| "document".into(), |n| n.to_string_lossy().into_owned());
            let built = DocumentIndex::build(name, &text, &*embedder, chunk_size, overlap)?;
            built.save(&index)?;
            if g.json {
                print_json(&json!({
                    "index": index,
                    "document_id": built.document_id,
                    "chunks": built.len(),
                    "embedder": built.embedder,
                    "dim": built.dim,
                }))
            } else {
                out!("indexed {} chunks of {} into {}", built.len(), built.document_id, index.display());
                Ok(())
            }
        }
        DocCmd::Ask {
            index,
            question,
            no_rag,
            k,
            template,
        } => {
            let index = DocumentIndex::load(&index)?;
            let template = load_template(template.as_deref())?;
            let resolved = g.resolve(ProviderDefault::Live)?;
            let embedder = embedder_for(&index, &resolved)?;
            let model = resolved.provider(None)?;
            let answer = doc::answer(&index, &*embedder, &question, k, !no_rag, &*model, &template)?;
            if g.json {
                return print_json(&json!(answer));
            }
            out!("{}", answer.text);
            if !answer.citations.is_empty() {
                out!();
                for (i, c) in answer.citations.iter().enumerate() {
                    out!("[{}] characters {}..{} (score {:.3})", i + 1, c.start, c.end, c.score);
                }
            }
            Ok(())
        }
        DocCmd::Summarize { index, template } => {
            let index = DocumentIndex::load(&index)?;
            let template = load_template(template.as_deref())?;
            let model = g.resolve(ProviderDefault::Live)?.provider(None)?;
            let summary = doc::summarize(&index, &*model, &template)?;
            if g.json {
                print_json(&json!(summary))
            } else {
                out!("{}", summary.text);
                Ok(())
            }
        }
    }
}

fn sa_eval(g: &Global, a: SaEval) -> CliResult {
    let approach = SaApproach::from_number(a.approach)
        .ok_or_else(|| CliError::Usage(format!("approach must be 1 to 4, got {}", a.approach)))?;
    let manifest = sa::load_manifest(&a.manifest)?;
    let prompt = match &a.prompt {
        Some(p) => toml::from_str::<SaPromptConfig>(&read(p)?)
            .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?,
        None => SaPromptConfig::default(),
    };
    let opts = EvalOptions {
        rounds: a.rounds,
        seed: a.seed,
        concurrency: a.concurrency,
        prompt,
        ..EvalOptions::default()
    };
    let model = g.resolve(ProviderDefault::Live)?.provider(None)?;
    let report = sa::evaluate(approach, &manifest, &*model, &opts)?;
    if let Some(path) = &a.report {
        std::fs::write(path, serde_json::to_string_pretty(&report)?)?;
    }
    if g.json {
        return print_json(&json!(report));
    }
    out!("approach {} over {} round(s)", approach.number(), report.rounds.len());
    for r in &report.rounds {
        out!("round {}: {}/{} correct, accuracy {:.3}", r.round, r.correct(), r.items.len(), r.accuracy);
    }
    out!("mean accuracy {:.3}, abstentions {}", report.mean_accuracy, report.abstentions());
    Ok(())
}

fn serve(g: &Global, a: ServeArgs) -> CliResult {
    let resolved = g.resolve(ProviderDefault::Auto)?;
    let provider = match resolved.provider {
        ProviderSpec::Mock if resolved.chat_log.is_none() => ProviderChoice::Mock,
        _ => ProviderChoice::Shared(Arc::from(resolved.provider(None)?)),
    };
    let data_dir = a.data_dir.or(resolved.data_dir.clone()).unwrap_or_else(|| PathBuf::from("data"));
    let addr = SocketAddr::new(a.host, a.port.or(resolved.port).unwrap_or(8080));
    let mut config = ServiceConfig::new(data_dir, provider);
    config.workers = a.workers;
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async {
        let state = AppState::open(config).await?;
        if g.json {
            out!("{}", json!({"listening": addr.to_string(), "provider": resolved.provider_name()}));
        } else {
            eprintln!("serving on http://{addr} with the {} provider", resolved.provider_name());
        }
        gridfm_service::serve(addr, state).await?;
        Ok(())
    })
}

fn chat(g: &Global, a: ChatArgs) -> CliResult {
    let resolved = g.resolve(ProviderDefault::Auto)?;
    let model = resolved.provider(None)?;
    let mut session = match &a.session {
        Some(p) if p.exists() => AssistantSession::load(p)?,
        _ => AssistantSession::new("chat"),
    };
    if !g.json {
        eprintln!("Charging assistant ({} provider). Type `exit` to leave.", resolved.provider_name());
    }
    let stdin = std::io::stdin();
    let mut stdout = std::io::stdout();
    let mut lines = stdin.lock().lines();
    loop {
        if !g.json {
            print!("you> ");
            stdout.flush()?;
        }
        let Some(line) = lines.next() else { break };
        let line = line?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        if matches!(text, "exit" | "quit") {
            break;
        }
        match session.handle_user_turn(text, &*model) {
            Ok(outcome) => {
                if g.json {
                    out!("{}", serde_json::to_string(&outcome)?);
                } else {
                    for reply in &outcome.replies {
                        out!("assistant> {reply}\n");
                    }
                }
            }
            Err(e) => eprintln!("error: {e}"),
        }
        if let Some(p) = &a.session {
            session.save(p)?;
        }
    }
    Ok(())
}
