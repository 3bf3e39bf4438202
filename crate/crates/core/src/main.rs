use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use simstudent_core::clock::Clock;
use simstudent_core::pipeline::{
    build_gateway, load_json, load_records, BackendConfig, CandidateRule, CandidateSet, FilterPhase, GoldConfig,
    Pipeline, PipelineArtifacts, PipelineError, RunConfig, Stage, CANDIDATES_FILE, CONFIG_FILE, PROFILES_FILE,
};
use simstudent_core::profile::{AttributeCatalog, StudentProfile};
use simstudent_core::scoring::PromptSet;
use simstudent_core::service::{router, AnnotationStore, ArtifactDir, ServiceConfig, ServiceState, StoreOptions};

/// Generate, score, propagate and select simulated-student agents.
#[derive(Debug, Parser)]
#[command(name = "simstudent", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample profiles.
    Generate(StageArgs),
    /// Run both scoring rounds.
    Score(StageArgs),
    /// Embed profiles and build the similarity graph.
    Graph(StageArgs),
    /// Propagate scores over the graph.
    Propagate(StageArgs),
    /// Select candidates above the threshold.
    Filter(StageArgs),
    /// Rank agents by each score source.
    Rank(StageArgs),
    /// Compute ranking metrics against expert scores.
    Report(StageArgs),
    /// Feature importance and distribution shift.
    Analyze(StageArgs),
    /// Every stage in order.
    RunAll(StageArgs),
    /// Serve the annotation REST API for a finished run.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct StageArgs {
    /// TOML run configuration; flags below override it.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long, short, default_value = "runs/default")]
    out: PathBuf,
    /// Rerun the requested stage even if its outputs are current.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of profiles to generate.
    #[arg(long)]
    profiles: Option<usize>,
    /// Attribute catalog (TOML or JSON).
    #[arg(long)]
    catalog: Option<PathBuf>,
    /// OpenAI-compatible base URL; selects the HTTP backend.
    #[arg(long)]
    base_url: Option<String>,
    /// Deterministic offline backend.
    #[arg(long, conflicts_with = "base_url")]
    stub: bool,
    /// Score plan for the stub backend (JSON).
    #[arg(long)]
    score_plan: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    profile_repetitions: Option<u32>,
    #[arg(long)]
    behavior_repetitions: Option<u32>,
    /// Dialogue turns in the behavior round.
    #[arg(long)]
    n_turns: Option<usize>,
    /// Cosine threshold for graph edges.
    #[arg(long)]
    graph_threshold: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    /// Candidate score threshold.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, value_parser = parse_rule)]
    rule: Option<CandidateRule>,
    /// Filter on initial instead of propagated scores.
    #[arg(long)]
    filter_initial: bool,
    /// Annotation export (JSON) to use as gold scores.
    #[arg(long)]
    gold_file: Option<PathBuf>,
    /// Simulate this many experts per candidate for gold scores.
    #[arg(long, conflicts_with = "gold_file")]
    simulate_experts: Option<usize>,
    #[arg(long)]
    trees: Option<usize>,
    /// Also compute permutation importance.
    #[arg(long)]
    permutation: bool,
}

fn parse_rule(s: &str) -> Result<CandidateRule, String> {
    match s {
        "both" => Ok(CandidateRule::Both),
        "either" => Ok(CandidateRule::Either),
        "average" => Ok(CandidateRule::Average),
        other => Err(format!("unknown rule '{other}' (both, either, average)")),
    }
}

impl StageArgs {
    fn resolve(&self) -> Result<RunConfig, PipelineError> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($field:expr, $value:expr) => {
                if let Some(v) = $value.clone() {
                    $field = v;
                }
            };
        }
        set!(c.seed, self.seed);
        set!(c.profiles, self.profiles);
        set!(c.parallelism, self.parallelism);
        set!(c.generation.model, self.model);
        set!(c.scoring.profile_repetitions, self.profile_repetitions);
        set!(c.scoring.behavior_repetitions, self.behavior_repetitions);
        set!(c.scoring.n_turns, self.n_turns);
        set!(c.threshold, self.graph_threshold);
        set!(c.propagation.alpha, self.alpha);
        set!(c.propagation.max_iterations, self.max_iterations);
        set!(c.propagation.tol, self.tol);
        set!(c.filter.threshold, self.tau);
        set!(c.filter.rule, self.rule);
        set!(c.analysis.forest.n_trees, self.trees);
        if self.catalog.is_some() {
            c.catalog = self.catalog.clone();
        }
        if self.filter_initial {
            c.filter.phase = FilterPhase::Initial;
        }
        if self.permutation {
            c.analysis.permutation = true;
        }
        if let Some(url) = &self.base_url {
            c.backend = BackendConfig::Http(simstudent_core::gateway::HttpBackendConfig::new(url.clone()));
        }
        if self.stub || self.score_plan.is_some() {
            let dimension = match &c.backend {
                BackendConfig::Stub { dimension, .. } => *dimension,
                BackendConfig::Http(_) => None,
            };
            let plan = match &c.backend {
                BackendConfig::Stub { score_plan, .. } => score_plan.clone(),
                BackendConfig::Http(_) => None,
            };
            c.backend = BackendConfig::Stub {
                score_plan: self.score_plan.clone().or(plan),
                dimension,
            };
        }
        if let Some(path) = &self.gold_file {
            c.gold = GoldConfig::File { path: path.clone() };
        }
        if let Some(experts) = self.simulate_experts {
            c.gold = GoldConfig::Simulated {
                experts,
                turns: simstudent_core::service::DEFAULT_MIN_TURNS,
            };
        }
        c.output_dir = Some(self.out.clone());
        Ok(c)
    }
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// Run directory holding profiles.jsonl, candidates.json and config.toml.
    #[arg(long, short)]
    run: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: String,
    /// Bearer token required by every route except /health.
    #[arg(long, env = "SIMSTUDENT_SERVICE_TOKEN")]
    token: String,
    #[arg(long, default_value_t = simstudent_core::service::DEFAULT_MIN_TURNS)]
    min_turns: usize,
    /// Event log; defaults to <run>/annotations/service_events.jsonl.
    #[arg(long)]
    log: Option<PathBuf>,
}

/// `--force` reruns the named stage, or every stage for `run-all`.
fn run_stage(args: &StageArgs, last: Stage, all: bool) -> Result<PipelineArtifacts, PipelineError> {
    let config = args.resolve()?;
    let mut pipeline = Pipeline::new(config, &args.out)?;
    if args.force {
        pipeline = if all { pipeline.force(Stage::ALL) } else { pipeline.force([last]) };
    }
    pipeline.run_through(last)
}

fn serve(args: ServeArgs) -> anyhow::Result<()> {
    let config = RunConfig::load(&args.run.join(CONFIG_FILE)).context("loading run config")?;
    let catalog = match &config.catalog {
        Some(p) => AttributeCatalog::load(p)?,
        None => AttributeCatalog::default(),
    };
    let profiles: Vec<StudentProfile> = load_records(&args.run.join(PROFILES_FILE))?;
    let candidates: CandidateSet = load_json(&args.run.join(CANDIDATES_FILE))?;
    let gateway = build_gateway(&config)?;
    let prompts = PromptSet::default();
    let log = args
        .log
        .clone()
        .unwrap_or_else(|| args.run.join("annotations/service_events.jsonl"));
    let store = AnnotationStore::open(
        StoreOptions {
            profiles: &profiles,
            candidates: &candidates.ids,
            catalog: &catalog,
            prompts: &prompts,
            gateway,
            gen: config.generation.clone(),
            clock: Clock::System,
            config: ServiceConfig {
                min_turns: args.min_turns,
                ..ServiceConfig::default()
            },
        },
        &log,
    )?;
    let state = ServiceState {
        store: Arc::new(store),
        token: Arc::from(args.token.as_str()),
        artifacts: Some(ArtifactDir(args.run.clone())),
    };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&args.bind)
            .await
            .with_context(|| format!("binding {}", args.bind))?;
        tracing::info!(addr = %listener.local_addr()?, candidates = candidates.len(), "annotation service listening");
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}

fn print_summary(art: &PipelineArtifacts) {
    let m = &art.metadata;
    println!("run {} -> {}", m.run_id, art.dir.display());
    for (k, v) in &m.counts {
        println!("  {k}: {v}");
    }
    println!("  tokens: {} ({:.1} per agent)", m.usage.tokens, m.tokens_per_agent);
    let table = art.dir.join(simstudent_core::pipeline::REPORT_TABLE_FILE);
    if m.artifacts.contains_key(simstudent_core::pipeline::REPORT_TABLE_FILE) {
        if let Ok(t) = std::fs::read_to_string(&table) {
            println!("\n{t}");
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let (args, last, all) = match cli.command {
        Command::Serve(a) => {
            return match serve(a) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("error: {e:#}");
                    ExitCode::from(1)
                }
            };
        }
        Command::Generate(a) => (a, Stage::Generate, false),
        Command::Score(a) => (a, Stage::Score, false),
        Command::Graph(a) => (a, Stage::Graph, false),
        Command::Propagate(a) => (a, Stage::Propagate, false),
        Command::Filter(a) => (a, Stage::Filter, false),
        Command::Rank(a) => (a, Stage::Rank, false),
        Command::Report(a) => (a, Stage::Report, false),
        Command::Analyze(a) => (a, Stage::Analyze, false),
        Command::RunAll(a) => (a, Stage::Analyze, true),
    };
    match run_stage(&args, last, all) {
        Ok(art) => {
            print_summary(&art);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
