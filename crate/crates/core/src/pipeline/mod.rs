//! End-to-end orchestration over a run directory.
//!
//! Each stage reads the files of earlier stages and writes its own, then
//! records a manifest under `manifests/`. A stage whose parameters, input
//! hashes and output hashes all match its manifest is skipped, which makes
//! any command resumable.

mod config;
mod select;
mod store;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use config::{
    AnalysisConfig, BackendConfig, CandidateRule, FilterConfig, FilterPhase, GoldConfig, MetricsConfig, RunConfig,
    ScoringConfig,
};
pub use select::{filter_candidates, rank_all, source_scores, CandidateSet, FilterError, RankedList, Rankings};
pub use store::{
    file_hash, load_json, load_records, save_json, save_records, save_text, to_json, to_jsonl, write_atomic,
    StoreError,
};

use crate::analysis::{
    distribution_report, distribution_svg, fit_forest, importance_svg, one_hot_encode, permutation_importance,
    relative_importance,
};
use crate::clock::Clock;
use crate::gateway::{Gateway, GatewayError, HttpBackend, ScorePlan, StubBackend, Usage};
use crate::graph::{
    build_graph, normalize_adjacency, normalize_embedding, propagate, GraphSummary, ScoreVector, SimilarityGraph,
};
use crate::hashing::{hash64, sha256_hex, splitmix64};
use crate::metrics::{build_report, GoldStandard, GradeScheme, KindScores, RankingReport};
use crate::profile::{render_profile, sample_profile, AttributeCatalog, RenderingVersion, StudentProfile};
use crate::scoring::{
    Protocol, PromptSet, ScoreKind, ScorePhase, ScoreRecord, ScoringError, Transcript,
};
use crate::service::{Agreement, AnnotationDump, AnnotationStore, RatingRequest, ServiceConfig, StoreOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Generate,
    Score,
    Graph,
    Propagate,
    Filter,
    Rank,
    Report,
    Analyze,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Generate,
        Stage::Score,
        Stage::Graph,
        Stage::Propagate,
        Stage::Filter,
        Stage::Rank,
        Stage::Report,
        Stage::Analyze,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Score => "score",
            Stage::Graph => "graph",
            Stage::Propagate => "propagate",
            Stage::Filter => "filter",
            Stage::Rank => "rank",
            Stage::Report => "report",
            Stage::Analyze => "analyze",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailureKind {
    Backend,
    Parse,
    Io,
    Input,
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("stage {stage} failed ({kind:?}): {message}")]
    Stage {
        stage: Stage,
        kind: FailureKind,
        message: String,
    },
}

impl PipelineError {
    /// 2 config, 3 backend, 4 parse, 5 I/O, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Stage { kind, .. } => match kind {
                FailureKind::Backend => 3,
                FailureKind::Parse => 4,
                FailureKind::Io => 5,
                FailureKind::Input => 1,
            },
        }
    }

    pub fn stage(&self) -> Option<Stage> {
        match self {
            PipelineError::Config(_) => None,
            PipelineError::Stage { stage, .. } => Some(*stage),
        }
    }
}

fn fail(stage: Stage, kind: FailureKind, message: impl std::fmt::Display) -> PipelineError {
    PipelineError::Stage {
        stage,
        kind,
        message: message.to_string(),
    }
}

fn store_fail(stage: Stage) -> impl Fn(StoreError) -> PipelineError {
    move |e| {
        let kind = match e {
            StoreError::Io { .. } => FailureKind::Io,
            StoreError::Parse { .. } => FailureKind::Parse,
        };
        fail(stage, kind, e)
    }
}

fn input_fail<E: std::fmt::Display>(stage: Stage) -> impl Fn(E) -> PipelineError {
    move |e| fail(stage, FailureKind::Input, e)
}

pub const PROFILES_FILE: &str = "profiles.jsonl";
pub const TRANSCRIPTS_FILE: &str = "transcripts.jsonl";
pub const SCORES_INITIAL_FILE: &str = "scores_initial.jsonl";
pub const SCORING_ERRORS_FILE: &str = "scoring_errors.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.jsonl";
pub const GRAPH_FILE: &str = "graph.json";
pub const SCORES_PROPAGATED_FILE: &str = "scores_propagated.jsonl";
pub const PROPAGATION_FILE: &str = "propagation.json";
pub const CANDIDATES_FILE: &str = "candidates.json";
pub const RANKINGS_FILE: &str = "rankings.json";
pub const REPORT_FILE: &str = "report.json";
pub const REPORT_TABLE_FILE: &str = "report.txt";
pub const ANNOTATION_LOG: &str = "annotations/events.jsonl";
pub const ANNOTATION_DUMP: &str = "annotations/dump.json";
pub const METADATA_FILE: &str = "run.json";
pub const TIMINGS_FILE: &str = "timings.json";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoringErrorRecord {
    pub profile_id: String,
    pub kind: ScoreKind,
    pub repetition: u32,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub profile_id: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphFile {
    pub summary: GraphSummary,
    pub node_ids: Vec<String>,
    /// Undirected edges `(i, j)` with `i < j`; self-loops implied.
    pub edges: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationSummary {
    pub kind: ScoreKind,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    pub residuals_inf: Vec<f64>,
    pub residuals_l2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: Stage,
    /// Hash of the stage parameters and input hashes.
    pub key: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    #[serde(default)]
    pub stats: Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ran,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub run_id: String,
    pub config_hash: String,
    pub backend: String,
    pub rendering_version: String,
    pub prompt_hashes: BTreeMap<String, String>,
    pub seed: u64,
    pub stages: Vec<Stage>,
    pub counts: BTreeMap<String, usize>,
    pub usage: Usage,
    /// Tokens divided by generated profiles.
    pub tokens_per_agent: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub graph: Option<GraphSummary>,
    pub propagation: Vec<PropagationSummary>,
    pub analysis_defaults: Value,
    pub artifacts: BTreeMap<String, ArtifactRef>,
}

/// Handle on a finished run directory.
#[derive(Debug, Clone)]
pub struct PipelineArtifacts {
    pub dir: PathBuf,
    pub metadata: RunMetadata,
}

impl PipelineArtifacts {
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        Ok(PipelineArtifacts {
            dir: dir.to_path_buf(),
            metadata: load_json(&dir.join(METADATA_FILE))?,
        })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    /// Every referenced artifact exists, parses and matches its recorded hash.
    pub fn verify(&self) -> Result<(), String> {
        for (name, a) in &self.metadata.artifacts {
            let path = self.dir.join(&a.path);
            let hash = file_hash(&path).map_err(|e| format!("{name}: {e}"))?;
            if hash != a.sha256 {
                return Err(format!("{name}: hash mismatch"));
            }
            let raw = std::fs::read_to_string(&path).map_err(|e| format!("{name}: {e}"))?;
            if a.path.ends_with(".jsonl") {
                for (i, line) in raw.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                    serde_json::from_str::<Value>(line).map_err(|e| format!("{name}:{}: {e}", i + 1))?;
                }
            } else if a.path.ends_with(".json") {
                serde_json::from_str::<Value>(&raw).map_err(|e| format!("{name}: {e}"))?;
            } else if a.path.ends_with(".toml") {
                toml::from_str::<RunConfig>(&raw).map_err(|e| format!("{name}: {e}"))?;
            }
        }
        Ok(())
    }

    pub fn candidates(&self) -> Result<CandidateSet, StoreError> {
        load_json(&self.path(CANDIDATES_FILE))
    }

    pub fn report(&self) -> Result<RankingReport, StoreError> {
        load_json(&self.path(REPORT_FILE))
    }
}

pub fn build_gateway(config: &RunConfig) -> Result<Gateway, PipelineError> {
    let backend: std::sync::Arc<dyn crate::gateway::Backend> = match &config.backend {
        BackendConfig::Stub { score_plan, dimension } => {
            let mut stub = StubBackend::new();
            if let Some(d) = dimension {
                stub = stub.with_dimension(*d);
            }
            if let Some(p) = score_plan {
                stub = stub.with_score_plan(ScorePlan::load(p).map_err(PipelineError::Config)?);
            }
            std::sync::Arc::new(stub)
        }
        BackendConfig::Http(h) => std::sync::Arc::new(HttpBackend::new(h.clone())),
    };
    Ok(Gateway::new(backend, config.parallelism))
}

pub struct Pipeline {
    config: RunConfig,
    dir: PathBuf,
    catalog: AttributeCatalog,
    prompts: PromptSet,
    gateway: Gateway,
    clock: Clock,
    force: BTreeSet<Stage>,
    timings: Mutex<BTreeMap<String, f64>>,
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline")
            .field("dir", &self.dir)
            .field("run_id", &self.config.run_id())
            .finish_non_exhaustive()
    }
}

/// Per-profile initial means, split by kind.
fn initial_means(records: &[ScoreRecord]) -> KindScores {
    let mut out: KindScores = BTreeMap::new();
    for ((id, kind), v) in crate::scoring::aggregate_initial(records) {
        out.entry(kind).or_default().insert(id, v);
    }
    out
}

fn by_kind(records: &[ScoreRecord]) -> KindScores {
    let mut out: KindScores = BTreeMap::new();
    for r in records {
        out.entry(r.kind).or_default().insert(r.profile_id.clone(), r.value);
    }
    out
}

const EXPERT_PROMPTS: [&str; 8] = [
    "Hi! Could you tell me a bit about yourself and what you are studying?",
    "How are your classes going this term?",
    "Which course do you find the most challenging right now, and why?",
    "How do you usually prepare for exams?",
    "Do you prefer working in groups or on your own?",
    "What are your plans after graduation?",
    "How do you handle deadlines when several assignments are due at once?",
    "Is there anything about your studies you would like advice on?",
];

impl Pipeline {
    pub fn new(config: RunConfig, dir: impl Into<PathBuf>) -> Result<Self, PipelineError> {
        config.validate()?;
        let gateway = build_gateway(&config)?;
        Self::with_gateway(config, dir, gateway)
    }

    /// Pipeline on an explicit gateway; the backend section of the config is
    /// still hashed but not used to build a backend.
    pub fn with_gateway(config: RunConfig, dir: impl Into<PathBuf>, gateway: Gateway) -> Result<Self, PipelineError> {
        config.validate()?;
        let catalog = match &config.catalog {
            Some(p) => AttributeCatalog::load(p).map_err(|e| PipelineError::Config(e.to_string()))?,
            None => AttributeCatalog::default(),
        };
        let clock = if config.uses_fixed_clock() {
            Clock::fixed_epoch()
        } else {
            Clock::System
        };
        Ok(Pipeline {
            config,
            dir: dir.into(),
            catalog,
            prompts: PromptSet::default(),
            gateway,
            clock,
            force: BTreeSet::new(),
            timings: Mutex::new(BTreeMap::new()),
        })
    }

    /// Rerun these stages even when their manifests are current.
    pub fn force(mut self, stages: impl IntoIterator<Item = Stage>) -> Self {
        self.force.extend(stages);
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn catalog(&self) -> &AttributeCatalog {
        &self.catalog
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    fn manifest_path(&self, stage: Stage) -> PathBuf {
        self.dir.join("manifests").join(format!("{stage}.json"))
    }

    pub fn manifest(&self, stage: Stage) -> Option<Manifest> {
        load_json(&self.manifest_path(stage)).ok()
    }

    fn stage_params(&self, stage: Stage) -> Value {
        let c = &self.config;
        match stage {
            Stage::Generate => json!({
                "seed": c.seed,
                "profiles": c.profiles,
                "catalog": sha256_hex(self.catalog.to_toml().as_bytes()),
            }),
            Stage::Score => json!({
                "backend": c.backend,
                "gateway": self.gateway.backend_name(),
                "generation": c.generation,
                "scoring": c.scoring,
                "prompts": self.prompts.hashes(),
                "clock": self.clock,
            }),
            Stage::Graph => json!({"backend": c.backend, "threshold": c.threshold}),
            Stage::Propagate => json!({"propagation": c.propagation, "clock": self.clock}),
            Stage::Filter => json!({"filter": c.filter, "run_id": c.run_id()}),
            Stage::Rank => json!({"tie_break": c.metrics.tie_break}),
            Stage::Report => json!({
                "metrics": c.metrics,
                "gold": c.gold,
                "backend": c.backend,
                "generation": c.generation,
                "seed": c.seed,
                "clock": self.clock,
            }),
            Stage::Analyze => json!({"analysis": c.analysis}),
        }
    }

    fn stage_inputs(&self, stage: Stage) -> Vec<PathBuf> {
        let mut files: Vec<PathBuf> = match stage {
            Stage::Generate => vec![],
            Stage::Score => vec![self.path(PROFILES_FILE)],
            Stage::Graph => vec![self.path(PROFILES_FILE), self.path(SCORES_INITIAL_FILE)],
            Stage::Propagate => vec![self.path(GRAPH_FILE), self.path(SCORES_INITIAL_FILE)],
            Stage::Filter => vec![self.path(SCORES_INITIAL_FILE), self.path(SCORES_PROPAGATED_FILE)],
            Stage::Rank => vec![self.path(SCORES_INITIAL_FILE), self.path(SCORES_PROPAGATED_FILE)],
            Stage::Report => vec![
                self.path(PROFILES_FILE),
                self.path(SCORES_INITIAL_FILE),
                self.path(SCORES_PROPAGATED_FILE),
                self.path(CANDIDATES_FILE),
            ],
            Stage::Analyze => vec![
                self.path(PROFILES_FILE),
                self.path(SCORES_PROPAGATED_FILE),
                self.path(CANDIDATES_FILE),
            ],
        };
        if stage == Stage::Report {
            if let GoldConfig::File { path } = &self.config.gold {
                files.push(path.clone());
            }
        }
        if let (Stage::Score, BackendConfig::Stub { score_plan: Some(p), .. }) = (stage, &self.config.backend) {
            files.push(p.clone());
        }
        files
    }

    fn input_hashes(&self, stage: Stage) -> Result<BTreeMap<String, String>, PipelineError> {
        let mut out = BTreeMap::new();
        for p in self.stage_inputs(stage) {
            if !p.exists() {
                return Err(fail(
                    stage,
                    FailureKind::Io,
                    format!("missing input {}; run the earlier stages first", p.display()),
                ));
            }
            let name = p
                .strip_prefix(&self.dir)
                .map(|r| r.to_string_lossy().into_owned())
                .unwrap_or_else(|_| p.to_string_lossy().into_owned());
            out.insert(name, file_hash(&p).map_err(store_fail(stage))?);
        }
        Ok(out)
    }

    fn output_hashes(&self, stage: Stage, files: &[String]) -> Result<BTreeMap<String, String>, PipelineError> {
        files
            .iter()
            .map(|f| Ok((f.clone(), file_hash(&self.path(f)).map_err(store_fail(stage))?)))
            .collect()
    }

    fn is_current(&self, stage: Stage, key: &str) -> bool {
        let Some(m) = self.manifest(stage) else {
            return false;
        };
        m.key == key
            && m.outputs
                .iter()
                .all(|(f, h)| file_hash(&self.path(f)).map(|x| &x == h).unwrap_or(false))
    }

    /// Run one stage unless its manifest is current.
    pub fn run_stage(&self, stage: Stage) -> Result<StageStatus, PipelineError> {
        std::fs::create_dir_all(&self.dir).map_err(|e| fail(stage, FailureKind::Io, e))?;
        let inputs = self.input_hashes(stage)?;
        let key = sha256_hex(
            serde_json::to_string(&json!({"params": self.stage_params(stage), "inputs": inputs}))
                .expect("stage key serializes")
                .as_bytes(),
        );
        if !self.force.contains(&stage) && self.is_current(stage, &key) {
            tracing::info!(%stage, "up to date, skipped");
            return Ok(StageStatus::Skipped);
        }
        tracing::info!(%stage, "running");
        let started = Instant::now();
        let before = self.gateway.usage();
        let (outputs, mut stats) = match stage {
            Stage::Generate => self.generate()?,
            Stage::Score => self.score()?,
            Stage::Graph => self.graph()?,
            Stage::Propagate => self.propagate()?,
            Stage::Filter => self.filter()?,
            Stage::Rank => self.rank()?,
            Stage::Report => self.report()?,
            Stage::Analyze => self.analyze()?,
        };
        let after = self.gateway.usage();
        if let Value::Object(m) = &mut stats {
            m.insert(
                "usage".into(),
                json!(Usage {
                    chat_calls: after.chat_calls - before.chat_calls,
                    embed_calls: after.embed_calls - before.embed_calls,
                    tokens: after.tokens - before.tokens,
                }),
            );
        }
        let manifest = Manifest {
            stage,
            key,
            inputs,
            outputs: self.output_hashes(stage, &outputs)?,
            stats,
        };
        save_json(&manifest, &self.manifest_path(stage)).map_err(store_fail(stage))?;
        self.timings
            .lock()
            .expect("timings lock")
            .insert(stage.to_string(), started.elapsed().as_secs_f64());
        Ok(StageStatus::Ran)
    }

    /// Every stage up to and including `last`, then the run metadata.
    pub fn run_through(&self, last: Stage) -> Result<PipelineArtifacts, PipelineError> {
        self.write_config()?;
        let mut result = Ok(());
        for stage in Stage::ALL.into_iter().filter(|s| *s <= last) {
            if let Err(e) = self.run_stage(stage) {
                result = Err(e);
                break;
            }
        }
        // Metadata describes whatever completed, including on failure.
        let meta = self.write_metadata();
        result?;
        meta
    }

    pub fn run_all(&self) -> Result<PipelineArtifacts, PipelineError> {
        self.run_through(Stage::Analyze)
    }

    fn write_config(&self) -> Result<(), PipelineError> {
        save_text(&self.config.to_toml(), &self.path(CONFIG_FILE))
            .map_err(|e| PipelineError::Config(e.to_string()))
    }

    // ---- stages ----

    fn generate(&self) -> Result<(Vec<String>, Value), PipelineError> {
        let stage = Stage::Generate;
        let n = self.config.profiles;
        let mut state = self.config.seed;
        let mut seen = BTreeSet::new();
        let mut profiles = Vec::with_capacity(n);
        let mut duplicates = 0usize;
        let max_attempts = n.saturating_mul(20).max(100);
        for _ in 0..max_attempts {
            if profiles.len() == n {
                break;
            }
            let p = sample_profile(splitmix64(&mut state), &self.catalog).map_err(input_fail(stage))?;
            if seen.insert(p.id.clone()) {
                profiles.push(p);
            } else {
                duplicates += 1;
            }
        }
        if profiles.len() < n {
            return Err(fail(
                stage,
                FailureKind::Input,
                format!("catalog yields only {} distinct profiles", profiles.len()),
            ));
        }
        save_records(&profiles, &self.path(PROFILES_FILE)).map_err(store_fail(stage))?;
        Ok((
            vec![PROFILES_FILE.into()],
            json!({"profiles": n, "duplicates_skipped": duplicates}),
        ))
    }

    fn load_profiles(&self, stage: Stage) -> Result<Vec<StudentProfile>, PipelineError> {
        load_records(&self.path(PROFILES_FILE)).map_err(store_fail(stage))
    }

    fn score(&self) -> Result<(Vec<String>, Value), PipelineError> {
        let stage = Stage::Score;
        let profiles = self.load_profiles(stage)?;
        let sc = &self.config.scoring;
        let base = Protocol::new(&self.gateway, &self.catalog, &self.prompts, self.config.generation.clone())
            .with_max_asks(sc.max_asks)
            .with_clock(self.clock.clone());

        type Outcome = (Vec<Transcript>, Vec<ScoreRecord>, Vec<ScoringErrorRecord>, Vec<ScoringError>);
        let run_one = |p: &StudentProfile| -> Outcome {
            let mut out: Outcome = Default::default();
            let rounds = (0..sc.profile_repetitions)
                .map(|r| (ScoreKind::Profile, r))
                .chain((0..sc.behavior_repetitions).map(|r| (ScoreKind::Behavior, r)));
            for (kind, r) in rounds {
                let proto = base.for_repetition(r);
                let o = match kind {
                    ScoreKind::Profile => proto.profile_round(p),
                    ScoreKind::Behavior => proto.behavior_round(p, sc.n_turns),
                };
                out.0.push(o.transcript);
                match o.record {
                    Ok(rec) => out.1.push(rec),
                    Err(e) => {
                        out.2.push(ScoringErrorRecord {
                            profile_id: p.id.clone(),
                            kind,
                            repetition: r,
                            error: e.to_string(),
                        });
                        out.3.push(e);
                    }
                }
            }
            out
        };

        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.gateway.parallelism())
            .build()
            .map_err(|e| fail(stage, FailureKind::Io, e))?;
        let outcomes: Vec<Outcome> = pool.install(|| profiles.par_iter().map(run_one).collect());

        let mut transcripts = Vec::new();
        let mut records = Vec::new();
        let mut errors = Vec::new();
        let mut backend_errors = 0usize;
        for (t, r, e, raw) in outcomes {
            transcripts.extend(t);
            records.extend(r);
            errors.extend(e);
            backend_errors += raw.iter().filter(|e| matches!(e, ScoringError::Gateway(_))).count();
        }
        save_records(&transcripts, &self.path(TRANSCRIPTS_FILE)).map_err(store_fail(stage))?;
        save_records(&records, &self.path(SCORES_INITIAL_FILE)).map_err(store_fail(stage))?;
        save_records(&errors, &self.path(SCORING_ERRORS_FILE)).map_err(store_fail(stage))?;

        let eligible = eligible_ids(&records).len();
        if eligible == 0 {
            let kind = if backend_errors > 0 {
                FailureKind::Backend
            } else {
                FailureKind::Parse
            };
            let first = errors.first().map(|e| e.error.clone()).unwrap_or_default();
            return Err(fail(
                stage,
                kind,
                format!("no profile received both scores ({} errors; first: {first})", errors.len()),
            ));
        }
        let failed_profiles: BTreeSet<&str> = errors.iter().map(|e| e.profile_id.as_str()).collect();
        Ok((
            vec![
                TRANSCRIPTS_FILE.into(),
                SCORES_INITIAL_FILE.into(),
                SCORING_ERRORS_FILE.into(),
            ],
            json!({
                "scoring_dialogues": transcripts.len(),
                "score_records": records.len(),
                "scoring_errors": errors.len(),
                "profiles_with_errors": failed_profiles.len(),
                "eligible_profiles": eligible,
                "excluded_profiles": profiles.len() - eligible,
            }),
        ))
    }

    fn graph(&self) -> Result<(Vec<String>, Value), PipelineError> {
        let stage = Stage::Graph;
        let profiles = self.load_profiles(stage)?;
        let records: Vec<ScoreRecord> =
            load_records(&self.path(SCORES_INITIAL_FILE)).map_err(store_fail(stage))?;
        let eligible = eligible_ids(&records);
        let nodes: Vec<&StudentProfile> = profiles.iter().filter(|p| eligible.contains(&p.id)).collect();

        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.gateway.parallelism())
            .build()
            .map_err(|e| fail(stage, FailureKind::Io, e))?;
        let embedded: Vec<Result<EmbeddingRecord, PipelineError>> = pool.install(|| {
            nodes
                .par_iter()
                .map(|p| {
                    let text = render_profile(p, &self.catalog, RenderingVersion::V1)
                        .map_err(input_fail(stage))?
                        .text;
                    let raw = self
                        .gateway
                        .embed(&text)
                        .map_err(|e: GatewayError| fail(stage, FailureKind::Backend, format!("{}: {e}", p.id)))?;
                    let values = normalize_embedding(&raw.values)
                        .map_err(|e| fail(stage, FailureKind::Input, format!("{}: {e}", p.id)))?;
                    Ok(EmbeddingRecord {
                        profile_id: p.id.clone(),
                        values,
                    })
                })
                .collect()
        });
        let embeddings: Vec<EmbeddingRecord> = embedded.into_iter().collect::<Result<_, _>>()?;
        save_records(&embeddings, &self.path(EMBEDDINGS_FILE)).map_err(store_fail(stage))?;

        let ids: Vec<String> = embeddings.iter().map(|e| e.profile_id.clone()).collect();
        let vectors: Vec<Vec<f64>> = embeddings.into_iter().map(|e| e.values).collect();
        let graph = build_graph(ids, vectors, self.config.threshold).map_err(input_fail(stage))?;
        let file = GraphFile {
            summary: graph.summary(),
            node_ids: graph.node_ids().to_vec(),
            edges: graph.edges().collect(),
        };
        save_json(&file, &self.path(GRAPH_FILE)).map_err(store_fail(stage))?;
        Ok((
            vec![EMBEDDINGS_FILE.into(), GRAPH_FILE.into()],
            json!({"nodes": file.summary.nodes, "edges": file.summary.edges}),
        ))
    }

    fn propagate(&self) -> Result<(Vec<String>, Value), PipelineError> {
        let stage = Stage::Propagate;
        let file: GraphFile = load_json(&self.path(GRAPH_FILE)).map_err(store_fail(stage))?;
        let records: Vec<ScoreRecord> =
            load_records(&self.path(SCORES_INITIAL_FILE)).map_err(store_fail(stage))?;
        let means = initial_means(&records);
        let graph = SimilarityGraph::from_edges(file.node_ids.clone(), &file.edges).map_err(input_fail(stage))?;
        let adj = normalize_adjacency(&graph);

        let mut out = Vec::new();
        let mut summaries = Vec::new();
        for kind in ScoreKind::ALL {
            let m = means.get(&kind).cloned().unwrap_or_default();
            let values = file
                .node_ids
                .iter()
                .map(|id| {
                    m.get(id)
                        .copied()
                        .ok_or_else(|| fail(stage, FailureKind::Input, format!("{id} has no initial {kind:?} score")))
                })
                .collect::<Result<Vec<f64>, _>>()?;
            let s0 = ScoreVector::initial(kind, values);
            let p = propagate(&s0, &adj, self.config.propagation).map_err(input_fail(stage))?;
            let scorer = format!("propagation(alpha={})", self.config.propagation.alpha);
            for (id, v) in file.node_ids.iter().zip(&p.scores.values) {
                out.push(ScoreRecord {
                    profile_id: id.clone(),
                    kind,
                    phase: ScorePhase::Propagated,
                    value: *v,
                    explanation: format!("after {} iteration(s)", p.iterations),
                    scorer: scorer.clone(),
                    timestamp: self.clock.now(),
                    repetition: None,
                    raw_value: None,
                });
            }
            summaries.push(PropagationSummary {
                kind,
                iterations: p.iterations,
                residual: p.residual,
                converged: p.converged,
                residuals_inf: p.residuals_inf,
                residuals_l2: p.residuals_l2,
            });
        }
        save_records(&out, &self.path(SCORES_PROPAGATED_FILE)).map_err(store_fail(stage))?;
        save_json(&summaries, &self.path(PROPAGATION_FILE)).map_err(store_fail(stage))?;
        Ok((
            vec![SCORES_PROPAGATED_FILE.into(), PROPAGATION_FILE.into()],
            json!({"converged": summaries.iter().all(|s| s.converged)}),
        ))
    }

    fn filter(&self) -> Result<(Vec<String>, Value), PipelineError> {
        let stage = Stage::Filter;
        let f = &self.config.filter;
        let scores = match f.phase {
            FilterPhase::Propagated => by_kind(
                &load_records::<ScoreRecord>(&self.path(SCORES_PROPAGATED_FILE)).map_err(store_fail(stage))?,
            ),
            FilterPhase::Initial => initial_means(
                &load_records::<ScoreRecord>(&self.path(SCORES_INITIAL_FILE)).map_err(store_fail(stage))?,
            ),
        };
        let p = scores.get(&ScoreKind::Profile).cloned().unwrap_or_default();
        let b = scores.get(&ScoreKind::Behavior).cloned().unwrap_or_default();
        let ids: Vec<String> = p.keys().filter(|id| b.contains_key(*id)).cloned().collect();
        let pv = ScoreVector::initial(ScoreKind::Profile, ids.iter().map(|id| p[id]).collect());
        let bv = ScoreVector::initial(ScoreKind::Behavior, ids.iter().map(|id| b[id]).collect());
        let selected = filter_candidates(&ids, &pv, &bv, f.threshold, f.rule).map_err(input_fail(stage))?;
        let set = CandidateSet {
            run_id: self.config.run_id(),
            threshold: f.threshold,
            phase: f.phase,
            rule: f.rule,
            ids: selected,
        };
        save_json(&set, &self.path(CANDIDATES_FILE)).map_err(store_fail(stage))?;
        Ok((vec![CANDIDATES_FILE.into()], json!({"candidates": set.len()})))
    }

    fn score_maps(&self, stage: Stage) -> Result<(KindScores, KindScores), PipelineError> {
        let initial =
            initial_means(&load_records::<ScoreRecord>(&self.path(SCORES_INITIAL_FILE)).map_err(store_fail(stage))?);
        let propagated =
            by_kind(&load_records::<ScoreRecord>(&self.path(SCORES_PROPAGATED_FILE)).map_err(store_fail(stage))?);
        // Initial scores restricted to the graph population, so both phases rank the same agents.
        let nodes: BTreeSet<&String> = propagated.values().flat_map(|m| m.keys()).collect();
        let initial = initial
            .into_iter()
            .map(|(k, m)| (k, m.into_iter().filter(|(id, _)| nodes.contains(id)).collect()))
            .collect();
        Ok((initial, propagated))
    }

    fn rank(&self) -> Result<(Vec<String>, Value), PipelineError> {
        let stage = Stage::Rank;
        let (initial, propagated) = self.score_maps(stage)?;
        let rankings = rank_all(&initial, &propagated, self.config.metrics.tie_break).map_err(input_fail(stage))?;
        save_json(&rankings, &self.path(RANKINGS_FILE)).map_err(store_fail(stage))?;
        Ok((vec![RANKINGS_FILE.into()], json!({"lists": rankings.lists.len()})))
    }

    fn report(&self) -> Result<(Vec<String>, Value), PipelineError> {
        let stage = Stage::Report;
        let m = &self.config.metrics;
        let scheme = GradeScheme {
            cutpoints: m.grade_cutpoints.clone(),
        };
        let (gold, mut outputs): (GoldStandard, Vec<String>) = match &self.config.gold {
            GoldConfig::None => {
                return Ok((vec![], json!({"skipped": "no gold source configured"})));
            }
            GoldConfig::File { path } => {
                let dump: AnnotationDump = load_json(path).map_err(store_fail(stage))?;
                (
                    dump.to_gold(m.relevance_threshold, &scheme).map_err(input_fail(stage))?,
                    vec![],
                )
            }
            GoldConfig::Simulated { experts, turns } => {
                let dump = self.simulate_experts(*experts, *turns)?;
                save_json(&dump, &self.path(ANNOTATION_DUMP)).map_err(store_fail(stage))?;
                (
                    dump.to_gold(m.relevance_threshold, &scheme).map_err(input_fail(stage))?,
                    vec![ANNOTATION_LOG.into(), ANNOTATION_DUMP.into()],
                )
            }
        };
        let (initial, propagated) = self.score_maps(stage)?;
        let report = build_report(&initial, &propagated, &gold, &m.ks, m.tie_break).map_err(input_fail(stage))?;
        save_json(&report, &self.path(REPORT_FILE)).map_err(store_fail(stage))?;
        save_text(&report.render_table(), &self.path(REPORT_TABLE_FILE)).map_err(store_fail(stage))?;
        outputs.extend([REPORT_FILE.into(), REPORT_TABLE_FILE.into()]);
        Ok((outputs, json!({"annotated_agents": report.agents})))
    }

    /// Scripted experts interview every candidate through the annotation
    /// store, then rate it near ten times its mean initial score with a
    /// deterministic per-(agent, expert) offset of at most 5 points.
    fn simulate_experts(&self, experts: usize, turns: usize) -> Result<AnnotationDump, PipelineError> {
        let stage = Stage::Report;
        let profiles = self.load_profiles(stage)?;
        let set: CandidateSet = load_json(&self.path(CANDIDATES_FILE)).map_err(store_fail(stage))?;
        if set.is_empty() {
            return Err(fail(stage, FailureKind::Input, "candidate set is empty; nothing to annotate"));
        }
        let log = self.path(ANNOTATION_LOG);
        if log.exists() {
            std::fs::remove_file(&log).map_err(|e| fail(stage, FailureKind::Io, e))?;
        }
        let store = AnnotationStore::open(
            StoreOptions {
                profiles: &profiles,
                candidates: &set.ids,
                catalog: &self.catalog,
                prompts: &self.prompts,
                gateway: self.gateway.clone(),
                gen: self.config.generation.clone(),
                clock: self.clock.clone(),
                config: ServiceConfig {
                    min_turns: turns,
                    ..ServiceConfig::default()
                },
            },
            &log,
        )
        .map_err(input_fail(stage))?;
        let initial =
            initial_means(&load_records::<ScoreRecord>(&self.path(SCORES_INITIAL_FILE)).map_err(store_fail(stage))?);
        let service = |e: crate::service::ServiceError| match e {
            crate::service::ServiceError::Backend(_) => fail(stage, FailureKind::Backend, e),
            other => fail(stage, FailureKind::Input, other),
        };
        for id in &set.ids {
            let mean = ScoreKind::ALL
                .iter()
                .filter_map(|k| initial.get(k).and_then(|m| m.get(id)))
                .sum::<f64>()
                / 2.0;
            for e in 0..experts {
                let expert = format!("expert-{}", e + 1);
                let session = store.create_session(id, &expert).map_err(service)?;
                for t in 0..turns {
                    store
                        .post_turn(&session.id, EXPERT_PROMPTS[t % EXPERT_PROMPTS.len()])
                        .map_err(service)?;
                }
                let h = hash64(format!("{}:{id}:{expert}", self.config.seed).as_bytes());
                let offset = (h % 11) as f64 - 5.0;
                let score = (mean * 10.0 + offset).round().clamp(1.0, 100.0) as i64;
                store
                    .submit_rating(
                        &session.id,
                        RatingRequest {
                            score,
                            justification: format!("scripted rating after {turns} turns"),
                            agreements: vec![
                                Agreement {
                                    item: "profile".into(),
                                    level: (1 + (h >> 8) % 5) as u8,
                                },
                                Agreement {
                                    item: "behavior".into(),
                                    level: (1 + (h >> 16) % 5) as u8,
                                },
                            ],
                        },
                    )
                    .map_err(service)?;
            }
        }
        store.export().map_err(service)
    }

    fn analyze(&self) -> Result<(Vec<String>, Value), PipelineError> {
        let stage = Stage::Analyze;
        let a = &self.config.analysis;
        if !a.enabled {
            return Ok((vec![], json!({"skipped": "analysis disabled"})));
        }
        let profiles = self.load_profiles(stage)?;
        let propagated =
            by_kind(&load_records::<ScoreRecord>(&self.path(SCORES_PROPAGATED_FILE)).map_err(store_fail(stage))?);
        let set: CandidateSet = load_json(&self.path(CANDIDATES_FILE)).map_err(store_fail(stage))?;
        let mut outputs: Vec<String> = Vec::new();
        let mut stats = serde_json::Map::new();

        let scored: Vec<StudentProfile> = profiles
            .iter()
            .filter(|p| ScoreKind::ALL.iter().all(|k| propagated.get(k).is_some_and(|m| m.contains_key(&p.id))))
            .cloned()
            .collect();
        if scored.len() >= crate::analysis::MIN_ROWS {
            let x = one_hot_encode(&scored, &self.catalog).map_err(input_fail(stage))?;
            for kind in ScoreKind::ALL {
                let name = kind.as_str();
                let y: Vec<f64> = scored.iter().map(|p| propagated[&kind][&p.id]).collect();
                let model = fit_forest(&x, &y, &a.forest).map_err(input_fail(stage))?;
                let mut summary = json!({
                    "target": format!("propagated {name} score"),
                    "params": model.params,
                    "n_trees": model.n_trees(),
                    "rows": x.n_rows(),
                    "columns": x.n_columns(),
                    "train_rows": model.split.train.len(),
                    "test_rows": model.split.test.len(),
                    "train_mse": model.train_mse,
                    "test_mse": model.test_mse,
                    "importance_defined": model.importance_defined,
                });
                match relative_importance(&model) {
                    Ok(ranking) => {
                        let csv = format!("analysis/importance_{name}.csv");
                        let svg = format!("analysis/importance_{name}.svg");
                        save_text(&ranking.to_csv(), &self.path(&csv)).map_err(store_fail(stage))?;
                        save_text(
                            &importance_svg(&ranking, 20, &format!("Relative importance ({name} score)")),
                            &self.path(&svg),
                        )
                        .map_err(store_fail(stage))?;
                        summary["top_features"] = json!(ranking.entries.iter().take(10).collect::<Vec<_>>());
                        outputs.extend([csv, svg]);
                    }
                    Err(e) => {
                        summary["importance_error"] = json!(e.to_string());
                    }
                }
                if a.permutation && model.importance_defined {
                    let rows = if model.split.test.is_empty() {
                        &model.split.train
                    } else {
                        &model.split.test
                    };
                    let perm = permutation_importance(&model, &x.columns_f64(), &y, rows, a.forest.seed)
                        .map_err(input_fail(stage))?;
                    let mut csv = String::from("feature,permutation_importance\n");
                    for (f, v) in model.feature_names.iter().zip(&perm) {
                        csv.push_str(&format!("{f},{v}\n"));
                    }
                    let path = format!("analysis/permutation_{name}.csv");
                    save_text(&csv, &self.path(&path)).map_err(store_fail(stage))?;
                    outputs.push(path);
                }
                let path = format!("analysis/forest_{name}.json");
                save_json(&summary, &self.path(&path)).map_err(store_fail(stage))?;
                outputs.push(path);
            }
        } else {
            stats.insert("forest_skipped".into(), json!(format!("fewer than {} scored profiles", crate::analysis::MIN_ROWS)));
        }

        if set.is_empty() {
            stats.insert("distribution_skipped".into(), json!("candidate set is empty"));
        } else {
            let selected: Vec<StudentProfile> = profiles.iter().filter(|p| set.contains(&p.id)).cloned().collect();
            let shift = distribution_report(&profiles, &selected, &self.catalog).map_err(input_fail(stage))?;
            save_text(&shift.to_csv(), &self.path("analysis/distribution.csv")).map_err(store_fail(stage))?;
            save_json(&shift, &self.path("analysis/distribution.json")).map_err(store_fail(stage))?;
            save_text(
                &distribution_svg(&shift, &["Gender", "Major", "MBTI", "Standing"]),
                &self.path("analysis/distribution.svg"),
            )
            .map_err(store_fail(stage))?;
            outputs.extend([
                "analysis/distribution.csv".into(),
                "analysis/distribution.json".into(),
                "analysis/distribution.svg".into(),
            ]);
        }
        Ok((outputs, Value::Object(stats)))
    }

    // ---- metadata ----

    fn write_metadata(&self) -> Result<PipelineArtifacts, PipelineError> {
        let io = |e: StoreError| PipelineError::Config(format!("run metadata: {e}"));
        let mut stages = Vec::new();
        let mut usage = Usage::default();
        let mut counts = BTreeMap::new();
        let mut artifacts = BTreeMap::new();
        for stage in Stage::ALL {
            let Some(m) = self.manifest(stage) else {
                continue;
            };
            stages.push(stage);
            if let Ok(u) = serde_json::from_value::<Usage>(m.stats["usage"].clone()) {
                usage.chat_calls += u.chat_calls;
                usage.embed_calls += u.embed_calls;
                usage.tokens += u.tokens;
            }
            if let Value::Object(s) = &m.stats {
                for (k, v) in s {
                    if let Some(n) = v.as_u64() {
                        counts.insert(k.clone(), n as usize);
                    }
                }
            }
            for (f, h) in &m.outputs {
                artifacts.insert(
                    f.clone(),
                    ArtifactRef {
                        path: f.clone(),
                        sha256: h.clone(),
                    },
                );
            }
        }
        artifacts.insert(
            CONFIG_FILE.into(),
            ArtifactRef {
                path: CONFIG_FILE.into(),
                sha256: file_hash(&self.path(CONFIG_FILE)).map_err(io)?,
            },
        );
        let graph = load_json::<GraphFile>(&self.path(GRAPH_FILE)).ok().map(|g| g.summary);
        let propagation = load_json::<Vec<PropagationSummary>>(&self.path(PROPAGATION_FILE))
            .unwrap_or_default()
            .into_iter()
            .map(|mut s| {
                // Full histories live in propagation.json.
                s.residuals_inf.clear();
                s.residuals_l2.clear();
                s
            })
            .collect();
        let meta = RunMetadata {
            run_id: self.config.run_id(),
            config_hash: self.config.hash(),
            backend: self.gateway.backend_name().to_string(),
            rendering_version: RenderingVersion::V1.as_str().into(),
            prompt_hashes: self.prompts.hashes(),
            seed: self.config.seed,
            stages,
            counts,
            usage,
            tokens_per_agent: usage.tokens as f64 / self.config.profiles as f64,
            graph,
            propagation,
            analysis_defaults: json!(self.config.analysis.forest),
            artifacts,
        };
        save_json(&meta, &self.path(METADATA_FILE)).map_err(io)?;
        let timings = self.timings.lock().expect("timings lock").clone();
        save_json(&timings, &self.path(TIMINGS_FILE)).map_err(io)?;
        Ok(PipelineArtifacts {
            dir: self.dir.clone(),
            metadata: meta,
        })
    }
}

/// Profiles holding at least one initial score of each kind.
fn eligible_ids(records: &[ScoreRecord]) -> BTreeSet<String> {
    let mut kinds: BTreeMap<&str, BTreeSet<ScoreKind>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.phase == ScorePhase::Initial) {
        kinds.entry(&r.profile_id).or_default().insert(r.kind);
    }
    kinds
        .into_iter()
        .filter(|(_, k)| k.len() == ScoreKind::ALL.len())
        .map(|(id, _)| id.to_string())
        .collect()
}
