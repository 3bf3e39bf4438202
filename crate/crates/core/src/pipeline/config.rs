use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::analysis::ForestParams;
use crate::gateway::{GenConfig, HttpBackendConfig, DEFAULT_PARALLELISM};
use crate::graph::PropagationParams;
use crate::hashing::sha256_hex;
use crate::metrics::{default_ks, KSpec, TieBreak, DEFAULT_RELEVANCE_THRESHOLD};
use crate::scoring::{DEFAULT_MAX_ASKS, DEFAULT_TURNS};
use crate::service::DEFAULT_MIN_TURNS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendConfig {
    Stub {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        score_plan: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dimension: Option<usize>,
    },
    Http(HttpBackendConfig),
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Stub {
            score_plan: None,
            dimension: None,
        }
    }
}

impl BackendConfig {
    pub fn is_stub(&self) -> bool {
        matches!(self, BackendConfig::Stub { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    pub profile_repetitions: u32,
    pub behavior_repetitions: u32,
    pub n_turns: usize,
    pub max_asks: u32,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            profile_repetitions: 2,
            behavior_repetitions: 2,
            n_turns: DEFAULT_TURNS,
            max_asks: DEFAULT_MAX_ASKS,
        }
    }
}

/// How the two propagated scores combine against the candidate threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CandidateRule {
    /// Both scores exceed the threshold.
    #[default]
    Both,
    /// At least one score exceeds the threshold.
    Either,
    /// The mean of the two scores exceeds the threshold.
    Average,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterPhase {
    Initial,
    #[default]
    Propagated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub threshold: f64,
    pub rule: CandidateRule,
    pub phase: FilterPhase,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            threshold: 8.0,
            rule: CandidateRule::Both,
            phase: FilterPhase::Propagated,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub ks: Vec<KSpec>,
    pub relevance_threshold: f64,
    pub grade_cutpoints: Vec<f64>,
    pub tie_break: TieBreak,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            ks: default_ks(),
            relevance_threshold: DEFAULT_RELEVANCE_THRESHOLD,
            grade_cutpoints: crate::metrics::GradeScheme::default().cutpoints,
            tie_break: TieBreak::default(),
        }
    }
}

/// Where expert gold scores for the report come from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum GoldConfig {
    /// No report stage output beyond rankings.
    #[default]
    None,
    /// An annotation export (JSON dump) written by the service.
    File { path: PathBuf },
    /// Scripted raters driving the annotation store on the configured backend.
    Simulated {
        #[serde(default = "default_experts")]
        experts: usize,
        #[serde(default = "default_min_turns")]
        turns: usize,
    },
}

fn default_experts() -> usize {
    2
}

fn default_min_turns() -> usize {
    DEFAULT_MIN_TURNS
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub enabled: bool,
    pub forest: ForestParams,
    pub permutation: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            enabled: true,
            forest: ForestParams::default(),
            permutation: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub profiles: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub catalog: Option<PathBuf>,
    pub backend: BackendConfig,
    pub parallelism: usize,
    pub generation: GenConfig,
    pub scoring: ScoringConfig,
    pub threshold: f64,
    pub propagation: PropagationParams,
    pub filter: FilterConfig,
    pub metrics: MetricsConfig,
    pub gold: GoldConfig,
    pub analysis: AnalysisConfig,
    /// Stamp records with a fixed epoch instead of the wall clock. Defaults
    /// to true on the stub backend.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed_clock: Option<bool>,
    /// Not part of the config hash: the same run may be written anywhere.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            profiles: 559,
            catalog: None,
            backend: BackendConfig::default(),
            parallelism: DEFAULT_PARALLELISM,
            generation: GenConfig::default(),
            scoring: ScoringConfig::default(),
            threshold: 0.8,
            propagation: PropagationParams::default(),
            filter: FilterConfig::default(),
            metrics: MetricsConfig::default(),
            gold: GoldConfig::None,
            analysis: AnalysisConfig::default(),
            fixed_clock: None,
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&raw)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        // Relative paths inside the file are relative to the file.
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(c) = cfg.catalog.as_mut() {
            rebase(c);
        }
        if let BackendConfig::Stub { score_plan: Some(p), .. } = &mut cfg.backend {
            rebase(p);
        }
        if let GoldConfig::File { path } = &mut cfg.gold {
            rebase(path);
        }
        if let Some(o) = cfg.output_dir.as_mut() {
            rebase(o);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.profiles == 0 {
            return bad("profiles must be at least 1".into());
        }
        let tau = self.filter.threshold;
        if !(tau > 1.0 && tau < 10.0) {
            return bad(format!("candidate threshold {tau} outside (1, 10)"));
        }
        if !(-1.0..=1.0).contains(&self.threshold) {
            return bad(format!("graph threshold {} outside [-1, 1]", self.threshold));
        }
        if !(0.0..1.0).contains(&self.propagation.alpha) {
            return bad(format!("alpha {} outside [0, 1)", self.propagation.alpha));
        }
        if self.propagation.tol.is_nan() || self.propagation.tol < 0.0 {
            return bad("tol must be non-negative".into());
        }
        if self.parallelism == 0 {
            return bad("parallelism must be at least 1".into());
        }
        let s = &self.scoring;
        if s.profile_repetitions == 0 || s.behavior_repetitions == 0 || s.n_turns == 0 || s.max_asks == 0 {
            return bad("repetitions, n_turns and max_asks must be positive".into());
        }
        if self.metrics.ks.is_empty() || self.metrics.ks.contains(&KSpec::Fixed(0)) {
            return bad("metric Ks must be non-empty and positive".into());
        }
        crate::metrics::GradeScheme {
            cutpoints: self.metrics.grade_cutpoints.clone(),
        }
        .validate()
        .map_err(|e| PipelineError::Config(e.to_string()))?;
        self.generation
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        let mut paths: Vec<&Path> = Vec::new();
        if let Some(c) = &self.catalog {
            paths.push(c);
        }
        if let BackendConfig::Stub { score_plan: Some(p), .. } = &self.backend {
            paths.push(p);
        }
        if let GoldConfig::File { path } = &self.gold {
            paths.push(path);
        }
        if let Some(p) = paths.iter().find(|p| !p.exists()) {
            return bad(format!("{} does not exist", p.display()));
        }
        Ok(())
    }

    pub fn uses_fixed_clock(&self) -> bool {
        self.fixed_clock.unwrap_or(self.backend.is_stub())
    }

    /// Hash of everything that determines the artifacts; the output location is excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        sha256_hex(serde_json::to_string(&c).expect("run config serializes").as_bytes())
    }

    pub fn run_id(&self) -> String {
        format!("run-{}", &self.hash()[..12])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_the_published_constants() {
        let c = RunConfig::default();
        assert_eq!(c.scoring.n_turns, 15);
        assert_eq!(c.propagation.alpha, 0.5);
        assert_eq!(c.filter.threshold, 8.0);
        assert_eq!(c.analysis.forest.n_trees, 100);
        assert_eq!(c.analysis.forest.test_frac, 0.2);
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_overrides() {
        let c = RunConfig::default();
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);

        let partial: RunConfig = toml::from_str(
            r#"
            profiles = 50
            threshold = 0.75
            [filter]
            threshold = 7.5
            rule = "average"
            [gold]
            source = "simulated"
            experts = 3
            [backend]
            kind = "http"
            base_url = "http://localhost:9"
            "#,
        )
        .unwrap();
        assert_eq!(partial.profiles, 50);
        assert_eq!(partial.filter.rule, CandidateRule::Average);
        assert_eq!(partial.gold, GoldConfig::Simulated { experts: 3, turns: 15 });
        assert!(!partial.uses_fixed_clock());
        assert!(toml::from_str::<RunConfig>("bogus = 1").is_err());
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut c = RunConfig {
            profiles: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c.profiles = 5;
        c.filter.threshold = 10.0;
        assert!(c.validate().is_err());
        c.filter.threshold = 8.0;
        c.catalog = Some("/definitely/not/here.toml".into());
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = RunConfig::default();
        let b = RunConfig {
            output_dir: Some("elsewhere".into()),
            ..Default::default()
        };
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig {
            seed: 7,
            ..Default::default()
        };
        assert_ne!(a.hash(), c.hash());
    }
}
