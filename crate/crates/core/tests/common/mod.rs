#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use simstudent_core::gateway::{Gateway, ScorePlan, StubBackend};
use simstudent_core::graph::{build_graph, normalize_adjacency, normalize_embedding, propagate, ScoreVector};
use simstudent_core::pipeline::{load_records, BackendConfig, GoldConfig, Pipeline, RunConfig, Stage, PROFILES_FILE};
use simstudent_core::profile::{render_profile, RenderingVersion, StudentProfile};
use simstudent_core::scoring::ScoreKind;

pub const CANDIDATE_TARGET: usize = 17;
pub const E2E_PROFILES: usize = 50;
pub const HIGH: (u8, u8) = (10, 9);
pub const LOW: (u8, u8) = (4, 5);

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn score_plan_fixture() -> PathBuf {
    fixture("score_plan_n50.json")
}

/// The N = 50 stub run used for determinism and candidate-count checks.
pub fn e2e_config() -> RunConfig {
    RunConfig {
        profiles: E2E_PROFILES,
        backend: BackendConfig::Stub {
            score_plan: Some(score_plan_fixture()),
            dimension: None,
        },
        gold: GoldConfig::Simulated { experts: 2, turns: 15 },
        ..RunConfig::default()
    }
}

pub fn generated_profiles(config: &RunConfig, dir: &Path) -> Vec<StudentProfile> {
    let p = Pipeline::new(config.clone(), dir).unwrap();
    p.run_stage(Stage::Generate).unwrap();
    load_records(&dir.join(PROFILES_FILE)).unwrap()
}

/// Count of agents whose propagated profile and behavior scores both exceed
/// `tau`, computed directly from the graph for a given plan.
pub fn planned_candidates(config: &RunConfig, profiles: &[StudentProfile], plan: &ScorePlan, tau: f64) -> usize {
    let gw = Gateway::stub(StubBackend::new());
    let catalog = simstudent_core::profile::AttributeCatalog::default();
    let ids: Vec<String> = profiles.iter().map(|p| p.id.clone()).collect();
    let emb: Vec<Vec<f64>> = profiles
        .iter()
        .map(|p| {
            let text = render_profile(p, &catalog, RenderingVersion::V1).unwrap().text;
            normalize_embedding(&gw.embed(&text).unwrap().values).unwrap()
        })
        .collect();
    let graph = build_graph(ids.clone(), emb, config.threshold).unwrap();
    let adj = normalize_adjacency(&graph);
    let mut prop: BTreeMap<ScoreKind, Vec<f64>> = BTreeMap::new();
    for kind in ScoreKind::ALL {
        let s0: Vec<f64> = ids
            .iter()
            .map(|id| {
                let e = &plan.scores[id];
                f64::from(match kind {
                    ScoreKind::Profile => e.profile.unwrap(),
                    ScoreKind::Behavior => e.behavior.unwrap(),
                })
            })
            .collect();
        let out = propagate(&ScoreVector::initial(kind, s0), &adj, config.propagation).unwrap();
        prop.insert(kind, out.scores.values);
    }
    (0..ids.len())
        .filter(|&i| prop[&ScoreKind::Profile][i] > tau && prop[&ScoreKind::Behavior][i] > tau)
        .count()
}
