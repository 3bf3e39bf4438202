//! Python bindings. Structured values cross the boundary as plain dicts and lists.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use simstudent_core::gateway::{Gateway, StubBackend};
use simstudent_core::graph::{self, PropagationParams, ScoreVector};
use simstudent_core::metrics::{self, GoldStandard, GradeScheme, Ranking, TieBreak};
use simstudent_core::pipeline::{self as pl, BackendConfig, CandidateRule, Pipeline, RunConfig, Stage};
use simstudent_core::profile::{self, AttributeCatalog, RenderingVersion, StudentProfile};
use simstudent_core::scoring::ScoreKind;

create_exception!(simstudent, PipelineError, PyException);

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Serialize through `json.loads` so callers receive native Python objects.
fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: serde::de::DeserializeOwned>(py: Python<'_>, obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = py.import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(value_err)
}

fn catalog(path: Option<PathBuf>) -> PyResult<AttributeCatalog> {
    match path {
        Some(p) => AttributeCatalog::load(&p).map_err(value_err),
        None => Ok(AttributeCatalog::default()),
    }
}

/// Sample one profile from the catalog. The same seed always yields the same profile.
#[pyfunction]
#[pyo3(signature = (seed, catalog_path=None))]
fn sample_profile(py: Python<'_>, seed: u64, catalog_path: Option<PathBuf>) -> PyResult<Py<PyAny>> {
    let c = catalog(catalog_path)?;
    let p = profile::sample_profile(seed, &c).map_err(value_err)?;
    Ok(to_py(py, &p)?.unbind())
}

/// Constraint violations of a profile dict as `{field, rule, message}`; empty when valid.
#[pyfunction]
#[pyo3(signature = (profile, catalog_path=None))]
fn validate_profile(py: Python<'_>, profile: &Bound<'_, PyAny>, catalog_path: Option<PathBuf>) -> PyResult<Py<PyAny>> {
    let p: StudentProfile = from_py(py, profile)?;
    let c = catalog(catalog_path)?;
    Ok(to_py(py, &profile::validate_profile(&p, &c).entries)?.unbind())
}

#[pyfunction]
#[pyo3(signature = (profile, catalog_path=None))]
fn render_profile(py: Python<'_>, profile: &Bound<'_, PyAny>, catalog_path: Option<PathBuf>) -> PyResult<String> {
    let p: StudentProfile = from_py(py, profile)?;
    let c = catalog(catalog_path)?;
    Ok(profile::render_profile(&p, &c, RenderingVersion::V1)
        .map_err(value_err)?
        .text)
}

/// Deterministic stub embedding of `text`, unit-normalized.
#[pyfunction]
fn stub_embedding(text: &str) -> PyResult<Vec<f64>> {
    let e = Gateway::stub(StubBackend::new()).embed(text).map_err(value_err)?;
    graph::normalize_embedding(&e.values).map_err(value_err)
}

/// Build the threshold graph over `embeddings` and propagate `scores` on it.
#[pyfunction]
#[pyo3(signature = (embeddings, scores, threshold=0.8, alpha=0.5, max_iterations=50, tol=1e-9))]
fn propagate(
    py: Python<'_>,
    embeddings: Vec<Vec<f64>>,
    scores: Vec<f64>,
    threshold: f64,
    alpha: f64,
    max_iterations: usize,
    tol: f64,
) -> PyResult<Py<PyAny>> {
    let ids = (0..embeddings.len()).map(|i| i.to_string()).collect();
    let unit = embeddings
        .iter()
        .map(|e| graph::normalize_embedding(e))
        .collect::<Result<Vec<_>, _>>()
        .map_err(value_err)?;
    let g = graph::build_graph(ids, unit, threshold).map_err(value_err)?;
    let adj = graph::normalize_adjacency(&g);
    let s0 = ScoreVector::initial(ScoreKind::Profile, scores);
    let params = PropagationParams {
        alpha,
        max_iterations,
        tol,
    };
    let out = graph::propagate(&s0, &adj, params).map_err(value_err)?;
    let result = serde_json::json!({
        "scores": out.scores.values,
        "iterations": out.iterations,
        "residual": out.residual,
        "converged": out.converged,
        "edges": g.edge_count(),
    });
    Ok(to_py(py, &result)?.unbind())
}

/// Agent ids whose scores exceed `threshold` under `rule` ("both", "either" or "average").
#[pyfunction]
#[pyo3(signature = (ids, profile_scores, behavior_scores, threshold=8.0, rule="both"))]
fn filter_candidates(
    ids: Vec<String>,
    profile_scores: Vec<f64>,
    behavior_scores: Vec<f64>,
    threshold: f64,
    rule: &str,
) -> PyResult<Vec<String>> {
    let rule = match rule {
        "both" => CandidateRule::Both,
        "either" => CandidateRule::Either,
        "average" => CandidateRule::Average,
        other => return Err(value_err(format!("unknown rule '{other}'"))),
    };
    pl::filter_candidates(
        &ids,
        &ScoreVector::initial(ScoreKind::Profile, profile_scores),
        &ScoreVector::initial(ScoreKind::Behavior, behavior_scores),
        threshold,
        rule,
    )
    .map_err(value_err)
}

fn ranked(scores: BTreeMap<String, f64>) -> PyResult<Ranking> {
    metrics::rank_agents(&scores, TieBreak::default()).map_err(value_err)
}

fn gold(expert_means: BTreeMap<String, f64>, relevance_threshold: f64) -> PyResult<GoldStandard> {
    GoldStandard::from_means(expert_means, relevance_threshold, &GradeScheme::default()).map_err(value_err)
}

/// Precision@K, NDCG@K and pairwise accuracy@K of `scores` against expert means.
#[pyfunction]
#[pyo3(signature = (scores, expert_means, k, relevance_threshold=8.0))]
fn ranking_metrics(
    py: Python<'_>,
    scores: BTreeMap<String, f64>,
    expert_means: BTreeMap<String, f64>,
    k: usize,
    relevance_threshold: f64,
) -> PyResult<Py<PyAny>> {
    let r = ranked(scores)?;
    let g = gold(expert_means, relevance_threshold)?;
    let result = serde_json::json!({
        "precision": metrics::precision_at_k(&r, &g, k).map_err(value_err)?,
        "ndcg": metrics::ndcg_at_k(&r, &g, k).map_err(value_err)?,
        "pairwise_accuracy": metrics::pairwise_accuracy_at_k(&r, &g, k).map_err(value_err)?,
    });
    Ok(to_py(py, &result)?.unbind())
}

#[pyfunction]
fn mae(a: BTreeMap<String, f64>, b: BTreeMap<String, f64>) -> PyResult<f64> {
    metrics::mae(&a, &b).map_err(value_err)
}

fn parse_stage(s: &str) -> PyResult<Stage> {
    Stage::ALL
        .into_iter()
        .find(|st| st.as_str() == s)
        .ok_or_else(|| value_err(format!("unknown stage '{s}'")))
}

/// Run the pipeline into `out_dir` through `last_stage` and return the run metadata.
/// Without a config file the offline stub backend is used.
#[pyfunction]
#[pyo3(signature = (out_dir, config=None, profiles=None, seed=None, score_plan=None, last_stage="analyze", force=false))]
#[allow(clippy::too_many_arguments)]
fn run_pipeline(
    py: Python<'_>,
    out_dir: PathBuf,
    config: Option<PathBuf>,
    profiles: Option<usize>,
    seed: Option<u64>,
    score_plan: Option<PathBuf>,
    last_stage: &str,
    force: bool,
) -> PyResult<Py<PyAny>> {
    let last = parse_stage(last_stage)?;
    let mut c = match &config {
        Some(p) => RunConfig::load(p).map_err(|e| PipelineError::new_err((e.to_string(), e.exit_code())))?,
        None => RunConfig::default(),
    };
    if let Some(n) = profiles {
        c.profiles = n;
    }
    if let Some(s) = seed {
        c.seed = s;
    }
    if score_plan.is_some() {
        c.backend = BackendConfig::Stub {
            score_plan,
            dimension: None,
        };
    }
    let art = py
        .detach(|| {
            let mut p = Pipeline::new(c, &out_dir)?;
            if force {
                p = p.force(Stage::ALL);
            }
            p.run_through(last)
        })
        .map_err(|e| PipelineError::new_err((e.to_string(), e.exit_code())))?;
    Ok(to_py(py, &art.metadata)?.unbind())
}

#[pymodule]
pub fn simstudent(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PipelineError", m.py().get_type::<PipelineError>())?;
    m.add_function(wrap_pyfunction!(sample_profile, m)?)?;
    m.add_function(wrap_pyfunction!(validate_profile, m)?)?;
    m.add_function(wrap_pyfunction!(render_profile, m)?)?;
    m.add_function(wrap_pyfunction!(stub_embedding, m)?)?;
    m.add_function(wrap_pyfunction!(propagate, m)?)?;
    m.add_function(wrap_pyfunction!(filter_candidates, m)?)?;
    m.add_function(wrap_pyfunction!(ranking_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(mae, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
