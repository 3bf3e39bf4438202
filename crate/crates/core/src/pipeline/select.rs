use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::{CandidateRule, FilterPhase};
use crate::graph::ScoreVector;
use crate::metrics::{rank_agents, MetricsError, Phase, Ranking, ScoreSource, TieBreak};
use crate::scoring::ScoreKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub run_id: String,
    pub threshold: f64,
    pub phase: FilterPhase,
    pub rule: CandidateRule,
    /// Sorted ascending.
    pub ids: Vec<String>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.ids.binary_search_by(|x| x.as_str().cmp(id)).is_ok()
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("candidate filter: {0}")]
pub struct FilterError(pub String);

/// Agents whose scores exceed `threshold` under `rule`. Comparison is strict.
pub fn filter_candidates(
    ids: &[String],
    profile: &ScoreVector,
    behavior: &ScoreVector,
    threshold: f64,
    rule: CandidateRule,
) -> Result<Vec<String>, FilterError> {
    if profile.kind != ScoreKind::Profile || behavior.kind != ScoreKind::Behavior {
        return Err(FilterError("expected (profile, behavior) score vectors".into()));
    }
    if ids.len() != profile.len() || ids.len() != behavior.len() {
        return Err(FilterError(format!(
            "{} ids, {} profile scores, {} behavior scores",
            ids.len(),
            profile.len(),
            behavior.len()
        )));
    }
    if !threshold.is_finite() {
        return Err(FilterError(format!("threshold {threshold} is not finite")));
    }
    let mut out: Vec<String> = ids
        .iter()
        .zip(profile.values.iter().zip(&behavior.values))
        .filter(|(_, (&p, &b))| match rule {
            CandidateRule::Both => p > threshold && b > threshold,
            CandidateRule::Either => p > threshold || b > threshold,
            CandidateRule::Average => (p + b) / 2.0 > threshold,
        })
        .map(|(id, _)| id.clone())
        .collect();
    out.sort();
    Ok(out)
}

/// Score source applied to per-kind maps. `Avg` covers agents present in both.
pub fn source_scores(
    source: ScoreSource,
    by_kind: &BTreeMap<ScoreKind, BTreeMap<String, f64>>,
) -> BTreeMap<String, f64> {
    let get = |k| by_kind.get(&k).cloned().unwrap_or_default();
    match source {
        ScoreSource::Profile => get(ScoreKind::Profile),
        ScoreSource::Behavior => get(ScoreKind::Behavior),
        ScoreSource::Avg => {
            let p = get(ScoreKind::Profile);
            let b = get(ScoreKind::Behavior);
            p.iter()
                .filter_map(|(id, x)| b.get(id).map(|y| (id.clone(), (x + y) / 2.0)))
                .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub source: ScoreSource,
    pub phase: Phase,
    pub order: Vec<String>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rankings {
    pub tie_break: TieBreak,
    pub lists: Vec<RankedList>,
}

pub fn rank_all(
    initial: &BTreeMap<ScoreKind, BTreeMap<String, f64>>,
    propagated: &BTreeMap<ScoreKind, BTreeMap<String, f64>>,
    tie_break: TieBreak,
) -> Result<Rankings, MetricsError> {
    let mut lists = Vec::new();
    for (phase, scores) in [(Phase::Initial, initial), (Phase::Propagated, propagated)] {
        for source in [ScoreSource::Profile, ScoreSource::Behavior, ScoreSource::Avg] {
            let map = source_scores(source, scores);
            if map.is_empty() {
                continue;
            }
            let ranking: Ranking = rank_agents(&map, tie_break)?;
            lists.push(RankedList {
                source,
                phase,
                scores: ranking.order().iter().map(|id| map[id]).collect(),
                order: ranking.order().to_vec(),
            });
        }
    }
    Ok(Rankings { tie_break, lists })
}
