//! Ranking-quality and error metrics against expert gold scores.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::scoring::ScoreKind;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("invalid metric input: {0}")]
    Input(String),
}

fn input(msg: impl Into<String>) -> MetricsError {
    MetricsError::Input(msg.into())
}

/// Tie-break policy applied when ordering agents by score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    /// Higher score first; equal scores by ascending agent id.
    #[default]
    ScoreDescIdAsc,
}

impl TieBreak {
    pub fn id(self) -> &'static str {
        match self {
            TieBreak::ScoreDescIdAsc => "score_desc_id_asc",
        }
    }
}

/// Agents ordered best-first together with the scores that produced the order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    order: Vec<String>,
    scores: BTreeMap<String, f64>,
    tie_break: TieBreak,
}

impl Ranking {
    pub fn order(&self) -> &[String] {
        &self.order
    }

    pub fn scores(&self) -> &BTreeMap<String, f64> {
        &self.scores
    }

    pub fn tie_break(&self) -> TieBreak {
        self.tie_break
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn top(&self, k: usize) -> &[String] {
        &self.order[..k.min(self.order.len())]
    }
}

pub fn rank_agents(scores: &BTreeMap<String, f64>, tie_break: TieBreak) -> Result<Ranking, MetricsError> {
    if let Some((id, v)) = scores.iter().find(|(_, v)| !v.is_finite()) {
        return Err(input(format!("score for {id} is not finite ({v})")));
    }
    let mut order: Vec<String> = scores.keys().cloned().collect();
    match tie_break {
        // Keys come out of the map sorted ascending, and the sort is stable.
        TieBreak::ScoreDescIdAsc => order.sort_by(|a, b| scores[b].total_cmp(&scores[a])),
    }
    Ok(Ranking {
        order,
        scores: scores.clone(),
        tie_break,
    })
}

/// Cut-points mapping a 1-10 expert mean to an integer relevance grade: the
/// grade is the number of cut-points at or below the mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeScheme {
    pub cutpoints: Vec<f64>,
}

impl Default for GradeScheme {
    fn default() -> Self {
        GradeScheme {
            cutpoints: vec![4.0, 6.0, 7.0, 8.0],
        }
    }
}

impl GradeScheme {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.cutpoints.iter().any(|c| !c.is_finite()) {
            return Err(input("grade cut-points must be finite"));
        }
        if self.cutpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(input("grade cut-points must be strictly increasing"));
        }
        Ok(())
    }

    pub fn grade(&self, mean: f64) -> u32 {
        self.cutpoints.iter().filter(|&&c| mean >= c).count() as u32
    }
}

pub const DEFAULT_RELEVANCE_THRESHOLD: f64 = 8.0;

/// Expert reference: mean scores, the relevant set, and graded relevance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldStandard {
    pub expert_means: BTreeMap<String, f64>,
    pub relevant: BTreeSet<String>,
    pub grades: BTreeMap<String, u32>,
    pub relevance_threshold: f64,
}

impl GoldStandard {
    pub fn from_means(
        expert_means: BTreeMap<String, f64>,
        relevance_threshold: f64,
        scheme: &GradeScheme,
    ) -> Result<Self, MetricsError> {
        scheme.validate()?;
        if let Some((id, _)) = expert_means.iter().find(|(_, v)| !v.is_finite()) {
            return Err(input(format!("expert mean for {id} is not finite")));
        }
        let relevant = expert_means
            .iter()
            .filter(|(_, &m)| m >= relevance_threshold)
            .map(|(id, _)| id.clone())
            .collect();
        let grades = expert_means
            .iter()
            .map(|(id, &m)| (id.clone(), scheme.grade(m)))
            .collect();
        Ok(GoldStandard {
            expert_means,
            relevant,
            grades,
            relevance_threshold,
        })
    }

    /// Gold with explicit grades; relevant agents are those with a positive grade.
    pub fn from_grades(grades: BTreeMap<String, u32>) -> Self {
        GoldStandard {
            expert_means: grades.iter().map(|(k, &g)| (k.clone(), f64::from(g))).collect(),
            relevant: grades.iter().filter(|(_, &g)| g > 0).map(|(k, _)| k.clone()).collect(),
            grades,
            relevance_threshold: 1.0,
        }
    }

    pub fn grade(&self, id: &str) -> u32 {
        self.grades.get(id).copied().unwrap_or(0)
    }
}

fn check_k(ranking: &Ranking, k: usize) -> Result<(), MetricsError> {
    if k == 0 || k > ranking.len() {
        return Err(input(format!("K = {k} outside [1, {}]", ranking.len())));
    }
    Ok(())
}

pub fn precision_at_k(ranking: &Ranking, gold: &GoldStandard, k: usize) -> Result<f64, MetricsError> {
    check_k(ranking, k)?;
    let hits = ranking.top(k).iter().filter(|id| gold.relevant.contains(*id)).count();
    Ok(hits as f64 / k as f64)
}

fn dcg(grades: impl Iterator<Item = u32>) -> f64 {
    grades
        .enumerate()
        .map(|(i, g)| (2f64.powi(g as i32) - 1.0) / ((i + 2) as f64).log2())
        .sum()
}

/// Normalized discounted cumulative gain. The ideal ordering is taken over
/// every graded agent in the ranking. Returns 0.0 when no ranked agent has a
/// positive grade.
pub fn ndcg_at_k(ranking: &Ranking, gold: &GoldStandard, k: usize) -> Result<f64, MetricsError> {
    check_k(ranking, k)?;
    let mut ideal: Vec<u32> = ranking.order.iter().map(|id| gold.grade(id)).collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg = dcg(ideal.into_iter().take(k));
    if idcg == 0.0 {
        tracing::warn!("all relevance grades are zero; NDCG@{k} reported as 0");
        return Ok(0.0);
    }
    Ok(dcg(ranking.top(k).iter().map(|id| gold.grade(id))) / idcg)
}

/// Fraction of unordered agent pairs ordered the same way by both score maps.
/// A tie on either side counts as disagreement.
pub fn pairwise_accuracy(
    system: &BTreeMap<String, f64>,
    gold: &BTreeMap<String, f64>,
) -> Result<f64, MetricsError> {
    if !system.keys().eq(gold.keys()) {
        return Err(input("system and gold cover different agents"));
    }
    if system.len() < 2 {
        return Err(input("pairwise accuracy needs at least two agents"));
    }
    let s: Vec<f64> = system.values().copied().collect();
    let g: Vec<f64> = gold.values().copied().collect();
    let n = s.len();
    let mut concordant = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            if (s[i] - s[j]) * (g[i] - g[j]) > 0.0 {
                concordant += 1;
            }
        }
    }
    Ok(concordant as f64 / (n * (n - 1) / 2) as f64)
}

/// Pairwise accuracy over the top `k` agents of `ranking`.
pub fn pairwise_accuracy_at_k(
    ranking: &Ranking,
    gold: &GoldStandard,
    k: usize,
) -> Result<f64, MetricsError> {
    check_k(ranking, k)?;
    let top = ranking.top(k);
    let mut sys = BTreeMap::new();
    let mut ref_ = BTreeMap::new();
    for id in top {
        let g = gold
            .expert_means
            .get(id)
            .ok_or_else(|| input(format!("no expert score for {id}")))?;
        sys.insert(id.clone(), ranking.scores[id]);
        ref_.insert(id.clone(), *g);
    }
    if k < 2 {
        return Ok(0.0);
    }
    pairwise_accuracy(&sys, &ref_)
}

pub fn mae(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> Result<f64, MetricsError> {
    if !a.keys().eq(b.keys()) {
        return Err(input("score maps cover different agents"));
    }
    if a.is_empty() {
        return Err(input("MAE of an empty set"));
    }
    let total: f64 = a.values().zip(b.values()).map(|(x, y)| (x - y).abs()).sum();
    Ok(total / a.len() as f64)
}

/// Relative error reduction in percent.
pub fn improvement_pct(before: f64, after: f64) -> Result<f64, MetricsError> {
    if before.is_nan() || before <= 0.0 || !after.is_finite() {
        return Err(input(format!("improvement needs before > 0 (got {before})")));
    }
    Ok(100.0 * (before - after) / before)
}

/// Which score a ranking is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreSource {
    Profile,
    Behavior,
    /// Arithmetic mean of the profile and behavior scores.
    Avg,
}

impl ScoreSource {
    pub const ALL: [ScoreSource; 3] = [ScoreSource::Profile, ScoreSource::Behavior, ScoreSource::Avg];

    pub fn label(self) -> &'static str {
        match self {
            ScoreSource::Profile => "S_p",
            ScoreSource::Behavior => "S_b",
            ScoreSource::Avg => "Avg",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Initial,
    Propagated,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::Initial => "Init",
            Phase::Propagated => "Prop",
        }
    }
}

/// A metric cutoff: a fixed K or the size of the candidate set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KSpec {
    Fixed(usize),
    Named(KName),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KName {
    Candidates,
}

impl KSpec {
    pub const CANDIDATES: KSpec = KSpec::Named(KName::Candidates);

    pub fn label(self) -> String {
        match self {
            KSpec::Fixed(k) => format!("K={k}"),
            KSpec::Named(KName::Candidates) => "K=|C|".into(),
        }
    }

    /// Effective cutoff for `n` ranked agents; fixed values larger than `n` are clipped.
    pub fn resolve(self, n: usize) -> usize {
        match self {
            KSpec::Fixed(k) => k.min(n),
            KSpec::Named(KName::Candidates) => n,
        }
    }
}

pub fn default_ks() -> Vec<KSpec> {
    vec![KSpec::Fixed(5), KSpec::CANDIDATES]
}

/// Score maps by kind, for one phase.
pub type KindScores = BTreeMap<ScoreKind, BTreeMap<String, f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMetrics {
    pub k: String,
    pub effective_k: usize,
    pub precision: f64,
    pub ndcg: f64,
    pub pairwise_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub score: ScoreSource,
    pub phase: Phase,
    pub metrics: Vec<KMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaeRow {
    pub kind: ScoreKind,
    pub initial: f64,
    pub propagated: f64,
    pub improvement_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub agents: usize,
    pub relevant: usize,
    pub tie_break: String,
    pub relevance_threshold: f64,
    pub rows: Vec<MetricRow>,
    pub mae: Vec<MaeRow>,
}

fn restrict(scores: &BTreeMap<String, f64>, gold: &GoldStandard) -> Result<BTreeMap<String, f64>, MetricsError> {
    gold.expert_means
        .keys()
        .map(|id| {
            scores
                .get(id)
                .map(|v| (id.clone(), *v))
                .ok_or_else(|| input(format!("no automated score for annotated agent {id}")))
        })
        .collect()
}

fn source_scores(
    by_kind: &KindScores,
    source: ScoreSource,
    gold: &GoldStandard,
) -> Result<BTreeMap<String, f64>, MetricsError> {
    let get = |kind: ScoreKind| {
        by_kind
            .get(&kind)
            .ok_or_else(|| input(format!("missing {kind} scores")))
            .and_then(|m| restrict(m, gold))
    };
    match source {
        ScoreSource::Profile => get(ScoreKind::Profile),
        ScoreSource::Behavior => get(ScoreKind::Behavior),
        ScoreSource::Avg => {
            let p = get(ScoreKind::Profile)?;
            let b = get(ScoreKind::Behavior)?;
            Ok(p.iter().map(|(id, v)| (id.clone(), (v + b[id]) / 2.0)).collect())
        }
    }
}

/// Metrics for every score source and phase over the agents that carry
/// expert scores.
pub fn build_report(
    initial: &KindScores,
    propagated: &KindScores,
    gold: &GoldStandard,
    ks: &[KSpec],
    tie_break: TieBreak,
) -> Result<RankingReport, MetricsError> {
    if gold.expert_means.is_empty() {
        return Err(input("gold standard is empty"));
    }
    let n = gold.expert_means.len();
    let mut rows = Vec::new();
    for source in ScoreSource::ALL {
        for (phase, scores) in [(Phase::Initial, initial), (Phase::Propagated, propagated)] {
            let ranking = rank_agents(&source_scores(scores, source, gold)?, tie_break)?;
            let metrics = ks
                .iter()
                .map(|&spec| {
                    let k = spec.resolve(n);
                    Ok(KMetrics {
                        k: spec.label(),
                        effective_k: k,
                        precision: precision_at_k(&ranking, gold, k)?,
                        ndcg: ndcg_at_k(&ranking, gold, k)?,
                        pairwise_accuracy: pairwise_accuracy_at_k(&ranking, gold, k)?,
                    })
                })
                .collect::<Result<_, MetricsError>>()?;
            rows.push(MetricRow {
                score: source,
                phase,
                metrics,
            });
        }
    }
    let mae_rows = ScoreKind::ALL
        .iter()
        .map(|&kind| {
            let init = mae(&source_scores(initial, kind_source(kind), gold)?, &gold.expert_means)?;
            let prop = mae(&source_scores(propagated, kind_source(kind), gold)?, &gold.expert_means)?;
            Ok(MaeRow {
                kind,
                initial: init,
                propagated: prop,
                improvement_pct: improvement_pct(init, prop).ok(),
            })
        })
        .collect::<Result<_, MetricsError>>()?;
    Ok(RankingReport {
        agents: n,
        relevant: gold.relevant.len(),
        tie_break: tie_break.id().into(),
        relevance_threshold: gold.relevance_threshold,
        rows,
        mae: mae_rows,
    })
}

fn kind_source(kind: ScoreKind) -> ScoreSource {
    match kind {
        ScoreKind::Profile => ScoreSource::Profile,
        ScoreKind::Behavior => ScoreSource::Behavior,
    }
}

impl RankingReport {
    /// Aligned plain-text table: one row per score source and phase, three
    /// metric columns per cutoff, followed by the MAE comparison.
    pub fn render_table(&self) -> String {
        let ks: Vec<(String, usize)> = self
            .rows
            .first()
            .map(|r| r.metrics.iter().map(|m| (m.k.clone(), m.effective_k)).collect())
            .unwrap_or_default();
        const CELL: usize = 8;
        let group = 3 * CELL + 2;
        let mut out = String::new();
        let _ = write!(out, "{:<6} {:<6}", "Score", "Phase");
        for (label, eff) in &ks {
            let head = format!("{label} ({eff})");
            let _ = write!(out, " | {head:^group$}");
        }
        out.push('\n');
        let _ = write!(out, "{:<6} {:<6}", "", "");
        for _ in &ks {
            let _ = write!(out, " | {:>CELL$} {:>CELL$} {:>CELL$}", "Prec.", "NDCG", "PA");
        }
        out.push('\n');
        let width = out.lines().next().map_or(0, str::len);
        let rule = "-".repeat(width);
        out.push_str(&rule);
        out.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            let score = if i % 2 == 0 { row.score.label() } else { "" };
            let _ = write!(out, "{:<6} {:<6}", score, row.phase.label());
            for m in &row.metrics {
                let _ = write!(
                    out,
                    " | {:>CELL$.4} {:>CELL$.4} {:>CELL$.4}",
                    m.precision, m.ndcg, m.pairwise_accuracy
                );
            }
            out.push('\n');
            if i % 2 == 1 && i + 1 < self.rows.len() {
                out.push_str(&rule);
                out.push('\n');
            }
        }
        out.push_str(&rule);
        out.push('\n');
        let _ = writeln!(
            out,
            "agents: {}  relevant (expert mean >= {}): {}  tie-break: {}",
            self.agents, self.relevance_threshold, self.relevant, self.tie_break
        );
        out.push('\n');
        let _ = writeln!(out, "{:<10} {:>10} {:>10} {:>10}", "MAE", "Init", "Propagated", "Improv");
        for m in &self.mae {
            let improv = m
                .improvement_pct
                .map_or_else(|| "n/a".to_string(), |p| format!("{p:+.2}%"));
            let _ = writeln!(
                out,
                "{:<10} {:>10.4} {:>10.4} {:>10}",
                m.kind.as_str(),
                m.initial,
                m.propagated,
                improv
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn ranking(ids: &[&str]) -> Ranking {
        let n = ids.len();
        let scores = ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.to_string(), (n - i) as f64))
            .collect();
        rank_agents(&scores, TieBreak::ScoreDescIdAsc).unwrap()
    }

    fn gold(grades: &[(&str, u32)]) -> GoldStandard {
        GoldStandard::from_grades(grades.iter().map(|(k, g)| (k.to_string(), *g)).collect())
    }

    #[test]
    fn tie_break_is_score_then_id() {
        let r = rank_agents(&map(&[("b", 5.0), ("a", 5.0), ("c", 9.0)]), TieBreak::ScoreDescIdAsc).unwrap();
        assert_eq!(r.order(), ["c", "a", "b"]);
        assert!(rank_agents(&map(&[("a", f64::NAN)]), TieBreak::default()).is_err());
    }

    #[test]
    fn precision_examples() {
        let r = ranking(&["a", "b", "c", "d", "e"]);
        let all = gold(&[("a", 1), ("b", 1), ("c", 1)]);
        assert_eq!(precision_at_k(&r, &all, 3).unwrap(), 1.0);
        let one = gold(&[("c", 2)]);
        assert_eq!(precision_at_k(&r, &one, 5).unwrap(), 0.2);
        assert_eq!(precision_at_k(&r, &gold(&[]), 5).unwrap(), 0.0);
        assert!(precision_at_k(&r, &one, 0).is_err());
        assert!(precision_at_k(&r, &one, 6).is_err());
    }

    #[test]
    fn ndcg_examples() {
        let g = gold(&[("a", 3), ("b", 2)]);
        assert!((ndcg_at_k(&ranking(&["a", "b"]), &g, 2).unwrap() - 1.0).abs() < 1e-12);
        let v = ndcg_at_k(&ranking(&["b", "a"]), &g, 2).unwrap();
        assert!((v - 0.83399).abs() < 1e-5, "{v}");
        assert_eq!(ndcg_at_k(&ranking(&["a", "b"]), &g, 1).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(&ranking(&["x", "y"]), &gold(&[]), 2).unwrap(), 0.0);
    }

    #[test]
    fn pairwise_examples() {
        let a = map(&[("a", 1.0), ("b", 2.0), ("c", 3.0)]);
        assert_eq!(pairwise_accuracy(&a, &a).unwrap(), 1.0);
        let rev = map(&[("a", 3.0), ("b", 2.0), ("c", 1.0)]);
        assert_eq!(pairwise_accuracy(&a, &rev).unwrap(), 0.0);
        let sys = map(&[("a", 3.0), ("b", 1.0), ("c", 2.0)]);
        let gld = map(&[("a", 3.0), ("b", 2.0), ("c", 1.0)]);
        assert!((pairwise_accuracy(&sys, &gld).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        let tied = map(&[("a", 1.0), ("b", 1.0), ("c", 1.0)]);
        assert_eq!(pairwise_accuracy(&tied, &a).unwrap(), 0.0);
        assert!(pairwise_accuracy(&a, &map(&[("a", 1.0)])).is_err());
    }

    #[test]
    fn mae_and_improvement() {
        let a = map(&[("x", 1.0), ("y", 2.0)]);
        assert_eq!(mae(&a, &a).unwrap(), 0.0);
        assert_eq!(mae(&a, &map(&[("x", 2.0), ("y", 4.0)])).unwrap(), 1.5);
        let shifted = map(&[("x", 1.6988), ("y", 2.6988)]);
        assert!((mae(&a, &shifted).unwrap() - 0.6988).abs() < 1e-12);
        // 100 * 0.3082 / 1.007 and 100 * 0.8489 / 1.6942
        assert!((improvement_pct(1.007, 0.6988).unwrap() - 30.6058).abs() < 1e-4);
        assert!((improvement_pct(1.6942, 0.8453).unwrap() - 50.1063).abs() < 1e-4);
        assert_eq!(improvement_pct(2.0, 2.0).unwrap(), 0.0);
        assert!(improvement_pct(0.0, 1.0).is_err());
    }

    #[test]
    fn grades_from_means() {
        let g = GoldStandard::from_means(
            map(&[("a", 8.7), ("b", 3.0), ("c", 6.5)]),
            DEFAULT_RELEVANCE_THRESHOLD,
            &GradeScheme::default(),
        )
        .unwrap();
        assert_eq!(g.grade("a"), 4);
        assert_eq!(g.grade("b"), 0);
        assert_eq!(g.grade("c"), 2);
        assert_eq!(g.relevant.iter().collect::<Vec<_>>(), ["a"]);
        assert!(GoldStandard::from_means(map(&[]), 8.0, &GradeScheme { cutpoints: vec![3.0, 2.0] }).is_err());
    }

    #[test]
    fn k_spec_serde() {
        let ks: Vec<KSpec> = serde_json::from_str(r#"[5, "candidates"]"#).unwrap();
        assert_eq!(ks, default_ks());
        assert_eq!(KSpec::Fixed(5).resolve(3), 3);
    }

    #[test]
    fn report_layout() {
        let ids = ["a", "b", "c", "d", "e", "f"];
        let mk = |f: &dyn Fn(usize) -> f64| -> BTreeMap<String, f64> {
            ids.iter().enumerate().map(|(i, id)| (id.to_string(), f(i))).collect()
        };
        let mut init = KindScores::new();
        init.insert(ScoreKind::Profile, mk(&|i| 9.0 - i as f64 * 0.1));
        init.insert(ScoreKind::Behavior, mk(&|i| 8.0 + i as f64 * 0.1));
        let mut prop = KindScores::new();
        prop.insert(ScoreKind::Profile, mk(&|i| 8.5 - i as f64 * 0.2));
        prop.insert(ScoreKind::Behavior, mk(&|i| 8.5 - i as f64 * 0.3));
        let gold = GoldStandard::from_means(mk(&|i| 9.0 - i as f64), 8.0, &GradeScheme::default()).unwrap();
        let rep = build_report(&init, &prop, &gold, &default_ks(), TieBreak::default()).unwrap();
        assert_eq!(rep.rows.len(), 6);
        let prop_p = &rep.rows[1].metrics[1];
        assert_eq!(prop_p.pairwise_accuracy, 1.0);
        assert!((prop_p.ndcg - 1.0).abs() < 1e-12);
        let table = rep.render_table();
        assert!(table.contains("K=5 (5)") && table.contains("K=|C| (6)"));
        for label in ["S_p", "S_b", "Avg", "Init", "Prop", "Prec.", "NDCG", "PA"] {
            assert!(table.contains(label), "{label} missing");
        }
        let json = serde_json::to_string(&rep).unwrap();
        assert_eq!(serde_json::from_str::<RankingReport>(&json).unwrap(), rep);
    }
}
