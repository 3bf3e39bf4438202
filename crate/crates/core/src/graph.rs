//! Student similarity graph and score propagation.
//!
//! Nodes are profiles, edges join pairs whose unit embeddings have cosine
//! similarity at or above a threshold, and every node carries a self-loop so
//! that degrees are always at least one. Scores are smoothed over the graph
//! with
//!
//! ```text
//! S(k+1) = alpha * A_norm * S(k) + (1 - alpha) * S(0),   A_norm = D^-1/2 A D^-1/2
//! ```
//!
//! [`propagate`] runs the iteration; [`fixed_point`] solves the limit
//! `(I - alpha * A_norm) S* = (1 - alpha) S(0)` directly and is kept as an
//! independent check on the iterative route.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::scoring::ScoreKind;

/// Unit-norm tolerance for embeddings fed to [`build_graph`].
pub const UNIT_NORM_TOL: f64 = 1e-9;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GraphError {
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("invalid input: {0}")]
    Input(String),
}

/// Scale `u` to unit Euclidean norm.
pub fn normalize_embedding(u: &[f64]) -> Result<Vec<f64>, GraphError> {
    if u.iter().any(|x| !x.is_finite()) {
        return Err(GraphError::Input("embedding has non-finite entries".into()));
    }
    let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(GraphError::Degenerate("zero-norm embedding".into()));
    }
    Ok(u.iter().map(|x| x / norm).collect())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Threshold graph over unit embeddings. Adjacency is stored as sorted
/// neighbour lists; every list contains its own node (the self-loop).
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGraph {
    node_ids: Vec<String>,
    embeddings: Vec<Vec<f64>>,
    threshold: f64,
    neighbors: Vec<Vec<usize>>,
}

/// Build the graph: `A_ij = 1` iff `e_i . e_j >= threshold` for `i != j`, and `A_ii = 1`.
pub fn build_graph(
    node_ids: Vec<String>,
    embeddings: Vec<Vec<f64>>,
    threshold: f64,
) -> Result<SimilarityGraph, GraphError> {
    if node_ids.len() != embeddings.len() {
        return Err(GraphError::Input(format!(
            "{} ids but {} embeddings",
            node_ids.len(),
            embeddings.len()
        )));
    }
    if !(-1.0..=1.0).contains(&threshold) {
        return Err(GraphError::Input(format!(
            "threshold {threshold} outside [-1, 1]"
        )));
    }
    if let Some(first) = embeddings.first() {
        let dim = first.len();
        for (i, e) in embeddings.iter().enumerate() {
            if e.len() != dim {
                return Err(GraphError::Input(format!(
                    "embedding {i} has dimension {}, expected {dim}",
                    e.len()
                )));
            }
            let norm = dot(e, e).sqrt();
            if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(GraphError::Input(format!(
                    "embedding {i} is not unit-norm (|e| = {norm})"
                )));
            }
        }
    }

    let n = embeddings.len();
    let mut neighbors: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    for i in 0..n {
        for j in (i + 1)..n {
            if dot(&embeddings[i], &embeddings[j]) >= threshold {
                neighbors[i].push(j);
                neighbors[j].push(i);
            }
        }
    }
    for list in &mut neighbors {
        list.sort_unstable();
    }
    Ok(SimilarityGraph {
        node_ids,
        embeddings,
        threshold,
        neighbors,
    })
}

impl SimilarityGraph {
    /// Graph from an explicit undirected edge list; self-loops are added.
    pub fn from_edges(node_ids: Vec<String>, edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        let n = node_ids.len();
        let mut neighbors: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(GraphError::Input(format!("edge ({a}, {b}) out of range")));
            }
            if a != b {
                neighbors[a].push(b);
                neighbors[b].push(a);
            }
        }
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }
        Ok(SimilarityGraph {
            node_ids,
            embeddings: Vec::new(),
            threshold: f64::NAN,
            neighbors,
        })
    }

    pub fn len(&self) -> usize {
        self.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_ids.is_empty()
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn embeddings(&self) -> &[Vec<f64>] {
        &self.embeddings
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Neighbours of `i`, including `i` itself.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search(&j).is_ok()
    }

    /// `d_i = sum_j A_ij`, self-loop included.
    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.neighbors.iter().map(Vec::len).collect()
    }

    /// Number of undirected edges between distinct nodes.
    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(|l| l.len() - 1).sum::<usize>() / 2
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
    }

    pub fn similarity(&self, i: usize, j: usize) -> Option<f64> {
        if self.embeddings.is_empty() {
            None
        } else {
            Some(dot(&self.embeddings[i], &self.embeddings[j]))
        }
    }

    pub fn adjacency_dense(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut a = DMatrix::zeros(n, n);
        for (i, l) in self.neighbors.iter().enumerate() {
            for &j in l {
                a[(i, j)] = 1.0;
            }
        }
        a
    }

    pub fn summary(&self) -> GraphSummary {
        let n = self.len();
        let edges = self.edge_count();
        let possible = n * n.saturating_sub(1) / 2;
        let mut histogram = BTreeMap::new();
        for d in self.degrees() {
            // Off-diagonal degree, i.e. the number of similar peers.
            *histogram.entry(d - 1).or_insert(0usize) += 1;
        }
        GraphSummary {
            nodes: n,
            edges,
            threshold: self.threshold,
            edge_density: if possible == 0 {
                0.0
            } else {
                edges as f64 / possible as f64
            },
            isolated_nodes: histogram.get(&0).copied().unwrap_or(0),
            degree_histogram: histogram,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSummary {
    pub nodes: usize,
    pub edges: usize,
    pub threshold: f64,
    pub edge_density: f64,
    pub isolated_nodes: usize,
    /// Number of peers (self-loop excluded) -> node count.
    pub degree_histogram: BTreeMap<usize, usize>,
}

/// `D^-1/2 A D^-1/2` in compressed sparse row form; same sparsity as `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    values: Vec<f64>,
}

pub fn normalize_adjacency(graph: &SimilarityGraph) -> NormalizedAdjacency {
    let deg: Vec<f64> = graph.degrees().iter().map(|&d| d as f64).collect();
    let mut row_ptr = Vec::with_capacity(graph.len() + 1);
    let mut cols = Vec::new();
    let mut values = Vec::new();
    row_ptr.push(0);
    for i in 0..graph.len() {
        for &j in graph.neighbors(i) {
            cols.push(j);
            values.push(1.0 / (deg[i] * deg[j]).sqrt());
        }
        row_ptr.push(cols.len());
    }
    NormalizedAdjacency {
        row_ptr,
        cols,
        values,
    }
}

impl NormalizedAdjacency {
    pub fn len(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let row = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[row.clone()].binary_search(&j) {
            Ok(k) => self.values[row.start + k],
            Err(_) => 0.0,
        }
    }

    /// `out = A_norm * x`.
    pub fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let row = self.row_ptr[i]..self.row_ptr[i + 1];
            *o = self.cols[row.clone()]
                .iter()
                .zip(&self.values[row])
                .map(|(&j, &v)| v * x[j])
                .sum();
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                m[(i, self.cols[k])] = self.values[k];
            }
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VectorPhase {
    Initial,
    Iterate,
    FixedPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub kind: ScoreKind,
    pub phase: VectorPhase,
    pub values: Vec<f64>,
}

impl ScoreVector {
    pub fn initial(kind: ScoreKind, values: Vec<f64>) -> Self {
        ScoreVector {
            kind,
            phase: VectorPhase::Initial,
            values,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropagationParams {
    pub alpha: f64,
    pub max_iterations: usize,
    pub tol: f64,
}

impl Default for PropagationParams {
    fn default() -> Self {
        PropagationParams {
            alpha: 0.5,
            max_iterations: 50,
            tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Propagation {
    pub scores: ScoreVector,
    /// Iterations actually run (`k*`).
    pub iterations: usize,
    /// `|S(k*) - S(k*-1)|_inf`, or 0 when no iteration ran.
    pub residual: f64,
    pub converged: bool,
    /// Per-step sup-norm differences.
    pub residuals_inf: Vec<f64>,
    /// Per-step Euclidean differences.
    pub residuals_l2: Vec<f64>,
}

fn check_alpha(alpha: f64) -> Result<(), GraphError> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(GraphError::Input(format!("alpha {alpha} outside [0, 1)")));
    }
    Ok(())
}

fn check_scores(s0: &ScoreVector, adj: &NormalizedAdjacency) -> Result<(), GraphError> {
    if s0.len() != adj.len() {
        return Err(GraphError::Input(format!(
            "{} scores for {} nodes",
            s0.len(),
            adj.len()
        )));
    }
    if s0.values.iter().any(|x| !x.is_finite()) {
        return Err(GraphError::Input("non-finite initial score".into()));
    }
    Ok(())
}

/// Iterate until the sup-norm step falls below `tol` or `max_iterations` is hit.
pub fn propagate(
    s0: &ScoreVector,
    adj: &NormalizedAdjacency,
    params: PropagationParams,
) -> Result<Propagation, GraphError> {
    check_alpha(params.alpha)?;
    check_scores(s0, adj)?;
    let alpha = params.alpha;
    let n = s0.len();
    let base: Vec<f64> = s0.values.iter().map(|x| (1.0 - alpha) * x).collect();
    let mut current = s0.values.clone();
    let mut next = vec![0.0; n];
    let mut residuals_inf = Vec::new();
    let mut residuals_l2 = Vec::new();
    let mut converged = false;

    for _ in 0..params.max_iterations {
        adj.mul_vec(&current, &mut next);
        for (x, b) in next.iter_mut().zip(&base) {
            *x = alpha * *x + b;
        }
        let (mut inf, mut sq) = (0.0f64, 0.0f64);
        for (a, b) in next.iter().zip(&current) {
            let d = (a - b).abs();
            inf = inf.max(d);
            sq += d * d;
        }
        residuals_inf.push(inf);
        residuals_l2.push(sq.sqrt());
        std::mem::swap(&mut current, &mut next);
        if inf < params.tol {
            converged = true;
            break;
        }
    }

    Ok(Propagation {
        scores: ScoreVector {
            kind: s0.kind,
            phase: VectorPhase::Iterate,
            values: current,
        },
        iterations: residuals_inf.len(),
        residual: residuals_inf.last().copied().unwrap_or(0.0),
        converged,
        residuals_inf,
        residuals_l2,
    })
}

/// Closed-form limit of [`propagate`]: solves `(I - alpha A_norm) S* = (1 - alpha) S0`.
pub fn fixed_point(
    s0: &ScoreVector,
    adj: &NormalizedAdjacency,
    alpha: f64,
) -> Result<ScoreVector, GraphError> {
    check_alpha(alpha)?;
    check_scores(s0, adj)?;
    let n = s0.len();
    let system = DMatrix::identity(n, n) - adj.to_dense() * alpha;
    let rhs = DVector::from_iterator(n, s0.values.iter().map(|x| (1.0 - alpha) * x));
    // I - alpha*A_norm is symmetric with eigenvalues >= 1 - alpha > 0.
    let solution = match system.clone().cholesky() {
        Some(chol) => chol.solve(&rhs),
        None => system
            .lu()
            .solve(&rhs)
            .ok_or_else(|| GraphError::Degenerate("singular propagation system".into()))?,
    };
    Ok(ScoreVector {
        kind: s0.kind,
        phase: VectorPhase::FixedPoint,
        values: solution.iter().copied().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("n{i}")).collect()
    }

    fn sv(values: Vec<f64>) -> ScoreVector {
        ScoreVector::initial(ScoreKind::Profile, values)
    }

    #[test]
    fn normalize_examples() {
        let e = normalize_embedding(&[3.0, 4.0]).unwrap();
        assert!((e[0] - 0.6).abs() < 1e-15 && (e[1] - 0.8).abs() < 1e-15);
        let u = vec![0.0, 1.0, 0.0];
        assert_eq!(normalize_embedding(&u).unwrap(), u);
        assert!(matches!(
            normalize_embedding(&[0.0, 0.0]),
            Err(GraphError::Degenerate(_))
        ));
    }

    #[test]
    fn build_examples() {
        let g = build_graph(ids(2), vec![vec![1.0, 0.0], vec![1.0, 0.0]], 0.9).unwrap();
        assert!(g.has_edge(0, 1));

        let g = build_graph(ids(2), vec![vec![1.0, 0.0], vec![0.0, 1.0]], 0.5).unwrap();
        assert!(!g.has_edge(0, 1));
        assert!(g.has_edge(0, 0) && g.has_edge(1, 1));

        let n = 6;
        let emb: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let t = i as f64;
                normalize_embedding(&[t.cos(), t.sin(), 0.3]).unwrap()
            })
            .collect();
        let g = build_graph(ids(n), emb, -1.0).unwrap();
        assert_eq!(g.edge_count(), n * (n - 1) / 2);
    }

    #[test]
    fn build_rejects_bad_input() {
        let err = build_graph(ids(2), vec![vec![1.0, 0.0], vec![1.0]], 0.5).unwrap_err();
        assert!(matches!(err, GraphError::Input(_)));
        let err = build_graph(ids(1), vec![vec![2.0, 0.0]], 0.5).unwrap_err();
        assert!(matches!(err, GraphError::Input(_)));
    }

    #[test]
    fn normalized_adjacency_examples() {
        let g = SimilarityGraph::from_edges(ids(1), &[]).unwrap();
        assert_eq!(normalize_adjacency(&g).get(0, 0), 1.0);

        let g = SimilarityGraph::from_edges(ids(2), &[(0, 1)]).unwrap();
        let a = normalize_adjacency(&g);
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(a.get(i, j), 0.5);
            }
        }

        // path i - j - k: degrees [2, 3, 2]
        let g = SimilarityGraph::from_edges(ids(3), &[(0, 1), (1, 2)]).unwrap();
        assert_eq!(g.degrees(), vec![2, 3, 2]);
        let a = normalize_adjacency(&g);
        assert!((a.get(0, 1) - 1.0 / 6f64.sqrt()).abs() < 1e-15);
        assert!((a.get(0, 1) - 0.4082).abs() < 1e-4);
        assert_eq!(a.get(0, 2), 0.0);
    }

    #[test]
    fn two_node_propagation() {
        let g = SimilarityGraph::from_edges(ids(2), &[(0, 1)]).unwrap();
        let a = normalize_adjacency(&g);
        let p = propagate(&sv(vec![10.0, 0.0]), &a, PropagationParams::default()).unwrap();
        assert!((p.scores.values[0] - 7.5).abs() < 1e-12);
        assert!((p.scores.values[1] - 2.5).abs() < 1e-12);
        // k = 1 reaches the fixed point; k = 2 confirms it.
        assert_eq!(p.iterations, 2);
        assert!(p.converged);

        let one = propagate(
            &sv(vec![10.0, 0.0]),
            &a,
            PropagationParams {
                max_iterations: 1,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(one.scores.values, vec![7.5, 2.5]);

        let fp = fixed_point(&sv(vec![10.0, 0.0]), &a, 0.5).unwrap();
        assert!((fp.values[0] - 7.5).abs() < 1e-12 && (fp.values[1] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn isolated_node_is_fixed() {
        let g = SimilarityGraph::from_edges(ids(1), &[]).unwrap();
        let a = normalize_adjacency(&g);
        for k in [0, 1, 7, 100] {
            let p = propagate(
                &sv(vec![6.25]),
                &a,
                PropagationParams {
                    alpha: 0.5,
                    max_iterations: k,
                    tol: 0.0,
                },
            )
            .unwrap();
            assert_eq!(p.scores.values, vec![6.25]);
        }
    }

    #[test]
    fn alpha_zero_returns_s0() {
        let g = SimilarityGraph::from_edges(ids(3), &[(0, 1), (1, 2), (0, 2)]).unwrap();
        let a = normalize_adjacency(&g);
        let s0 = sv(vec![1.0, 5.0, 9.0]);
        let params = PropagationParams {
            alpha: 0.0,
            ..Default::default()
        };
        assert_eq!(propagate(&s0, &a, params).unwrap().scores.values, s0.values);
        assert_eq!(fixed_point(&s0, &a, 0.0).unwrap().values, s0.values);
    }

    #[test]
    fn rejects_bad_parameters() {
        let g = SimilarityGraph::from_edges(ids(2), &[(0, 1)]).unwrap();
        let a = normalize_adjacency(&g);
        let bad_alpha = PropagationParams {
            alpha: 1.0,
            ..Default::default()
        };
        assert!(propagate(&sv(vec![1.0, 2.0]), &a, bad_alpha).is_err());
        assert!(propagate(&sv(vec![1.0]), &a, Default::default()).is_err());
        assert!(propagate(&sv(vec![1.0, f64::NAN]), &a, Default::default()).is_err());
    }

    #[test]
    fn summary_counts() {
        let g = SimilarityGraph::from_edges(ids(4), &[(0, 1), (1, 2)]).unwrap();
        let s = g.summary();
        assert_eq!(s.edges, 2);
        assert_eq!(s.isolated_nodes, 1);
        assert_eq!(s.degree_histogram.get(&1), Some(&2));
        assert_eq!(s.degree_histogram.get(&2), Some(&1));
        assert!((s.edge_density - 2.0 / 6.0).abs() < 1e-12);
    }

    fn random_graph() -> impl Strategy<Value = (usize, Vec<(usize, usize)>, Vec<f64>)> {
        (2usize..12).prop_flat_map(|n| {
            (
                Just(n),
                proptest::collection::vec((0..n, 0..n), 0..(n * 2)),
                proptest::collection::vec(1.0f64..10.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn normalized_adjacency_is_symmetric((n, edges, _) in random_graph()) {
            let g = SimilarityGraph::from_edges(ids(n), &edges).unwrap();
            let a = normalize_adjacency(&g);
            for i in 0..n {
                for j in 0..n {
                    prop_assert_eq!(a.get(i, j), a.get(j, i));
                    prop_assert_eq!(g.has_edge(i, j), g.has_edge(j, i));
                }
            }
        }

        #[test]
        fn permutation_equivariance((n, edges, s) in random_graph(), rot in 0usize..12) {
            let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
            let g = SimilarityGraph::from_edges(ids(n), &edges).unwrap();
            let pe: Vec<_> = edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect();
            let gp = SimilarityGraph::from_edges(ids(n), &pe).unwrap();
            let mut sp = vec![0.0; n];
            for i in 0..n {
                sp[perm[i]] = s[i];
            }
            let params = PropagationParams { alpha: 0.5, max_iterations: 200, tol: 1e-13 };
            let r = propagate(&sv(s), &normalize_adjacency(&g), params).unwrap();
            let rp = propagate(&sv(sp), &normalize_adjacency(&gp), params).unwrap();
            for (i, &pi) in perm.iter().enumerate() {
                prop_assert!((r.scores.values[i] - rp.scores.values[pi]).abs() < 1e-9);
            }
        }

        #[test]
        fn l2_steps_contract_by_alpha((n, edges, s) in random_graph(), alpha in 0.0f64..0.95) {
            let g = SimilarityGraph::from_edges(ids(n), &edges).unwrap();
            let params = PropagationParams { alpha, max_iterations: 60, tol: 0.0 };
            let r = propagate(&sv(s), &normalize_adjacency(&g), params).unwrap();
            for w in r.residuals_l2.windows(2) {
                if w[0] > 1e-10 {
                    prop_assert!(w[1] <= alpha * w[0] * (1.0 + 1e-9) + 1e-12);
                }
            }
        }
    }
}
