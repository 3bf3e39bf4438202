//! Regression random forest with variance-reduction splits and impurity
//! importance.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::encode::{FeatureCategory, FeatureMatrix};
use super::AnalysisError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    pub test_frac: f64,
    /// Features tried per split; `None` means max(1, p / 3).
    pub mtry: Option<usize>,
    pub min_leaf: usize,
    pub max_depth: Option<usize>,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 100,
            test_frac: 0.2,
            mtry: None,
            min_leaf: 2,
            max_depth: None,
            bootstrap: true,
            seed: 0,
        }
    }
}

pub const MIN_ROWS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "lowercase")]
pub enum Node {
    Leaf {
        value: f64,
        samples: usize,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        /// Decrease in summed squared error achieved by this split.
        gain: f64,
    },
}

/// Nodes stored flat; index 0 is the root. Rows with `x[feature] <= threshold` go left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value, .. } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => i = if row[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match &t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, *left).max(go(t, *right)),
            }
        }
        go(self, 0)
    }

    pub fn root_feature(&self) -> Option<usize> {
        match self.nodes.first()? {
            Node::Split { feature, .. } => Some(*feature),
            Node::Leaf { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub params: ForestParams,
    pub feature_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_categories: Option<Vec<FeatureCategory>>,
    pub trees: Vec<Tree>,
    pub split: DataSplit,
    pub train_mse: f64,
    pub test_mse: Option<f64>,
    /// Mean over trees of each feature's squared-error decrease per training row.
    pub importance: Vec<f64>,
    /// False when the target had no variance, so every importance is zero.
    pub importance_defined: bool,
}

impl ForestModel {
    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(row)).sum::<f64>() / self.trees.len() as f64
    }

    pub fn total_importance(&self) -> f64 {
        self.importance.iter().sum()
    }
}

struct Data<'a> {
    columns: &'a [Vec<f64>],
    binary: Vec<bool>,
    y: &'a [f64],
}

impl Data<'_> {
    fn row(&self, r: usize) -> Vec<f64> {
        self.columns.iter().map(|c| c[r]).collect()
    }
}

struct Candidate {
    feature: usize,
    threshold: f64,
    gain: f64,
}

fn best_split_for(data: &Data<'_>, rows: &[usize], feature: usize, min_leaf: usize) -> Option<Candidate> {
    let col = &data.columns[feature];
    let n = rows.len();
    let total: f64 = rows.iter().map(|&r| data.y[r]).sum();
    let base = total * total / n as f64;
    if data.binary[feature] {
        let (mut n1, mut s1) = (0usize, 0.0);
        for &r in rows {
            if col[r] > 0.5 {
                n1 += 1;
                s1 += data.y[r];
            }
        }
        let n0 = n - n1;
        if n0 < min_leaf || n1 < min_leaf {
            return None;
        }
        let s0 = total - s1;
        let gain = s0 * s0 / n0 as f64 + s1 * s1 / n1 as f64 - base;
        return Some(Candidate {
            feature,
            threshold: 0.5,
            gain,
        });
    }
    let mut pairs: Vec<(f64, f64)> = rows.iter().map(|&r| (col[r], data.y[r])).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best: Option<Candidate> = None;
    let mut left_sum = 0.0;
    for i in 0..n - 1 {
        left_sum += pairs[i].1;
        let nl = i + 1;
        if pairs[i].0 == pairs[i + 1].0 || nl < min_leaf || n - nl < min_leaf {
            continue;
        }
        let right_sum = total - left_sum;
        let gain = left_sum * left_sum / nl as f64 + right_sum * right_sum / (n - nl) as f64 - base;
        if best.as_ref().is_none_or(|b| gain > b.gain) {
            best = Some(Candidate {
                feature,
                threshold: 0.5 * (pairs[i].0 + pairs[i + 1].0),
                gain,
            });
        }
    }
    best
}

struct Builder<'a, 'd> {
    data: &'a Data<'d>,
    params: &'a ForestParams,
    mtry: usize,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
    importance: Vec<f64>,
}

impl Builder<'_, '_> {
    fn leaf(&mut self, rows: &[usize]) -> usize {
        let value = rows.iter().map(|&r| self.data.y[r]).sum::<f64>() / rows.len() as f64;
        self.nodes.push(Node::Leaf {
            value,
            samples: rows.len(),
        });
        self.nodes.len() - 1
    }

    fn build(&mut self, rows: Vec<usize>, depth: usize) -> usize {
        let n = rows.len();
        let mean = rows.iter().map(|&r| self.data.y[r]).sum::<f64>() / n as f64;
        let sse: f64 = rows.iter().map(|&r| (self.data.y[r] - mean).powi(2)).sum();
        let depth_capped = self.params.max_depth.is_some_and(|d| depth >= d);
        if n < 2 * self.params.min_leaf || depth_capped || sse <= 1e-12 {
            return self.leaf(&rows);
        }

        let mut order: Vec<usize> = (0..self.data.columns.len()).collect();
        order.shuffle(&mut self.rng);
        // Gains below this are rounding noise in the sum-of-squares identity.
        let eps = 1e-12 * sse.max(1.0);
        let mut best: Option<Candidate> = None;
        for (tried, &f) in order.iter().enumerate() {
            if tried >= self.mtry && best.is_some() {
                break;
            }
            if let Some(c) = best_split_for(self.data, &rows, f, self.params.min_leaf) {
                if c.gain > eps && best.as_ref().is_none_or(|b| c.gain > b.gain) {
                    best = Some(c);
                }
            }
        }
        let Some(best) = best else {
            return self.leaf(&rows);
        };

        self.importance[best.feature] += best.gain;
        let col = &self.data.columns[best.feature];
        let (left, right): (Vec<usize>, Vec<usize>) = rows.into_iter().partition(|&r| col[r] <= best.threshold);
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf {
            value: mean,
            samples: n,
        });
        let l = self.build(left, depth + 1);
        let r = self.build(right, depth + 1);
        self.nodes[id] = Node::Split {
            feature: best.feature,
            threshold: best.threshold,
            left: l,
            right: r,
            gain: best.gain,
        };
        id
    }
}

fn split_rows(n: usize, test_frac: f64, seed: u64) -> DataSplit {
    let mut idx: Vec<usize> = (0..n).collect();
    let n_test = if test_frac > 0.0 {
        ((n as f64 * test_frac).round() as usize).clamp(1, n - 2)
    } else {
        0
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let mut test = idx.split_off(n - n_test);
    idx.sort_unstable();
    test.sort_unstable();
    DataSplit { train: idx, test }
}

fn mse(trees: &[Tree], data: &Data<'_>, rows: &[usize]) -> f64 {
    rows.iter()
        .map(|&r| {
            let x = data.row(r);
            let pred = trees.iter().map(|t| t.predict(&x)).sum::<f64>() / trees.len() as f64;
            (pred - data.y[r]).powi(2)
        })
        .sum::<f64>()
        / rows.len() as f64
}

/// Fit on column-major data. `columns[j][i]` is feature j of row i.
pub fn fit_forest_columns(
    columns: &[Vec<f64>],
    feature_names: Vec<String>,
    y: &[f64],
    params: &ForestParams,
) -> Result<ForestModel, AnalysisError> {
    let n = y.len();
    if n < MIN_ROWS {
        return Err(AnalysisError::Input(format!("need at least {MIN_ROWS} rows, got {n}")));
    }
    if columns.is_empty() || columns.iter().any(|c| c.len() != n) {
        return Err(AnalysisError::Input("feature columns do not match target length".into()));
    }
    if feature_names.len() != columns.len() {
        return Err(AnalysisError::Input("one name per feature column required".into()));
    }
    if columns.iter().flatten().chain(y).any(|v| !v.is_finite()) {
        return Err(AnalysisError::Input("non-finite value in forest input".into()));
    }
    if params.n_trees == 0 || params.min_leaf == 0 || !(0.0..1.0).contains(&params.test_frac) {
        return Err(AnalysisError::Input(
            "n_trees and min_leaf must be positive and test_frac in [0, 1)".into(),
        ));
    }
    let p = columns.len();
    let data = Data {
        columns,
        binary: columns
            .iter()
            .map(|c| c.iter().all(|&v| v == 0.0 || v == 1.0))
            .collect(),
        y,
    };
    let mtry = params.mtry.unwrap_or(p / 3).clamp(1, p);
    let split = split_rows(n, params.test_frac, params.seed);
    let n_train = split.train.len();

    let fitted: Vec<(Tree, Vec<f64>)> = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            rng.set_stream(t as u64 + 1);
            let rows: Vec<usize> = if params.bootstrap {
                (0..n_train)
                    .map(|_| split.train[rng.random_range(0..n_train)])
                    .collect()
            } else {
                split.train.clone()
            };
            let mut b = Builder {
                data: &data,
                params,
                mtry,
                rng,
                nodes: Vec::new(),
                importance: vec![0.0; p],
            };
            b.build(rows, 0);
            let scale = n_train as f64;
            let importance = b.importance.into_iter().map(|g| g / scale).collect();
            (Tree { nodes: b.nodes }, importance)
        })
        .collect();

    let mut importance = vec![0.0; p];
    for (_, imp) in &fitted {
        for (acc, v) in importance.iter_mut().zip(imp) {
            *acc += v / params.n_trees as f64;
        }
    }
    let trees: Vec<Tree> = fitted.into_iter().map(|(t, _)| t).collect();
    let importance_defined = importance.iter().any(|&v| v > 0.0);
    if !importance_defined {
        tracing::warn!("forest target has no usable variance; feature importance is undefined");
    }
    let train_mse = mse(&trees, &data, &split.train);
    let test_mse = (!split.test.is_empty()).then(|| mse(&trees, &data, &split.test));
    Ok(ForestModel {
        params: params.clone(),
        feature_names,
        feature_categories: None,
        trees,
        split,
        train_mse,
        test_mse,
        importance,
        importance_defined,
    })
}

pub fn fit_forest(x: &FeatureMatrix, y: &[f64], params: &ForestParams) -> Result<ForestModel, AnalysisError> {
    if x.n_rows() != y.len() {
        return Err(AnalysisError::Input(format!(
            "{} rows but {} targets",
            x.n_rows(),
            y.len()
        )));
    }
    let mut model = fit_forest_columns(&x.columns_f64(), x.dictionary.column_names(), y, params)?;
    model.feature_categories = Some(
        x.dictionary
            .groups
            .iter()
            .flat_map(|g| std::iter::repeat_n(g.category, g.levels.len()))
            .collect(),
    );
    Ok(model)
}

/// Increase in held-out MSE when each feature is shuffled across the given rows.
pub fn permutation_importance(
    model: &ForestModel,
    columns: &[Vec<f64>],
    y: &[f64],
    rows: &[usize],
    seed: u64,
) -> Result<Vec<f64>, AnalysisError> {
    if rows.is_empty() {
        return Err(AnalysisError::Input("no rows for permutation importance".into()));
    }
    let matrix: Vec<Vec<f64>> = rows.iter().map(|&r| columns.iter().map(|c| c[r]).collect()).collect();
    let score = |m: &[Vec<f64>]| {
        m.iter()
            .zip(rows)
            .map(|(x, &r)| (model.predict(x) - y[r]).powi(2))
            .sum::<f64>()
            / rows.len() as f64
    };
    let base = score(&matrix);
    Ok((0..columns.len())
        .into_par_iter()
        .map(|j| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(j as u64);
            let mut perm: Vec<f64> = matrix.iter().map(|x| x[j]).collect();
            perm.shuffle(&mut rng);
            let shuffled: Vec<Vec<f64>> = matrix
                .iter()
                .zip(&perm)
                .map(|(x, &v)| {
                    let mut x = x.clone();
                    x[j] = v;
                    x
                })
                .collect();
            score(&shuffled) - base
        })
        .collect())
}
