//! Post-hoc analyses over profiles and their propagated scores: one-hot
//! encoding, forest feature importance, and distribution shift between the
//! generated population and the selected candidates.

mod encode;
mod forest;
mod plot;

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::profile::{AttributeCatalog, StudentProfile};

pub use encode::{one_hot_encode, ColumnDictionary, FeatureCategory, FeatureGroup, FeatureMatrix};
pub use forest::{
    fit_forest, fit_forest_columns, permutation_importance, DataSplit, ForestModel, ForestParams, Node,
    Tree, MIN_ROWS,
};
pub use plot::{distribution_svg, importance_svg};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AnalysisError {
    #[error("invalid analysis input: {0}")]
    Input(String),
    #[error("feature importance is undefined: the target has no variance")]
    UndefinedImportance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceEntry {
    pub feature: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<FeatureCategory>,
    pub raw: f64,
    /// Share of the total importance; shares sum to 1.
    pub share: f64,
    /// Raw importance divided by the largest raw importance.
    pub relative: f64,
}

/// Features ordered by descending importance, ties by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRanking {
    pub entries: Vec<ImportanceEntry>,
}

impl ImportanceRanking {
    pub fn get(&self, feature: &str) -> Option<&ImportanceEntry> {
        self.entries.iter().find(|e| e.feature == feature)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,feature,category,raw,share,relative\n");
        for (i, e) in self.entries.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                i + 1,
                csv_field(&e.feature),
                e.category.map_or("", FeatureCategory::label),
                e.raw,
                e.share,
                e.relative
            );
        }
        out
    }
}

pub fn relative_importance(model: &ForestModel) -> Result<ImportanceRanking, AnalysisError> {
    if !model.importance_defined {
        return Err(AnalysisError::UndefinedImportance);
    }
    let max = model.importance.iter().copied().fold(0.0, f64::max);
    let total = model.total_importance();
    let mut entries: Vec<ImportanceEntry> = model
        .feature_names
        .iter()
        .zip(&model.importance)
        .enumerate()
        .map(|(j, (name, &raw))| ImportanceEntry {
            feature: name.clone(),
            category: model.feature_categories.as_ref().map(|c| c[j]),
            raw,
            share: raw / total,
            relative: raw / max,
        })
        .collect();
    entries.sort_by(|a, b| b.raw.total_cmp(&a.raw).then_with(|| a.feature.cmp(&b.feature)));
    Ok(ImportanceRanking { entries })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelShift {
    pub level: String,
    pub initial: f64,
    pub selected: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureShift {
    pub feature: String,
    pub category: FeatureCategory,
    pub levels: Vec<LevelShift>,
}

/// Per-feature level frequencies before and after candidate selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionShift {
    pub initial_count: usize,
    pub selected_count: usize,
    pub features: Vec<FeatureShift>,
}

impl DistributionShift {
    pub fn feature(&self, name: &str) -> Option<&FeatureShift> {
        self.features.iter().find(|f| f.feature == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("feature,category,level,initial,selected,delta\n");
        for f in &self.features {
            for l in &f.levels {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    csv_field(&f.feature),
                    f.category.label(),
                    csv_field(&l.level),
                    l.initial,
                    l.selected,
                    l.delta
                );
            }
        }
        out
    }
}

pub fn distribution_report(
    initial: &[StudentProfile],
    selected: &[StudentProfile],
    catalog: &AttributeCatalog,
) -> Result<DistributionShift, AnalysisError> {
    if initial.is_empty() || selected.is_empty() {
        return Err(AnalysisError::Input("both populations must be non-empty".into()));
    }
    let ids: BTreeSet<&str> = initial.iter().map(|p| p.id.as_str()).collect();
    if let Some(p) = selected.iter().find(|p| !ids.contains(p.id.as_str())) {
        return Err(AnalysisError::Input(format!(
            "selected profile {} is not in the initial population",
            p.id
        )));
    }
    let before = one_hot_encode(initial, catalog)?;
    let after = one_hot_encode(selected, catalog)?;
    let (fb, fa) = (before.frequencies(), after.frequencies());
    let features = before
        .dictionary
        .groups
        .iter()
        .enumerate()
        .map(|(g, group)| FeatureShift {
            feature: group.name.clone(),
            category: group.category,
            levels: group
                .levels
                .iter()
                .enumerate()
                .map(|(l, level)| LevelShift {
                    level: level.clone(),
                    initial: fb[g][l],
                    selected: fa[g][l],
                    delta: fa[g][l] - fb[g][l],
                })
                .collect(),
        })
        .collect();
    Ok(DistributionShift {
        initial_count: initial.len(),
        selected_count: selected.len(),
        features,
    })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::sample_profile;
    use rand::{Rng, SeedableRng};

    fn population(n: u64) -> (AttributeCatalog, Vec<StudentProfile>) {
        let cat = AttributeCatalog::default();
        let ps = (0..n).map(|s| sample_profile(s, &cat).unwrap()).collect();
        (cat, ps)
    }

    #[test]
    fn identical_populations_have_zero_delta() {
        let (cat, ps) = population(40);
        let d = distribution_report(&ps, &ps, &cat).unwrap();
        assert!(d.features.iter().flat_map(|f| &f.levels).all(|l| l.delta == 0.0));
        for f in &d.features {
            let s: f64 = f.levels.iter().map(|l| l.initial).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_selected_profile() {
        let (cat, mut ps) = population(30);
        ps[7].mbti = "INTJ".into();
        let d = distribution_report(&ps, &ps[7..8], &cat).unwrap();
        let intj = d.feature("MBTI").unwrap().levels.iter().find(|l| l.level == "INTJ").unwrap();
        assert_eq!(intj.selected, 1.0);
    }

    #[test]
    fn binary_feature_shift_is_half() {
        let (cat, mut ps) = population(20);
        for (i, p) in ps.iter_mut().enumerate() {
            p.gender = cat.genders[i % 2].clone();
        }
        let selected: Vec<_> = ps.iter().filter(|p| p.gender == cat.genders[0]).cloned().collect();
        let d = distribution_report(&ps, &selected, &cat).unwrap();
        let g = d.feature("Gender").unwrap();
        assert_eq!(g.levels[0].delta, 0.5);
        assert_eq!(g.levels[1].delta, -0.5);
        assert!(d.to_csv().lines().count() > 1);
    }

    #[test]
    fn foreign_selection_rejected() {
        let (cat, ps) = population(5);
        let other = sample_profile(999, &cat).unwrap();
        assert!(distribution_report(&ps, &[other], &cat).is_err());
    }

    #[test]
    fn relative_importance_normalizes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let x: Vec<Vec<f64>> = (0..12)
            .map(|_| (0..200).map(|_| f64::from(rng.random_bool(0.5) as u8)).collect())
            .collect();
        let y = x[9].clone();
        let names: Vec<String> = (0..12).map(|j| format!("f{j:02}")).collect();
        let m = fit_forest_columns(&x, names.clone(), &y, &ForestParams::default()).unwrap();
        let r = relative_importance(&m).unwrap();
        assert_eq!(r.entries[0].feature, "f09");
        assert_eq!(r.entries[0].relative, 1.0);
        assert!(r.entries[1..].iter().all(|e| e.relative < 0.3));
        let share: f64 = r.entries.iter().map(|e| e.share).sum();
        assert!((share - 1.0).abs() < 1e-12);

        // Rescaling the target leaves relative importance unchanged.
        let y10: Vec<f64> = y.iter().map(|v| v * 10.0).collect();
        let r10 = relative_importance(&fit_forest_columns(&x, names, &y10, &ForestParams::default()).unwrap()).unwrap();
        for (a, b) in r.entries.iter().zip(&r10.entries) {
            assert_eq!(a.feature, b.feature);
            assert!((a.relative - b.relative).abs() < 1e-9);
        }
    }

    #[test]
    fn undefined_importance_is_an_error() {
        let x = vec![vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]];
        let m = fit_forest_columns(&x, vec!["a".into()], &[2.0; 6], &ForestParams::default()).unwrap();
        assert_eq!(relative_importance(&m), Err(AnalysisError::UndefinedImportance));
    }
}
