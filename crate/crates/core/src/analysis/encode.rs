use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::profile::{AttributeCatalog, StudentProfile, TraitLevel, LIKERT_MAX, LIKERT_MIN};

/// Reporting category of a feature group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FeatureCategory {
    #[serde(rename = "Basic Information")]
    BasicInformation,
    #[serde(rename = "BF value")]
    BigFiveValue,
    #[serde(rename = "BF description")]
    BigFiveDescription,
    #[serde(rename = "Study Questionnaire")]
    StudyQuestionnaire,
    #[serde(rename = "Four Trait Questionnaire")]
    FourTraitQuestionnaire,
}

impl FeatureCategory {
    pub fn label(self) -> &'static str {
        match self {
            FeatureCategory::BasicInformation => "Basic Information",
            FeatureCategory::BigFiveValue => "BF value",
            FeatureCategory::BigFiveDescription => "BF description",
            FeatureCategory::StudyQuestionnaire => "Study Questionnaire",
            FeatureCategory::FourTraitQuestionnaire => "Four Trait Questionnaire",
        }
    }
}

/// One categorical profile attribute expanded into indicator columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureGroup {
    pub name: String,
    pub category: FeatureCategory,
    /// Category labels in column order.
    pub levels: Vec<String>,
    /// Index of this group's first column.
    pub offset: usize,
}

impl FeatureGroup {
    pub fn column_name(&self, level: usize) -> String {
        format!("{}={}", self.name, self.levels[level])
    }
}

/// Column layout of a one-hot encoding; depends only on the catalog.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnDictionary {
    pub groups: Vec<FeatureGroup>,
}

impl ColumnDictionary {
    pub fn for_catalog(catalog: &AttributeCatalog) -> Self {
        let mut groups: Vec<FeatureGroup> = Vec::new();
        let mut push = |name: String, category, levels: Vec<String>| {
            let offset = groups.last().map_or(0, |g| g.offset + g.levels.len());
            groups.push(FeatureGroup {
                name,
                category,
                levels,
                offset,
            });
        };
        use FeatureCategory::*;
        push("Gender".into(), BasicInformation, catalog.genders.clone());
        push(
            "Age".into(),
            BasicInformation,
            (catalog.age_range.min..=catalog.age_range.max).map(|a| a.to_string()).collect(),
        );
        push("Major".into(), BasicInformation, catalog.majors.clone());
        push("Standing".into(), BasicInformation, catalog.standings.clone());
        push("MBTI".into(), BasicInformation, catalog.mbti_types.clone());
        for d in &catalog.big_five {
            push(
                format!("BF-{}", d.trait_code.code()),
                BigFiveValue,
                vec!["high".into(), "low".into()],
            );
        }
        for d in &catalog.big_five {
            let levels = (1..=d.high.len())
                .map(|i| format!("high-{i}"))
                .chain((1..=d.low.len()).map(|i| format!("low-{i}")))
                .collect();
            push(format!("BF-{} desc", d.trait_code.code()), BigFiveDescription, levels);
        }
        for i in 0..catalog.challenges.len() {
            push(format!("Q{}", i + 1), StudyQuestionnaire, vec!["Yes".into(), "No".into()]);
        }
        for s in &catalog.learning_traits {
            for i in 0..s.items.len() {
                push(
                    format!("{} #{}", s.name, i + 1),
                    FourTraitQuestionnaire,
                    (LIKERT_MIN..=LIKERT_MAX).map(|v| v.to_string()).collect(),
                );
            }
        }
        ColumnDictionary { groups }
    }

    pub fn n_columns(&self) -> usize {
        self.groups.iter().map(|g| g.levels.len()).sum()
    }

    pub fn column_names(&self) -> Vec<String> {
        self.groups
            .iter()
            .flat_map(|g| (0..g.levels.len()).map(move |l| g.column_name(l)))
            .collect()
    }

    /// Group index and level index of a column.
    pub fn locate(&self, column: usize) -> Option<(usize, usize)> {
        self.groups.iter().enumerate().find_map(|(gi, g)| {
            (column >= g.offset && column < g.offset + g.levels.len()).then(|| (gi, column - g.offset))
        })
    }

    pub fn group(&self, name: &str) -> Option<&FeatureGroup> {
        self.groups.iter().find(|g| g.name == name)
    }
}

/// Dense 0/1 matrix, one row per profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub dictionary: ColumnDictionary,
    pub row_ids: Vec<String>,
    /// Row-major, `row_ids.len() * n_columns` entries.
    data: Vec<u8>,
}

impl FeatureMatrix {
    pub fn n_rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn n_columns(&self) -> usize {
        self.dictionary.n_columns()
    }

    pub fn row(&self, r: usize) -> &[u8] {
        let p = self.n_columns();
        &self.data[r * p..(r + 1) * p]
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.row(r)[c]
    }

    /// Category label of every group for one row.
    pub fn decode_row(&self, r: usize) -> BTreeMap<String, String> {
        let row = self.row(r);
        self.dictionary
            .groups
            .iter()
            .filter_map(|g| {
                (0..g.levels.len())
                    .find(|&l| row[g.offset + l] == 1)
                    .map(|l| (g.name.clone(), g.levels[l].clone()))
            })
            .collect()
    }

    /// Column-major `f64` copy, as consumed by the forest.
    pub fn columns_f64(&self) -> Vec<Vec<f64>> {
        let (n, p) = (self.n_rows(), self.n_columns());
        (0..p)
            .map(|c| (0..n).map(|r| f64::from(self.data[r * p + c])).collect())
            .collect()
    }

    /// Fraction of rows in each level of each group.
    pub fn frequencies(&self) -> Vec<Vec<f64>> {
        let n = self.n_rows() as f64;
        self.dictionary
            .groups
            .iter()
            .map(|g| {
                (0..g.levels.len())
                    .map(|l| {
                        (0..self.n_rows()).filter(|&r| self.get(r, g.offset + l) == 1).count() as f64 / n
                    })
                    .collect()
            })
            .collect()
    }
}

/// Category labels of every group for one profile, in dictionary order.
fn profile_labels(
    p: &StudentProfile,
    catalog: &AttributeCatalog,
) -> Result<Vec<String>, AnalysisError> {
    let mut labels = vec![
        p.gender.clone(),
        p.age.to_string(),
        p.major.clone(),
        p.standing.clone(),
        p.mbti.clone(),
    ];
    let entry = |t| {
        p.big_five
            .iter()
            .find(|e| e.trait_code == t)
            .ok_or_else(|| AnalysisError::Input(format!("{}: missing Big Five trait {}", p.id, t.code())))
    };
    for d in &catalog.big_five {
        labels.push(entry(d.trait_code)?.level.as_str().to_string());
    }
    for d in &catalog.big_five {
        let e = entry(d.trait_code)?;
        let pool = match e.level {
            TraitLevel::High => &d.high,
            TraitLevel::Low => &d.low,
        };
        let idx = pool.iter().position(|s| *s == e.description).ok_or_else(|| {
            AnalysisError::Input(format!(
                "{}: description for {} is not a catalog descriptor",
                p.id,
                d.trait_code.code()
            ))
        })?;
        labels.push(format!("{}-{}", e.level.as_str(), idx + 1));
    }
    if p.challenges.len() != catalog.challenges.len() {
        return Err(AnalysisError::Input(format!("{}: challenge count mismatch", p.id)));
    }
    labels.extend(p.challenges.iter().map(|&c| if c { "Yes" } else { "No" }.to_string()));
    if p.learning_traits.len() != catalog.learning_traits.len()
        || p.learning_traits
            .iter()
            .zip(&catalog.learning_traits)
            .any(|(v, s)| v.len() != s.items.len())
    {
        return Err(AnalysisError::Input(format!("{}: learning-trait shape mismatch", p.id)));
    }
    labels.extend(p.learning_traits.iter().flatten().map(|v| v.to_string()));
    Ok(labels)
}

pub fn one_hot_encode(
    profiles: &[StudentProfile],
    catalog: &AttributeCatalog,
) -> Result<FeatureMatrix, AnalysisError> {
    if profiles.is_empty() {
        return Err(AnalysisError::Input("no profiles to encode".into()));
    }
    let dictionary = ColumnDictionary::for_catalog(catalog);
    let p = dictionary.n_columns();
    let mut data = vec![0u8; profiles.len() * p];
    for (r, profile) in profiles.iter().enumerate() {
        let labels = profile_labels(profile, catalog)?;
        debug_assert_eq!(labels.len(), dictionary.groups.len());
        for (g, label) in dictionary.groups.iter().zip(&labels) {
            let l = g.levels.iter().position(|x| x == label).ok_or_else(|| {
                AnalysisError::Input(format!("{}: {} value '{label}' not in catalog", profile.id, g.name))
            })?;
            data[r * p + g.offset + l] = 1;
        }
    }
    Ok(FeatureMatrix {
        dictionary,
        row_ids: profiles.iter().map(|p| p.id.clone()).collect(),
        data,
    })
}
