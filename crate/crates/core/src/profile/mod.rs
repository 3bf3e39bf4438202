//! Synthetic student profiles: sampling under the intra-subscale spread
//! constraint, validation, and deterministic text rendering.

mod catalog;
mod render;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use catalog::{
    AgeRange, AttributeCatalog, BigFiveDescriptors, BigFiveTrait, ChallengeItem, Subscale,
    TraitLevel, CHALLENGE_COUNT, DEFAULT_MAJOR_COUNT, ITEMS_PER_SUBSCALE, LIKERT_MAX, LIKERT_MIN,
    SUBSCALE_COUNT,
};
pub use render::{render_profile, ProfileText, RenderingVersion};

#[derive(Debug, thiserror::Error)]
pub enum ProfileError {
    #[error("catalog configuration error: {0}")]
    Config(String),
    #[error("invalid profile: {0}")]
    Invalid(ViolationList),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BigFiveEntry {
    #[serde(rename = "trait")]
    pub trait_code: BigFiveTrait,
    pub level: TraitLevel,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentProfile {
    pub id: String,
    pub gender: String,
    pub age: u8,
    pub major: String,
    pub standing: String,
    pub mbti: String,
    pub big_five: Vec<BigFiveEntry>,
    /// One entry per catalog subscale, each holding that subscale's Likert answers.
    pub learning_traits: Vec<Vec<u8>>,
    pub challenges: Vec<bool>,
    pub motivational_notes: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViolationList {
    pub entries: Vec<Violation>,
}

impl ViolationList {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    fn push(&mut self, field: impl Into<String>, rule: &str, message: impl Into<String>) {
        self.entries.push(Violation {
            field: field.into(),
            rule: rule.to_string(),
            message: message.into(),
        });
    }
}

impl std::fmt::Display for ViolationList {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self
            .entries
            .iter()
            .map(|v| format!("{} [{}]: {}", v.field, v.rule, v.message))
            .collect();
        f.write_str(&parts.join("; "))
    }
}

/// Draw one profile. Identical `(seed, catalog)` always yields the identical profile.
pub fn sample_profile(seed: u64, catalog: &AttributeCatalog) -> Result<StudentProfile, ProfileError> {
    catalog.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick = |rng: &mut ChaCha8Rng, list: &[String]| -> String {
        list.choose(rng).expect("validated list is non-empty").clone()
    };

    let gender = pick(&mut rng, &catalog.genders);
    let age = rng.random_range(catalog.age_range.min..=catalog.age_range.max);
    let major = pick(&mut rng, &catalog.majors);
    let standing = pick(&mut rng, &catalog.standings);
    let mbti = pick(&mut rng, &catalog.mbti_types);

    let big_five = BigFiveTrait::ALL
        .iter()
        .map(|&t| {
            let level = if rng.random_bool(0.5) {
                TraitLevel::High
            } else {
                TraitLevel::Low
            };
            let description = pick(&mut rng, catalog.descriptors(t).for_level(level));
            BigFiveEntry {
                trait_code: t,
                level,
                description,
            }
        })
        .collect();

    let learning_traits = catalog
        .learning_traits
        .iter()
        .map(|s| sample_subscale(&mut rng, s.items.len(), catalog.d_max))
        .collect();

    let challenges = (0..catalog.challenges.len())
        .map(|_| rng.random_bool(0.5))
        .collect();

    let commitment = pick(&mut rng, &catalog.goal_commitment);
    let emotion = pick(&mut rng, &catalog.emotional_states);
    let motivational_notes =
        format!("Goal commitment is {commitment}; currently feeling {emotion}.");

    let mut profile = StudentProfile {
        id: String::new(),
        gender,
        age,
        major,
        standing,
        mbti,
        big_five,
        learning_traits,
        challenges,
        motivational_notes,
    };
    profile.id = profile_id(&profile, catalog);
    Ok(profile)
}

/// Constructive sampling: each item is drawn uniformly from the window that
/// keeps it within `d_max` of every item drawn so far.
fn sample_subscale(rng: &mut impl Rng, n: usize, d_max: u8) -> Vec<u8> {
    let mut values: Vec<u8> = Vec::with_capacity(n);
    for _ in 0..n {
        let (lo, hi) = match (values.iter().min(), values.iter().max()) {
            (Some(&min), Some(&max)) => (
                max.saturating_sub(d_max).max(LIKERT_MIN),
                min.saturating_add(d_max).min(LIKERT_MAX),
            ),
            _ => (LIKERT_MIN, LIKERT_MAX),
        };
        values.push(rng.random_range(lo..=hi));
    }
    values
}

/// Stable identity: a content hash of the v1 rendering.
pub fn profile_id(profile: &StudentProfile, catalog: &AttributeCatalog) -> String {
    let text = render::render_unchecked(profile, catalog, RenderingVersion::V1);
    format!("p-{}", &crate::hashing::sha256_hex(text.as_bytes())[..16])
}

/// List every violated profile invariant. An empty list means the profile is valid.
pub fn validate_profile(profile: &StudentProfile, catalog: &AttributeCatalog) -> ViolationList {
    let mut v = ViolationList::default();

    if profile.id.trim().is_empty() {
        v.push("id", "id.non_empty", "profile id is empty");
    }
    if !catalog.genders.contains(&profile.gender) {
        v.push("gender", "gender.in_catalog", format!("unknown gender '{}'", profile.gender));
    }
    if !catalog.age_range.contains(profile.age) {
        v.push(
            "age",
            "age.range",
            format!(
                "age {} outside [{}, {}]",
                profile.age, catalog.age_range.min, catalog.age_range.max
            ),
        );
    }
    if !catalog.majors.contains(&profile.major) {
        v.push("major", "major.in_catalog", format!("unknown major '{}'", profile.major));
    }
    if !catalog.standings.contains(&profile.standing) {
        v.push(
            "standing",
            "standing.in_catalog",
            format!("unknown standing '{}'", profile.standing),
        );
    }
    if !catalog.mbti_types.contains(&profile.mbti) {
        v.push("mbti", "mbti.in_catalog", format!("unknown MBTI type '{}'", profile.mbti));
    }

    let traits: Vec<_> = profile.big_five.iter().map(|e| e.trait_code).collect();
    if traits != BigFiveTrait::ALL {
        v.push("big_five", "big_five.traits", "Big Five must list O, C, E, A, N in order");
    }
    for (i, e) in profile.big_five.iter().enumerate() {
        if catalog.big_five.iter().any(|d| d.trait_code == e.trait_code)
            && !catalog
                .descriptors(e.trait_code)
                .for_level(e.level)
                .contains(&e.description)
        {
            v.push(
                format!("big_five[{i}].description"),
                "big_five.description_matches_level",
                format!("description is not a {} {} descriptor", e.level, e.trait_code),
            );
        }
    }

    if profile.learning_traits.len() != catalog.learning_traits.len() {
        v.push(
            "learning_traits",
            "learning_traits.count",
            format!(
                "expected {} subscales, found {}",
                catalog.learning_traits.len(),
                profile.learning_traits.len()
            ),
        );
    }
    for (i, (values, sub)) in profile
        .learning_traits
        .iter()
        .zip(&catalog.learning_traits)
        .enumerate()
    {
        if values.len() != sub.items.len() {
            v.push(
                format!("learning_traits[{i}]"),
                "learning_traits.item_count",
                format!("expected {} items, found {}", sub.items.len(), values.len()),
            );
        }
        for (k, &x) in values.iter().enumerate() {
            if !(LIKERT_MIN..=LIKERT_MAX).contains(&x) {
                v.push(
                    format!("learning_traits[{i}][{k}]"),
                    "likert.range",
                    format!("value {x} outside [{LIKERT_MIN}, {LIKERT_MAX}]"),
                );
            }
        }
        if let (Some(&min), Some(&max)) = (values.iter().min(), values.iter().max()) {
            if max - min > catalog.d_max {
                v.push(
                    format!("learning_traits[{i}]"),
                    "likert.spread",
                    format!(
                        "'{}' items differ by {} (> d_max {})",
                        sub.name,
                        max - min,
                        catalog.d_max
                    ),
                );
            }
        }
    }

    if profile.challenges.len() != catalog.challenges.len() {
        v.push(
            "challenges",
            "challenges.count",
            format!(
                "expected {} answers, found {}",
                catalog.challenges.len(),
                profile.challenges.len()
            ),
        );
    }
    v
}
