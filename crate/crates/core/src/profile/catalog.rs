//! Attribute catalog: the value space that profiles are sampled from.
//!
//! The catalog is plain configuration. [`AttributeCatalog::default`] carries
//! the stock values; a custom catalog can be loaded from TOML or JSON with
//! [`AttributeCatalog::load`] and must pass [`AttributeCatalog::validate`]
//! before use.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ProfileError;

/// The five Big Five dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BigFiveTrait {
    #[serde(rename = "O")]
    Openness,
    #[serde(rename = "C")]
    Conscientiousness,
    #[serde(rename = "E")]
    Extraversion,
    #[serde(rename = "A")]
    Agreeableness,
    #[serde(rename = "N")]
    Neuroticism,
}

impl BigFiveTrait {
    pub const ALL: [BigFiveTrait; 5] = [
        BigFiveTrait::Openness,
        BigFiveTrait::Conscientiousness,
        BigFiveTrait::Extraversion,
        BigFiveTrait::Agreeableness,
        BigFiveTrait::Neuroticism,
    ];

    pub fn code(self) -> &'static str {
        match self {
            BigFiveTrait::Openness => "O",
            BigFiveTrait::Conscientiousness => "C",
            BigFiveTrait::Extraversion => "E",
            BigFiveTrait::Agreeableness => "A",
            BigFiveTrait::Neuroticism => "N",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BigFiveTrait::Openness => "Openness",
            BigFiveTrait::Conscientiousness => "Conscientiousness",
            BigFiveTrait::Extraversion => "Extraversion",
            BigFiveTrait::Agreeableness => "Agreeableness",
            BigFiveTrait::Neuroticism => "Neuroticism",
        }
    }
}

impl fmt::Display for BigFiveTrait {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// High/low pole of a Big Five dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraitLevel {
    High,
    Low,
}

impl TraitLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            TraitLevel::High => "high",
            TraitLevel::Low => "low",
        }
    }
}

impl fmt::Display for TraitLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgeRange {
    pub min: u8,
    pub max: u8,
}

impl AgeRange {
    pub fn contains(&self, age: u8) -> bool {
        (self.min..=self.max).contains(&age)
    }

    pub fn len(&self) -> usize {
        usize::from(self.max.saturating_sub(self.min)) + 1
    }

    pub fn is_empty(&self) -> bool {
        self.min > self.max
    }
}

/// Descriptions for one Big Five dimension. Each pole may carry several
/// description variants; a description always belongs to exactly one pole.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BigFiveDescriptors {
    #[serde(rename = "trait")]
    pub trait_code: BigFiveTrait,
    pub high: Vec<String>,
    pub low: Vec<String>,
}

impl BigFiveDescriptors {
    pub fn for_level(&self, level: TraitLevel) -> &[String] {
        match level {
            TraitLevel::High => &self.high,
            TraitLevel::Low => &self.low,
        }
    }
}

/// A group of semantically equivalent Likert items.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subscale {
    pub name: String,
    pub items: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChallengeItem {
    pub domain: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeCatalog {
    pub genders: Vec<String>,
    pub age_range: AgeRange,
    pub majors: Vec<String>,
    pub standings: Vec<String>,
    pub mbti_types: Vec<String>,
    pub big_five: Vec<BigFiveDescriptors>,
    pub learning_traits: Vec<Subscale>,
    pub challenges: Vec<ChallengeItem>,
    pub goal_commitment: Vec<String>,
    pub emotional_states: Vec<String>,
    /// Maximum allowed spread between items of the same subscale.
    pub d_max: u8,
}

pub const LIKERT_MIN: u8 = 1;
pub const LIKERT_MAX: u8 = 5;
pub const SUBSCALE_COUNT: usize = 4;
pub const ITEMS_PER_SUBSCALE: usize = 3;
pub const CHALLENGE_COUNT: usize = 7;
pub const DEFAULT_MAJOR_COUNT: usize = 62;

impl AttributeCatalog {
    /// Load a catalog from a `.toml` or `.json` file.
    pub fn load(path: &Path) -> Result<Self, ProfileError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| ProfileError::Config(format!("{}: {e}", path.display())))?;
        let catalog: AttributeCatalog = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&raw)
                .map_err(|e| ProfileError::Config(format!("{}: {e}", path.display())))?,
            _ => toml::from_str(&raw)
                .map_err(|e| ProfileError::Config(format!("{}: {e}", path.display())))?,
        };
        catalog.validate()?;
        Ok(catalog)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("catalog serializes to TOML")
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        let mut problems = Vec::new();
        let mut require = |ok: bool, msg: String| {
            if !ok {
                problems.push(msg);
            }
        };

        require(!self.genders.is_empty(), "genders must not be empty".into());
        require(
            self.age_range.min <= self.age_range.max,
            format!(
                "age_range [{}, {}] is empty",
                self.age_range.min, self.age_range.max
            ),
        );
        require(!self.majors.is_empty(), "majors must not be empty".into());
        require(!self.standings.is_empty(), "standings must not be empty".into());
        for (name, list) in [
            ("genders", &self.genders),
            ("majors", &self.majors),
            ("standings", &self.standings),
            ("mbti_types", &self.mbti_types),
        ] {
            let unique: BTreeSet<_> = list.iter().collect();
            require(unique.len() == list.len(), format!("{name} contains duplicates"));
            require(
                list.iter().all(|s| !s.trim().is_empty()),
                format!("{name} contains an empty entry"),
            );
        }

        require(
            self.mbti_types.len() == 16,
            format!("mbti_types must have 16 entries, found {}", self.mbti_types.len()),
        );
        for code in &self.mbti_types {
            require(is_mbti_code(code), format!("'{code}' is not an MBTI code"));
        }

        let codes: Vec<_> = self.big_five.iter().map(|d| d.trait_code).collect();
        require(
            codes == BigFiveTrait::ALL,
            "big_five must list O, C, E, A, N in that order".into(),
        );
        for d in &self.big_five {
            require(
                !d.high.is_empty() && !d.low.is_empty(),
                format!("big_five {} needs at least one high and one low description", d.trait_code),
            );
            let mut all: Vec<&String> = d.high.iter().chain(&d.low).collect();
            let n = all.len();
            all.sort();
            all.dedup();
            require(
                all.len() == n,
                format!("big_five {} descriptions must be distinct", d.trait_code),
            );
        }

        require(
            self.learning_traits.len() == SUBSCALE_COUNT,
            format!(
                "learning_traits must have {SUBSCALE_COUNT} subscales, found {}",
                self.learning_traits.len()
            ),
        );
        for s in &self.learning_traits {
            require(
                s.items.len() == ITEMS_PER_SUBSCALE,
                format!(
                    "subscale '{}' must have {ITEMS_PER_SUBSCALE} items, found {}",
                    s.name,
                    s.items.len()
                ),
            );
        }
        require(
            self.challenges.len() == CHALLENGE_COUNT,
            format!(
                "challenges must have {CHALLENGE_COUNT} items, found {}",
                self.challenges.len()
            ),
        );
        require(
            !self.goal_commitment.is_empty() && !self.emotional_states.is_empty(),
            "goal_commitment and emotional_states must not be empty".into(),
        );
        require(
            self.d_max < LIKERT_MAX - LIKERT_MIN + 1,
            format!("d_max {} exceeds the Likert span", self.d_max),
        );

        if problems.is_empty() {
            Ok(())
        } else {
            Err(ProfileError::Config(problems.join("; ")))
        }
    }

    pub fn descriptors(&self, t: BigFiveTrait) -> &BigFiveDescriptors {
        self.big_five
            .iter()
            .find(|d| d.trait_code == t)
            .expect("validated catalog lists every Big Five trait")
    }
}

fn is_mbti_code(code: &str) -> bool {
    let b = code.as_bytes();
    b.len() == 4
        && matches!(b[0], b'E' | b'I')
        && matches!(b[1], b'S' | b'N')
        && matches!(b[2], b'T' | b'F')
        && matches!(b[3], b'J' | b'P')
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

const MAJORS: [&str; DEFAULT_MAJOR_COUNT] = [
    // Science
    "Mathematics",
    "Statistics",
    "Physics",
    "Chemistry",
    "Biology",
    "Biochemistry",
    "Geology",
    "Environmental Science",
    "Astronomy",
    "Neuroscience",
    "Ecology",
    "Oceanography",
    "Atmospheric Science",
    "Data Science",
    "Materials Science",
    // Engineering
    "Computer Science",
    "Software Engineering",
    "Electrical Engineering",
    "Mechanical Engineering",
    "Civil Engineering",
    "Chemical Engineering",
    "Aerospace Engineering",
    "Biomedical Engineering",
    "Industrial Engineering",
    "Automation",
    "Architecture",
    "Nuclear Engineering",
    "Energy Engineering",
    "Telecommunications",
    "Robotics",
    "Agricultural Engineering",
    // Social Science
    "Economics",
    "Finance",
    "Accounting",
    "Business Administration",
    "Marketing",
    "Psychology",
    "Sociology",
    "Political Science",
    "International Relations",
    "Law",
    "Education",
    "Public Administration",
    "Journalism",
    "Anthropology",
    "Geography",
    "Social Work",
    "Public Health",
    // Arts and Humanities
    "English Literature",
    "History",
    "Philosophy",
    "Linguistics",
    "Chinese Literature",
    "Foreign Languages",
    "Fine Arts",
    "Music",
    "Film Studies",
    "Graphic Design",
    "Theater",
    "Art History",
    "Archaeology",
    "Religious Studies",
];

impl Default for AttributeCatalog {
    fn default() -> Self {
        let bf = |t, high: &[&str], low: &[&str]| BigFiveDescriptors {
            trait_code: t,
            high: strings(high),
            low: strings(low),
        };
        let sub = |name: &str, items: &[&str]| Subscale {
            name: name.to_string(),
            items: strings(items),
        };
        let ch = |domain: &str, text: &str| ChallengeItem {
            domain: domain.to_string(),
            text: text.to_string(),
        };
        AttributeCatalog {
            genders: strings(&["Male", "Female"]),
            age_range: AgeRange { min: 17, max: 28 },
            majors: strings(&MAJORS),
            standings: strings(&[
                "Freshman",
                "Sophomore",
                "Junior",
                "Senior",
                "First-year Master",
                "Second-year Master",
                "Third-year Master",
            ]),
            mbti_types: strings(&[
                "ISTJ", "ISFJ", "INFJ", "INTJ", "ISTP", "ISFP", "INFP", "INTP", "ESTP", "ESFP",
                "ENFP", "ENTP", "ESTJ", "ESFJ", "ENFJ", "ENTJ",
            ]),
            big_five: vec![
                bf(
                    BigFiveTrait::Openness,
                    &[
                        "Curious about new ideas and enjoys exploring unfamiliar subjects.",
                        "Imaginative, likes abstract questions and creative approaches to study.",
                    ],
                    &[
                        "Prefers familiar routines and concrete, practical material.",
                        "Skeptical of unconventional methods; sticks to what has worked before.",
                    ],
                ),
                bf(
                    BigFiveTrait::Conscientiousness,
                    &[
                        "Organized and dependable; plans work ahead and follows through.",
                        "Self-disciplined, keeps track of deadlines and details.",
                    ],
                    &[
                        "Easily distracted from learning tasks and often leaves work to the last minute.",
                        "Loosely organized; loses track of assignments and plans.",
                    ],
                ),
                bf(
                    BigFiveTrait::Extraversion,
                    &[
                        "Energetic and talkative; enjoys group work and class discussion.",
                        "Seeks out social settings and speaks up readily.",
                    ],
                    &[
                        "Reserved and quiet; prefers studying alone.",
                        "Finds large groups draining and rarely volunteers in class.",
                    ],
                ),
                bf(
                    BigFiveTrait::Agreeableness,
                    &[
                        "Cooperative and empathetic; readily helps classmates.",
                        "Trusting and considerate, avoids conflict with peers and teachers.",
                    ],
                    &[
                        "Competitive and blunt; questions others' opinions.",
                        "Guarded with others and prefers to rely on own judgment.",
                    ],
                ),
                bf(
                    BigFiveTrait::Neuroticism,
                    &[
                        "Prone to worry and stress, especially before exams.",
                        "Moods swing with setbacks; frustration builds quickly.",
                    ],
                    &[
                        "Emotionally steady; stays calm under academic pressure.",
                        "Recovers quickly from setbacks and rarely feels anxious.",
                    ],
                ),
            ],
            learning_traits: vec![
                sub(
                    "Self-regulation",
                    &[
                        "I set specific goals before I start studying.",
                        "I plan how I will approach a task before beginning it.",
                        "I monitor my progress and adjust my study plan when needed.",
                    ],
                ),
                sub(
                    "Motivation",
                    &[
                        "I am eager to learn the material in my courses.",
                        "I keep working even when the course content is difficult.",
                        "I find studying rewarding in itself.",
                    ],
                ),
                sub(
                    "Engagement",
                    &[
                        "I actively participate in class activities.",
                        "I stay focused during lectures and study sessions.",
                        "I put real effort into my coursework.",
                    ],
                ),
                sub(
                    "Information processing",
                    &[
                        "I connect new material to what I already know.",
                        "I summarize the main ideas in my own words.",
                        "I look for the underlying structure of what I learn.",
                    ],
                ),
            ],
            challenges: vec![
                ch("cognitive", "Do you have difficulty understanding course material?"),
                ch(
                    "cognitive",
                    "Do you have trouble taking tests or completing assignments?",
                ),
                ch("metacognitive", "Are you easily distracted in class?"),
                ch(
                    "metacognitive",
                    "Do you lack effective learning strategies or study methods?",
                ),
                ch("social", "Do you find it hard to ask teachers or classmates for help?"),
                ch("social", "Do you feel isolated from your classmates?"),
                ch("affective", "Do you struggle to manage stress or anxiety about school?"),
            ],
            goal_commitment: strings(&["strong", "moderate", "weak"]),
            emotional_states: strings(&[
                "calm and optimistic",
                "anxious about upcoming deadlines",
                "frustrated by recent grades",
                "tired and unmotivated",
                "hopeful but uncertain",
            ]),
            d_max: 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_catalog_matches_stock_shape() {
        let c = AttributeCatalog::default();
        c.validate().unwrap();
        assert_eq!(c.age_range, AgeRange { min: 17, max: 28 });
        assert_eq!(c.majors.len(), 62);
        assert_eq!(c.mbti_types.len(), 16);
        assert_eq!(c.learning_traits.len(), 4);
        assert!(c.learning_traits.iter().all(|s| s.items.len() == 3));
        assert_eq!(c.challenges.len(), 7);
        assert_eq!(c.d_max, 1);
    }

    #[test]
    fn rejects_broken_catalogs() {
        let mut c = AttributeCatalog::default();
        c.mbti_types.pop();
        assert!(matches!(c.validate(), Err(ProfileError::Config(_))));

        let mut c = AttributeCatalog::default();
        c.learning_traits[2].items.push("extra".into());
        assert!(c.validate().is_err());

        let c = AttributeCatalog {
            age_range: AgeRange { min: 30, max: 20 },
            ..AttributeCatalog::default()
        };
        assert!(c.validate().is_err());

        let mut c = AttributeCatalog::default();
        c.mbti_types[0] = "ABCD".into();
        c.mbti_types.dedup();
        assert!(c.validate().is_err());
    }

    #[test]
    fn toml_round_trip() {
        let c = AttributeCatalog::default();
        let back: AttributeCatalog = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }
}
