use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Profile,
    Behavior,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 2] = [ScoreKind::Profile, ScoreKind::Behavior];

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::Profile => "profile",
            ScoreKind::Behavior => "behavior",
        }
    }
}

impl std::fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorePhase {
    Initial,
    Propagated,
    Expert,
}

impl ScorePhase {
    pub fn as_str(self) -> &'static str {
        match self {
            ScorePhase::Initial => "initial",
            ScorePhase::Propagated => "propagated",
            ScorePhase::Expert => "expert",
        }
    }
}

impl std::fmt::Display for ScorePhase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One consistency judgment for one profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub profile_id: String,
    pub kind: ScoreKind,
    pub phase: ScorePhase,
    /// Initial: integer 1-10. Propagated: any real. Expert: normalized to 1-10.
    pub value: f64,
    pub explanation: String,
    pub scorer: String,
    pub timestamp: String,
    /// Repetition index for initial judgments.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repetition: Option<u32>,
    /// Value on the scorer's native scale when it differs from `value` (expert 1-100).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeQuestion {
    pub question: String,
    pub fields: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionSet {
    pub profile_id: String,
    pub questions: Vec<ProbeQuestion>,
}

impl QuestionSet {
    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseSet {
    pub profile_id: String,
    pub answers: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranscriptPurpose {
    Probe,
    Behavior,
    ExpertSession,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Questioner,
    Dialogue,
    Expert,
    Student,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub profile_id: String,
    pub purpose: TranscriptPurpose,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repetition: Option<u32>,
    pub turns: Vec<Turn>,
    /// False when the conversation was cut short by a backend failure.
    pub complete: bool,
}

impl Transcript {
    pub fn new(profile_id: &str, purpose: TranscriptPurpose) -> Self {
        Transcript {
            profile_id: profile_id.to_string(),
            purpose,
            repetition: None,
            turns: Vec::new(),
            complete: true,
        }
    }

    /// Completed prompt/reply exchanges (pairs of turns).
    pub fn exchange_count(&self) -> usize {
        self.turns.len() / 2
    }

    pub fn push(&mut self, speaker: Speaker, text: impl Into<String>) {
        self.turns.push(Turn {
            speaker,
            text: text.into(),
        });
    }

    /// Plain-text rendering used inside scorer prompts.
    pub fn render(&self) -> String {
        self.turns
            .iter()
            .map(|t| {
                let who = match t.speaker {
                    Speaker::Questioner => "Questioner",
                    Speaker::Dialogue => "Advisor",
                    Speaker::Expert => "Expert",
                    Speaker::Student => "Student",
                };
                format!("{who}: {}", t.text)
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}
