//! Two-round consistency scoring.
//!
//! Round one probes a profile for internal conflicts: a questioning agent
//! lists conflict points, the student agent answers them in character, and a
//! profile scorer rates coherence 1-10. Round two runs a multi-turn
//! conversation between an advisor-style dialogue agent and the student
//! agent, then a behavior scorer rates how well the behavior matches the
//! profile. Every structured reply is parsed strictly; unparseable output is
//! re-asked a bounded number of times before the profile is recorded as failed.

mod parse;
mod records;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::gateway::{ChatMessage, Gateway, GatewayError, GenConfig, PROFILE_CLOSE, PROFILE_ID_MARKER, PROFILE_OPEN};
use crate::hashing::sha256_hex;
use crate::profile::{render_profile, AttributeCatalog, ProfileError, RenderingVersion, StudentProfile};

pub use parse::{json_objects, parse_questions, parse_scorer_output, ParseError, PROFILE_FIELDS, SCORE_MAX, SCORE_MIN};
pub use records::{
    ProbeQuestion, QuestionSet, ResponseSet, ScoreKind, ScorePhase, ScoreRecord, Speaker,
    Transcript, TranscriptPurpose, Turn,
};

pub const DEFAULT_TURNS: usize = 15;
pub const DEFAULT_MAX_ASKS: u32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum ScoringError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("{stage}: output still unparseable after {attempts} attempt(s): {last_error}")]
    Unparseable {
        stage: &'static str,
        attempts: u32,
        last_error: String,
    },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
}

/// The fixed instruction handed to a scorer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoringInstruction {
    pub kind: ScoreKind,
    pub prompt: String,
    pub output_schema: String,
    pub version: String,
}

impl ScoringInstruction {
    pub fn hash(&self) -> String {
        sha256_hex(self.prompt.as_bytes())
    }
}

pub const SCORE_SCHEMA: &str =
    r#"{"score": <integer 1-10>, "explanation": "<non-empty string>"}"#;

/// Versioned prompt templates for every agent role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub version: String,
    pub questioner: String,
    pub student: String,
    pub dialogue: String,
    pub profile_scorer: String,
    pub behavior_scorer: String,
}

impl Default for PromptSet {
    fn default() -> Self {
        PromptSet {
            version: "v1".into(),
            questioner: include_str!("../../prompts/questioner.txt").into(),
            student: include_str!("../../prompts/student.txt").into(),
            dialogue: include_str!("../../prompts/dialogue.txt").into(),
            profile_scorer: include_str!("../../prompts/profile_scorer.txt").into(),
            behavior_scorer: include_str!("../../prompts/behavior_scorer.txt").into(),
        }
    }
}

impl PromptSet {
    pub fn instruction(&self, kind: ScoreKind) -> ScoringInstruction {
        ScoringInstruction {
            kind,
            prompt: match kind {
                ScoreKind::Profile => self.profile_scorer.clone(),
                ScoreKind::Behavior => self.behavior_scorer.clone(),
            },
            output_schema: SCORE_SCHEMA.into(),
            version: self.version.clone(),
        }
    }

    /// Content hash of every template, keyed by role.
    pub fn hashes(&self) -> BTreeMap<String, String> {
        [
            ("questioner", &self.questioner),
            ("student", &self.student),
            ("dialogue", &self.dialogue),
            ("profile_scorer", &self.profile_scorer),
            ("behavior_scorer", &self.behavior_scorer),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), sha256_hex(v.as_bytes())))
        .collect()
    }

    pub fn student_persona(&self, profile_text: &str) -> String {
        self.student
            .replace("{profile}", &profile_block(profile_text))
    }
}

fn profile_block(text: &str) -> String {
    format!("{PROFILE_OPEN}\n{}\n{PROFILE_CLOSE}", text.trim_end())
}

fn empty_reply(stage: &'static str) -> ScoringError {
    ScoringError::Unparseable {
        stage,
        attempts: 1,
        last_error: "empty reply".into(),
    }
}

const REASK: &str = "Your previous reply could not be parsed";

/// Error from a behavior dialogue, carrying whatever was recorded before the failure.
#[derive(Debug, thiserror::Error)]
#[error("behavior dialogue failed after {} exchange(s): {error}", partial.exchange_count())]
pub struct DialogueFailure {
    pub error: ScoringError,
    pub partial: Transcript,
}

/// Runs the scoring protocol against one gateway.
#[derive(Debug, Clone)]
pub struct Protocol<'a> {
    gateway: &'a Gateway,
    catalog: &'a AttributeCatalog,
    prompts: &'a PromptSet,
    config: GenConfig,
    max_asks: u32,
    clock: Clock,
    repetition: Option<u32>,
}

impl<'a> Protocol<'a> {
    pub fn new(
        gateway: &'a Gateway,
        catalog: &'a AttributeCatalog,
        prompts: &'a PromptSet,
        config: GenConfig,
    ) -> Self {
        Protocol {
            gateway,
            catalog,
            prompts,
            config,
            max_asks: DEFAULT_MAX_ASKS,
            clock: Clock::System,
            repetition: None,
        }
    }

    pub fn with_max_asks(mut self, max_asks: u32) -> Self {
        self.max_asks = max_asks.max(1);
        self
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    /// Same protocol tagged with a repetition index; the index is also sent as
    /// the decoding `seed` so repeated runs are distinguishable.
    pub fn for_repetition(&self, repetition: u32) -> Self {
        let mut p = self.clone();
        p.repetition = Some(repetition);
        p.config = p.config.with_param("seed", repetition);
        p
    }

    pub fn prompts(&self) -> &PromptSet {
        self.prompts
    }

    fn profile_text(&self, profile: &StudentProfile) -> Result<String, ScoringError> {
        Ok(render_profile(profile, self.catalog, RenderingVersion::V1)?.text)
    }

    fn scorer_identity(&self, kind: ScoreKind) -> String {
        format!("{}:{}_scorer@{}", self.config.model, kind, self.prompts.version)
    }

    /// Chat, parse, and re-ask on parse failure up to `max_asks` total attempts.
    fn ask<T>(
        &self,
        stage: &'static str,
        mut messages: Vec<ChatMessage>,
        parse: impl Fn(&str) -> Result<T, ParseError>,
    ) -> Result<T, ScoringError> {
        let mut last_error = String::new();
        for attempt in 1..=self.max_asks {
            let reply = self.gateway.chat(&messages, &self.config)?;
            match parse(&reply) {
                Ok(v) => return Ok(v),
                Err(e) => {
                    last_error = e.0;
                    if attempt < self.max_asks {
                        messages.push(ChatMessage::assistant(if reply.trim().is_empty() {
                            "(empty reply)".to_string()
                        } else {
                            reply
                        }));
                        messages.push(ChatMessage::user(format!(
                            "{REASK} ({last_error}). Reply again with only the JSON object described in your instructions."
                        )));
                    }
                }
            }
        }
        Err(ScoringError::Unparseable {
            stage,
            attempts: self.max_asks,
            last_error,
        })
    }

    pub fn generate_questions(&self, profile: &StudentProfile) -> Result<QuestionSet, ScoringError> {
        let text = self.profile_text(profile)?;
        let messages = vec![
            ChatMessage::system(self.prompts.questioner.clone()),
            ChatMessage::user(format!(
                "{PROFILE_ID_MARKER} {}\n{}",
                profile.id,
                profile_block(&text)
            )),
        ];
        let questions = self.ask("questioner", messages, parse_questions)?;
        Ok(QuestionSet {
            profile_id: profile.id.clone(),
            questions,
        })
    }

    pub fn collect_defenses(
        &self,
        profile: &StudentProfile,
        questions: &QuestionSet,
    ) -> Result<ResponseSet, ScoringError> {
        if questions.is_empty() {
            return Err(ScoringError::Precondition("question set is empty".into()));
        }
        if questions.profile_id != profile.id {
            return Err(ScoringError::Precondition(format!(
                "questions belong to {}, not {}",
                questions.profile_id, profile.id
            )));
        }
        let text = self.profile_text(profile)?;
        let mut messages = vec![ChatMessage::system(self.prompts.student_persona(&text))];
        let mut answers = Vec::with_capacity(questions.len());
        for q in &questions.questions {
            messages.push(ChatMessage::user(q.question.clone()));
            let answer = self.gateway.chat(&messages, &self.config)?;
            if answer.trim().is_empty() {
                return Err(empty_reply("student"));
            }
            messages.push(ChatMessage::assistant(answer.clone()));
            answers.push(answer);
        }
        Ok(ResponseSet {
            profile_id: profile.id.clone(),
            answers,
        })
    }

    pub fn score_profile(
        &self,
        profile: &StudentProfile,
        questions: &QuestionSet,
        responses: &ResponseSet,
        instruction: &ScoringInstruction,
    ) -> Result<ScoreRecord, ScoringError> {
        if instruction.kind != ScoreKind::Profile {
            return Err(ScoringError::Precondition(
                "profile scoring needs a profile instruction".into(),
            ));
        }
        if responses.answers.len() != questions.len() || responses.profile_id != questions.profile_id {
            return Err(ScoringError::Precondition(format!(
                "{} answers for {} questions",
                responses.answers.len(),
                questions.len()
            )));
        }
        let text = self.profile_text(profile)?;
        let qa = questions
            .questions
            .iter()
            .zip(&responses.answers)
            .enumerate()
            .map(|(i, (q, a))| format!("Q{}: {}\nA{}: {}", i + 1, q.question, i + 1, a))
            .collect::<Vec<_>>()
            .join("\n");
        let messages = vec![
            ChatMessage::system(instruction.prompt.clone()),
            ChatMessage::user(format!(
                "{PROFILE_ID_MARKER} {}\n{}\n\nProbe questions and the student's answers:\n{qa}",
                profile.id,
                profile_block(&text)
            )),
        ];
        let (score, explanation) = self.ask("profile_scorer", messages, parse_scorer_output)?;
        Ok(self.record(profile, ScoreKind::Profile, score, explanation))
    }

    fn record(&self, profile: &StudentProfile, kind: ScoreKind, score: u8, explanation: String) -> ScoreRecord {
        ScoreRecord {
            profile_id: profile.id.clone(),
            kind,
            phase: ScorePhase::Initial,
            value: f64::from(score),
            explanation,
            scorer: self.scorer_identity(kind),
            timestamp: self.clock.now(),
            repetition: self.repetition,
            raw_value: None,
        }
    }

    /// Conversation of exactly `n_turns` advisor/student exchanges.
    pub fn run_behavior_dialogue(
        &self,
        profile: &StudentProfile,
        n_turns: usize,
    ) -> Result<Transcript, DialogueFailure> {
        let mut transcript = Transcript::new(&profile.id, TranscriptPurpose::Behavior);
        transcript.repetition = self.repetition;
        let fail = |error: ScoringError, mut partial: Transcript| {
            partial.complete = false;
            DialogueFailure { error, partial }
        };
        if n_turns == 0 {
            return Err(fail(
                ScoringError::Precondition("n_turns must be at least 1".into()),
                transcript,
            ));
        }
        let text = match self.profile_text(profile) {
            Ok(t) => t,
            Err(e) => return Err(fail(e, transcript)),
        };

        let mut advisor = vec![
            ChatMessage::system(self.prompts.dialogue.clone()),
            ChatMessage::user("Please open the conversation with the student."),
        ];
        let mut student = vec![ChatMessage::system(self.prompts.student_persona(&text))];

        for _ in 0..n_turns {
            let question = match self.gateway.chat(&advisor, &self.config) {
                Ok(q) if q.trim().is_empty() => return Err(fail(empty_reply("dialogue"), transcript)),
                Ok(q) => q,
                Err(e) => return Err(fail(e.into(), transcript)),
            };
            student.push(ChatMessage::user(question.clone()));
            let answer = match self.gateway.chat(&student, &self.config) {
                Ok(a) if a.trim().is_empty() => return Err(fail(empty_reply("student"), transcript)),
                Ok(a) => a,
                Err(e) => return Err(fail(e.into(), transcript)),
            };
            student.push(ChatMessage::assistant(answer.clone()));
            advisor.push(ChatMessage::assistant(question.clone()));
            advisor.push(ChatMessage::user(answer.clone()));
            transcript.push(Speaker::Dialogue, question);
            transcript.push(Speaker::Student, answer);
        }
        Ok(transcript)
    }

    pub fn score_behavior(
        &self,
        profile: &StudentProfile,
        transcript: &Transcript,
        instruction: &ScoringInstruction,
    ) -> Result<ScoreRecord, ScoringError> {
        if instruction.kind != ScoreKind::Behavior {
            return Err(ScoringError::Precondition(
                "behavior scoring needs a behavior instruction".into(),
            ));
        }
        if transcript.purpose != TranscriptPurpose::Behavior {
            return Err(ScoringError::Precondition(format!(
                "transcript purpose is {:?}, expected Behavior",
                transcript.purpose
            )));
        }
        if transcript.turns.is_empty() {
            return Err(ScoringError::Precondition("transcript is empty".into()));
        }
        let text = self.profile_text(profile)?;
        let messages = vec![
            ChatMessage::system(instruction.prompt.clone()),
            ChatMessage::user(format!(
                "{PROFILE_ID_MARKER} {}\n{}\n\nConversation:\n{}",
                profile.id,
                profile_block(&text),
                transcript.render()
            )),
        ];
        let (score, explanation) = self.ask("behavior_scorer", messages, parse_scorer_output)?;
        Ok(self.record(profile, ScoreKind::Behavior, score, explanation))
    }

    /// Questions, defenses and the profile score for one repetition.
    pub fn profile_round(&self, profile: &StudentProfile) -> RoundOutcome {
        let mut transcript = Transcript::new(&profile.id, TranscriptPurpose::Probe);
        transcript.repetition = self.repetition;
        let result = (|| {
            let questions = self.generate_questions(profile)?;
            let responses = self.collect_defenses(profile, &questions)?;
            for (q, a) in questions.questions.iter().zip(&responses.answers) {
                transcript.push(Speaker::Questioner, q.question.clone());
                transcript.push(Speaker::Student, a.clone());
            }
            self.score_profile(
                profile,
                &questions,
                &responses,
                &self.prompts.instruction(ScoreKind::Profile),
            )
        })();
        if result.is_err() {
            transcript.complete = false;
        }
        RoundOutcome {
            transcript,
            record: result,
        }
    }

    /// Behavior dialogue and score for one repetition.
    pub fn behavior_round(&self, profile: &StudentProfile, n_turns: usize) -> RoundOutcome {
        match self.run_behavior_dialogue(profile, n_turns) {
            Ok(transcript) => {
                let record = self.score_behavior(
                    profile,
                    &transcript,
                    &self.prompts.instruction(ScoreKind::Behavior),
                );
                RoundOutcome { transcript, record }
            }
            Err(f) => RoundOutcome {
                transcript: f.partial,
                record: Err(f.error),
            },
        }
    }
}

#[derive(Debug)]
pub struct RoundOutcome {
    pub transcript: Transcript,
    pub record: Result<ScoreRecord, ScoringError>,
}

/// Arithmetic mean of initial judgments per `(profile, kind)`.
pub fn aggregate_initial(records: &[ScoreRecord]) -> BTreeMap<(String, ScoreKind), f64> {
    let mut sums: BTreeMap<(String, ScoreKind), (f64, usize)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.phase == ScorePhase::Initial) {
        let e = sums.entry((r.profile_id.clone(), r.kind)).or_default();
        e.0 += r.value;
        e.1 += 1;
    }
    sums.into_iter()
        .map(|(k, (s, n))| (k, s / n as f64))
        .collect()
}
