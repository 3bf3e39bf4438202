//! Expert interactive test: live chat sessions with candidate agents,
//! conformity ratings, and exports consumable as metric gold.
//!
//! State changes are appended to a JSONL event log before they become
//! visible; reopening the log replays it. Turns within one session are
//! serialized by that session's lock; sessions proceed independently.

mod http;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::gateway::{ChatMessage, Gateway, GatewayError, GenConfig};
use crate::metrics::{GoldStandard, GradeScheme, MetricsError};
use crate::profile::{render_profile, AttributeCatalog, RenderingVersion, StudentProfile};
use crate::scoring::{PromptSet, Speaker, Transcript, TranscriptPurpose};

pub use http::{router, ApiError, ArtifactDir, ServiceState};

pub const DEFAULT_MIN_TURNS: usize = 15;
pub const RATING_MIN: i64 = 1;
pub const RATING_MAX: i64 = 100;
pub const AGREEMENT_MIN: u8 = 1;
pub const AGREEMENT_MAX: u8 = 5;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("not allowed: {0}")]
    Policy(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("agent backend failed, turn not recorded: {0}")]
    Backend(#[from] GatewayError),
    #[error("event log: {0}")]
    Log(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Open,
    Rated,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub candidate_id: String,
    pub expert_id: String,
    pub status: SessionStatus,
    pub transcript: Transcript,
    pub started_at: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ended_at: Option<String>,
}

impl Session {
    /// Completed expert/agent exchanges.
    pub fn turn_count(&self) -> usize {
        self.transcript.exchange_count()
    }
}

/// Expert agreement with one automated judgment, 1 (strongly disagree) to 5.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Agreement {
    pub item: String,
    pub level: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub session_id: String,
    pub candidate_id: String,
    pub annotator_id: String,
    /// Conformity on the 1-100 scale.
    pub score: i64,
    /// `score / 10`, comparable with automated 1-10 scores.
    pub normalized: f64,
    pub justification: String,
    pub agreements: Vec<Agreement>,
    pub turns: usize,
    pub submitted_at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingRequest {
    pub score: i64,
    pub justification: String,
    #[serde(default)]
    pub agreements: Vec<Agreement>,
}

/// Everything recorded so far, with per-agent expert means on the 1-10 scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationDump {
    pub sessions: Vec<Session>,
    pub ratings: Vec<RatingRecord>,
    pub expert_means: BTreeMap<String, f64>,
}

impl AnnotationDump {
    pub fn expert_means_of(ratings: &[RatingRecord]) -> BTreeMap<String, f64> {
        let mut acc: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for r in ratings {
            acc.entry(&r.candidate_id).or_default().push(r.normalized);
        }
        acc.into_iter()
            .map(|(id, mut v)| {
                // Summing in sorted order keeps the mean independent of rating order.
                v.sort_by(f64::total_cmp);
                (id.to_string(), v.iter().sum::<f64>() / v.len() as f64)
            })
            .collect()
    }

    pub fn to_gold(&self, relevance_threshold: f64, scheme: &GradeScheme) -> Result<GoldStandard, MetricsError> {
        if self.expert_means.is_empty() {
            return Err(MetricsError::Input("annotation export holds no ratings".into()));
        }
        GoldStandard::from_means(self.expert_means.clone(), relevance_threshold, scheme)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.sessions {
            out.push_str(&serde_json::json!({"type": "session", "session": s}).to_string());
            out.push('\n');
        }
        for r in &self.ratings {
            out.push_str(&serde_json::json!({"type": "rating", "rating": r}).to_string());
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    SessionCreated {
        session: Session,
    },
    TurnAppended {
        session_id: String,
        expert: String,
        reply: String,
    },
    RatingSubmitted {
        rating: RatingRecord,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub min_turns: usize,
    /// Divisor from the 1-100 rating scale to the 1-10 scale.
    pub normalization_divisor: f64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            min_turns: DEFAULT_MIN_TURNS,
            normalization_divisor: 10.0,
        }
    }
}

struct Candidate {
    profile: StudentProfile,
    persona: String,
}

/// Session store backed by an append-only event log.
pub struct AnnotationStore {
    config: ServiceConfig,
    gateway: Gateway,
    gen: GenConfig,
    clock: Clock,
    /// Every known profile; only those in `candidates` may be interviewed.
    profiles: BTreeMap<String, Candidate>,
    candidates: BTreeSet<String>,
    sessions: RwLock<BTreeMap<String, Arc<Mutex<Session>>>>,
    ratings: Mutex<Vec<RatingRecord>>,
    log: Option<Mutex<File>>,
    log_path: Option<PathBuf>,
}

impl std::fmt::Debug for AnnotationStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AnnotationStore")
            .field("candidates", &self.candidates.len())
            .field("log", &self.log_path)
            .finish_non_exhaustive()
    }
}

pub struct StoreOptions<'a> {
    pub profiles: &'a [StudentProfile],
    pub candidates: &'a [String],
    pub catalog: &'a AttributeCatalog,
    pub prompts: &'a PromptSet,
    pub gateway: Gateway,
    pub gen: GenConfig,
    pub clock: Clock,
    pub config: ServiceConfig,
}

fn lock_err<T>(_: T) -> ServiceError {
    ServiceError::Log("lock poisoned".into())
}

impl AnnotationStore {
    /// In-memory store; nothing is persisted.
    pub fn new(opts: StoreOptions<'_>) -> Result<Self, ServiceError> {
        let mut profiles = BTreeMap::new();
        for p in opts.profiles {
            let text = render_profile(p, opts.catalog, RenderingVersion::V1)
                .map_err(|e| ServiceError::Input(format!("profile {}: {e}", p.id)))?
                .text;
            profiles.insert(
                p.id.clone(),
                Candidate {
                    profile: p.clone(),
                    persona: opts.prompts.student_persona(&text),
                },
            );
        }
        if let Some(c) = opts.candidates.iter().find(|c| !profiles.contains_key(*c)) {
            return Err(ServiceError::Input(format!("candidate {c} has no profile")));
        }
        if opts.config.min_turns == 0 || opts.config.normalization_divisor.is_nan() || opts.config.normalization_divisor <= 0.0 {
            return Err(ServiceError::Input("min_turns and normalization divisor must be positive".into()));
        }
        Ok(AnnotationStore {
            config: opts.config,
            gateway: opts.gateway,
            gen: opts.gen,
            clock: opts.clock,
            profiles,
            candidates: opts.candidates.iter().cloned().collect(),
            sessions: RwLock::new(BTreeMap::new()),
            ratings: Mutex::new(Vec::new()),
            log: None,
            log_path: None,
        })
    }

    /// Store persisted to `log_path`; existing events are replayed first.
    pub fn open(opts: StoreOptions<'_>, log_path: &Path) -> Result<Self, ServiceError> {
        let mut store = Self::new(opts)?;
        if log_path.exists() {
            let f = File::open(log_path).map_err(|e| ServiceError::Log(format!("{}: {e}", log_path.display())))?;
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| ServiceError::Log(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                let ev: Event = serde_json::from_str(&line).map_err(|e| {
                    ServiceError::Log(format!("{} line {}: {e}", log_path.display(), i + 1))
                })?;
                store.apply(ev)?;
            }
        }
        if let Some(dir) = log_path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| ServiceError::Log(e.to_string()))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(log_path)
            .map_err(|e| ServiceError::Log(format!("{}: {e}", log_path.display())))?;
        store.log = Some(Mutex::new(file));
        store.log_path = Some(log_path.to_path_buf());
        Ok(store)
    }

    fn apply(&mut self, ev: Event) -> Result<(), ServiceError> {
        let sessions = self.sessions.get_mut().map_err(lock_err)?;
        match ev {
            Event::SessionCreated { session } => {
                sessions.insert(session.id.clone(), Arc::new(Mutex::new(session)));
            }
            Event::TurnAppended {
                session_id,
                expert,
                reply,
            } => {
                let s = sessions
                    .get(&session_id)
                    .ok_or_else(|| ServiceError::Log(format!("turn for unknown session {session_id}")))?;
                let mut s = s.lock().map_err(lock_err)?;
                s.transcript.push(Speaker::Expert, expert);
                s.transcript.push(Speaker::Student, reply);
            }
            Event::RatingSubmitted { rating } => {
                let s = sessions
                    .get(&rating.session_id)
                    .ok_or_else(|| ServiceError::Log(format!("rating for unknown session {}", rating.session_id)))?;
                let mut s = s.lock().map_err(lock_err)?;
                s.status = SessionStatus::Rated;
                s.ended_at = Some(rating.submitted_at.clone());
                self.ratings.get_mut().map_err(lock_err)?.push(rating);
            }
        }
        Ok(())
    }

    /// Write one event as a single line; the caller applies it only on success.
    fn commit(&self, ev: &Event) -> Result<(), ServiceError> {
        if let Some(log) = &self.log {
            let mut line = serde_json::to_string(ev).map_err(|e| ServiceError::Log(e.to_string()))?;
            line.push('\n');
            let mut f = log.lock().map_err(lock_err)?;
            f.write_all(line.as_bytes())
                .and_then(|_| f.sync_data())
                .map_err(|e| ServiceError::Log(e.to_string()))?;
        }
        Ok(())
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn candidate_ids(&self) -> Vec<String> {
        self.candidates.iter().cloned().collect()
    }

    pub fn profile(&self, id: &str) -> Option<&StudentProfile> {
        self.profiles.get(id).map(|c| &c.profile)
    }

    pub fn create_session(&self, candidate_id: &str, expert_id: &str) -> Result<Session, ServiceError> {
        if expert_id.trim().is_empty() {
            return Err(ServiceError::Input("expert id is empty".into()));
        }
        if !self.profiles.contains_key(candidate_id) {
            return Err(ServiceError::NotFound(format!("agent {candidate_id}")));
        }
        if !self.candidates.contains(candidate_id) {
            return Err(ServiceError::Policy(format!("agent {candidate_id} is not in the candidate set")));
        }
        let mut sessions = self.sessions.write().map_err(lock_err)?;
        let mut transcript = Transcript::new(candidate_id, TranscriptPurpose::ExpertSession);
        transcript.complete = true;
        let session = Session {
            id: format!("s-{:05}", sessions.len() + 1),
            candidate_id: candidate_id.to_string(),
            expert_id: expert_id.to_string(),
            status: SessionStatus::Open,
            transcript,
            started_at: self.clock.now(),
            ended_at: None,
        };
        self.commit(&Event::SessionCreated {
            session: session.clone(),
        })?;
        sessions.insert(session.id.clone(), Arc::new(Mutex::new(session.clone())));
        Ok(session)
    }

    fn session_handle(&self, id: &str) -> Result<Arc<Mutex<Session>>, ServiceError> {
        self.sessions
            .read()
            .map_err(lock_err)?
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("session {id}")))
    }

    pub fn session(&self, id: &str) -> Result<Session, ServiceError> {
        let h = self.session_handle(id)?;
        let s = h.lock().map_err(lock_err)?.clone();
        Ok(s)
    }

    pub fn sessions(&self) -> Result<Vec<Session>, ServiceError> {
        let handles: Vec<_> = self.sessions.read().map_err(lock_err)?.values().cloned().collect();
        handles
            .iter()
            .map(|h| h.lock().map(|s| s.clone()).map_err(lock_err))
            .collect()
    }

    /// Send one expert message and record it together with the agent reply.
    pub fn post_turn(&self, session_id: &str, message: &str) -> Result<(String, Session), ServiceError> {
        if message.trim().is_empty() {
            return Err(ServiceError::Input("message is empty".into()));
        }
        let handle = self.session_handle(session_id)?;
        let mut session = handle.lock().map_err(lock_err)?;
        if session.status != SessionStatus::Open {
            return Err(ServiceError::State(format!(
                "session {session_id} is {:?}",
                session.status
            )));
        }
        let persona = &self.profiles[&session.candidate_id].persona;
        let mut messages = vec![ChatMessage::system(persona.clone())];
        for t in &session.transcript.turns {
            messages.push(match t.speaker {
                Speaker::Student => ChatMessage::assistant(t.text.clone()),
                _ => ChatMessage::user(t.text.clone()),
            });
        }
        messages.push(ChatMessage::user(message));
        let reply = self.gateway.chat(&messages, &self.gen)?;
        if reply.trim().is_empty() {
            return Err(ServiceError::Backend(GatewayError::Backend {
                status: None,
                message: "empty agent reply".into(),
            }));
        }
        self.commit(&Event::TurnAppended {
            session_id: session_id.to_string(),
            expert: message.to_string(),
            reply: reply.clone(),
        })?;
        session.transcript.push(Speaker::Expert, message);
        session.transcript.push(Speaker::Student, reply.clone());
        Ok((reply, session.clone()))
    }

    pub fn submit_rating(&self, session_id: &str, req: RatingRequest) -> Result<RatingRecord, ServiceError> {
        if !(RATING_MIN..=RATING_MAX).contains(&req.score) {
            return Err(ServiceError::Input(format!(
                "score {} outside [{RATING_MIN}, {RATING_MAX}]",
                req.score
            )));
        }
        if req.justification.trim().is_empty() {
            return Err(ServiceError::Input("justification is empty".into()));
        }
        if let Some(a) = req
            .agreements
            .iter()
            .find(|a| !(AGREEMENT_MIN..=AGREEMENT_MAX).contains(&a.level) || a.item.trim().is_empty())
        {
            return Err(ServiceError::Input(format!(
                "agreement '{}' must name an item and use a level in [{AGREEMENT_MIN}, {AGREEMENT_MAX}]",
                a.item
            )));
        }
        let handle = self.session_handle(session_id)?;
        let mut session = handle.lock().map_err(lock_err)?;
        if session.status != SessionStatus::Open {
            return Err(ServiceError::State(format!(
                "session {session_id} is {:?}",
                session.status
            )));
        }
        let turns = session.turn_count();
        if turns < self.config.min_turns {
            return Err(ServiceError::Policy(format!(
                "{turns} turns recorded, at least {} required before rating",
                self.config.min_turns
            )));
        }
        let now = self.clock.now();
        let rating = RatingRecord {
            session_id: session_id.to_string(),
            candidate_id: session.candidate_id.clone(),
            annotator_id: session.expert_id.clone(),
            score: req.score,
            normalized: req.score as f64 / self.config.normalization_divisor,
            justification: req.justification,
            agreements: req.agreements,
            turns,
            submitted_at: now.clone(),
        };
        self.commit(&Event::RatingSubmitted { rating: rating.clone() })?;
        session.status = SessionStatus::Rated;
        session.ended_at = Some(now);
        self.ratings.lock().map_err(lock_err)?.push(rating.clone());
        Ok(rating)
    }

    pub fn export(&self) -> Result<AnnotationDump, ServiceError> {
        let ratings = self.ratings.lock().map_err(lock_err)?.clone();
        Ok(AnnotationDump {
            sessions: self.sessions()?,
            expert_means: AnnotationDump::expert_means_of(&ratings),
            ratings,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::StubBackend;
    use crate::profile::sample_profile;

    fn fixture(n: u64) -> (Vec<StudentProfile>, AttributeCatalog, PromptSet) {
        let cat = AttributeCatalog::default();
        let ps: Vec<_> = (0..n).map(|s| sample_profile(s, &cat).unwrap()).collect();
        (ps, cat, PromptSet::default())
    }

    fn store(ps: &[StudentProfile], cands: &[String], cat: &AttributeCatalog, prompts: &PromptSet) -> AnnotationStore {
        AnnotationStore::new(StoreOptions {
            profiles: ps,
            candidates: cands,
            catalog: cat,
            prompts,
            gateway: Gateway::stub(StubBackend::new()),
            gen: GenConfig::default(),
            clock: Clock::fixed_epoch(),
            config: ServiceConfig::default(),
        })
        .unwrap()
    }

    fn rating(score: i64) -> RatingRequest {
        RatingRequest {
            score,
            justification: "persona held up".into(),
            agreements: vec![Agreement {
                item: "behavior_score".into(),
                level: 4,
            }],
        }
    }

    #[test]
    fn session_lifecycle() {
        let (ps, cat, prompts) = fixture(4);
        let cands = vec![ps[0].id.clone(), ps[1].id.clone()];
        let st = store(&ps, &cands, &cat, &prompts);

        let s = st.create_session(&ps[0].id, "e1").unwrap();
        assert_eq!(s.status, SessionStatus::Open);
        assert_eq!(s.turn_count(), 0);
        assert!(matches!(st.create_session(&ps[2].id, "e1"), Err(ServiceError::Policy(_))));
        assert!(matches!(st.create_session("p-nope", "e1"), Err(ServiceError::NotFound(_))));
        let other = st.create_session(&ps[0].id, "e2").unwrap();
        assert_ne!(other.id, s.id);

        let (reply, after) = st.post_turn(&s.id, "Hi, how are your classes going?").unwrap();
        assert!(!reply.is_empty());
        assert_eq!(after.turn_count(), 1);
        assert_eq!(st.session(&other.id).unwrap().turn_count(), 0);

        assert!(matches!(st.submit_rating(&s.id, rating(87)), Err(ServiceError::Policy(_))));
        for i in 1..15 {
            st.post_turn(&s.id, &format!("Question {i}?")).unwrap();
        }
        assert!(matches!(st.submit_rating(&s.id, rating(101)), Err(ServiceError::Input(_))));
        assert!(matches!(st.submit_rating(&s.id, rating(0)), Err(ServiceError::Input(_))));
        let r = st.submit_rating(&s.id, rating(87)).unwrap();
        assert_eq!(r.normalized, 8.7);
        assert_eq!(r.turns, 15);
        assert!(matches!(st.post_turn(&s.id, "more?"), Err(ServiceError::State(_))));
        assert!(matches!(st.submit_rating(&s.id, rating(50)), Err(ServiceError::State(_))));

        let dump = st.export().unwrap();
        assert_eq!(dump.ratings.len(), 1);
        assert_eq!(dump.expert_means[&ps[0].id], 8.7);
    }

    #[test]
    fn expert_mean_and_gold() {
        let mk = |score: i64| RatingRecord {
            session_id: "s".into(),
            candidate_id: "a".into(),
            annotator_id: "e".into(),
            score,
            normalized: score as f64 / 10.0,
            justification: "j".into(),
            agreements: vec![],
            turns: 15,
            submitted_at: "t".into(),
        };
        let means = AnnotationDump::expert_means_of(&[mk(80), mk(90)]);
        assert_eq!(means["a"], 8.5);
        assert_eq!(means, AnnotationDump::expert_means_of(&[mk(90), mk(80)]));

        let empty = AnnotationDump {
            sessions: vec![],
            ratings: vec![],
            expert_means: BTreeMap::new(),
        };
        assert!(empty.to_gold(8.0, &GradeScheme::default()).is_err());
    }

    #[test]
    fn backend_failure_records_nothing() {
        let (ps, cat, prompts) = fixture(2);
        let cands = vec![ps[0].id.clone()];
        let responder: crate::gateway::StubResponder = Arc::new(|_| String::new());
        let st = AnnotationStore::new(StoreOptions {
            profiles: &ps,
            candidates: &cands,
            catalog: &cat,
            prompts: &prompts,
            gateway: Gateway::stub(StubBackend::new().with_responder("student", responder)),
            gen: GenConfig::default(),
            clock: Clock::fixed_epoch(),
            config: ServiceConfig::default(),
        })
        .unwrap();
        let s = st.create_session(&ps[0].id, "e").unwrap();
        assert!(matches!(st.post_turn(&s.id, "hello"), Err(ServiceError::Backend(_))));
        assert_eq!(st.session(&s.id).unwrap().turn_count(), 0);
    }

    #[test]
    fn log_replay_restores_state() {
        let (ps, cat, prompts) = fixture(3);
        let cands = vec![ps[1].id.clone()];
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("events.jsonl");
        let opts = || StoreOptions {
            profiles: &ps,
            candidates: &cands,
            catalog: &cat,
            prompts: &prompts,
            gateway: Gateway::stub(StubBackend::new()),
            gen: GenConfig::default(),
            clock: Clock::fixed_epoch(),
            config: ServiceConfig {
                min_turns: 2,
                ..Default::default()
            },
        };
        let first = {
            let st = AnnotationStore::open(opts(), &log).unwrap();
            let s = st.create_session(&ps[1].id, "e").unwrap();
            st.post_turn(&s.id, "one").unwrap();
            st.post_turn(&s.id, "two").unwrap();
            st.submit_rating(&s.id, rating(70)).unwrap();
            st.create_session(&ps[1].id, "f").unwrap();
            st.export().unwrap()
        };
        let st = AnnotationStore::open(opts(), &log).unwrap();
        assert_eq!(st.export().unwrap(), first);
        let next = st.create_session(&ps[1].id, "g").unwrap();
        assert_eq!(next.id, "s-00003");
    }

    #[test]
    fn concurrent_sessions_keep_turns_paired() {
        let (ps, cat, prompts) = fixture(3);
        let cands: Vec<String> = ps.iter().map(|p| p.id.clone()).collect();
        let st = Arc::new(store(&ps, &cands, &cat, &prompts));
        let ids: Vec<String> = (0..6)
            .map(|i| st.create_session(&cands[i % 3], &format!("e{i}")).unwrap().id)
            .collect();
        std::thread::scope(|scope| {
            for t in 0..12 {
                let st = Arc::clone(&st);
                let id = ids[t % 6].clone();
                scope.spawn(move || {
                    for k in 0..5 {
                        st.post_turn(&id, &format!("thread {t} message {k}")).unwrap();
                    }
                });
            }
        });
        for id in &ids {
            let s = st.session(id).unwrap();
            assert_eq!(s.turn_count(), 10);
            for pair in s.transcript.turns.chunks(2) {
                assert_eq!(pair[0].speaker, Speaker::Expert);
                assert_eq!(pair[1].speaker, Speaker::Student);
            }
        }
    }
}
