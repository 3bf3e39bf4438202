//! Deterministic offline backend.
//!
//! Chat replies are chosen by the agent role tag carried in the first system
//! message (`[agent:<tag>]`) and depend only on the request contents, so a
//! full pipeline run on the stub is bit-reproducible. Embeddings are signed
//! feature hashes of the text's lines and tokens: identical text gives an
//! identical vector and texts that share lines land close together.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{approx_tokens, Backend, ChatMessage, Completion, EmbeddingVector, GatewayError, GenConfig, Role};
use crate::hashing::{hash64, splitmix64};

/// Marker the scorer prompts use to name the profile under review.
pub const PROFILE_ID_MARKER: &str = "Profile ID:";
pub const PROFILE_OPEN: &str = "<profile>";
pub const PROFILE_CLOSE: &str = "</profile>";

/// Role tag from the first system message, e.g. `questioner` for `[agent:questioner]`.
pub fn role_tag(messages: &[ChatMessage]) -> Option<&str> {
    let first = messages.iter().find(|m| m.role == Role::System)?;
    let rest = first.content.trim_start().strip_prefix("[agent:")?;
    let end = rest.find(']')?;
    Some(&rest[..end])
}

pub struct StubRequest<'a> {
    pub role_tag: Option<&'a str>,
    pub messages: &'a [ChatMessage],
    pub config: &'a GenConfig,
    /// Hash of the whole request; the only entropy a responder should use.
    pub request_hash: u64,
}

impl StubRequest<'_> {
    pub fn last_user(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }

    /// Profile lines enclosed in `<profile>...</profile>` anywhere in the request.
    pub fn profile_lines(&self) -> Vec<&str> {
        for m in self.messages {
            if let Some(start) = m.content.find(PROFILE_OPEN) {
                let body = &m.content[start + PROFILE_OPEN.len()..];
                let body = body.split(PROFILE_CLOSE).next().unwrap_or(body);
                return body
                    .lines()
                    .map(str::trim)
                    .filter(|l| !l.is_empty() && !l.starts_with('#'))
                    .collect();
            }
        }
        Vec::new()
    }

    pub fn profile_id(&self) -> Option<&str> {
        self.messages.iter().find_map(|m| {
            let at = m.content.find(PROFILE_ID_MARKER)?;
            m.content[at + PROFILE_ID_MARKER.len()..]
                .split_whitespace()
                .next()
        })
    }

    /// Whether the conversation already contains a re-ask after a bad reply.
    pub fn is_reask(&self) -> bool {
        self.messages.iter().any(|m| m.role == Role::Assistant)
            && self.last_user().contains("could not be parsed")
    }

    pub fn pick<'b>(&self, salt: u64, options: &[&'b str]) -> &'b str {
        let mut s = self.request_hash ^ salt;
        options[(splitmix64(&mut s) % options.len() as u64) as usize]
    }
}

pub type StubResponder = Arc<dyn Fn(&StubRequest<'_>) -> String + Send + Sync>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedScores {
    pub profile: Option<u8>,
    pub behavior: Option<u8>,
}

/// Fixed scorer outputs per profile id; profiles not listed get hash-derived scores.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScorePlan {
    pub scores: BTreeMap<String, PlannedScores>,
}

impl ScorePlan {
    pub fn set(&mut self, profile_id: &str, profile: u8, behavior: u8) {
        self.scores.insert(
            profile_id.to_string(),
            PlannedScores {
                profile: Some(profile),
                behavior: Some(behavior),
            },
        );
    }

    pub fn load(path: &std::path::Path) -> Result<Self, String> {
        let raw = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&raw).map_err(|e| format!("{}: {e}", path.display()))
    }
}

#[derive(Clone)]
pub struct StubBackend {
    dimension: usize,
    line_weight: f64,
    token_weight: f64,
    canned: BTreeMap<String, String>,
    responders: BTreeMap<String, StubResponder>,
    plan: ScorePlan,
}

impl Default for StubBackend {
    fn default() -> Self {
        StubBackend::new()
    }
}

pub const DEFAULT_STUB_DIMENSION: usize = 256;

impl StubBackend {
    pub fn new() -> Self {
        StubBackend {
            dimension: DEFAULT_STUB_DIMENSION,
            line_weight: 1.0,
            token_weight: 0.23,
            canned: BTreeMap::new(),
            responders: BTreeMap::new(),
            plan: ScorePlan::default(),
        }
    }

    pub fn with_dimension(mut self, dimension: usize) -> Self {
        self.dimension = dimension.max(1);
        self
    }

    /// Relative weights of whole-line and token/bigram features in embeddings.
    pub fn with_feature_weights(mut self, line: f64, token: f64) -> Self {
        self.line_weight = line;
        self.token_weight = token;
        self
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// Reply `response` whenever the last user message is exactly `prompt`.
    pub fn with_canned(mut self, prompt: &str, response: &str) -> Self {
        self.canned.insert(prompt.to_string(), response.to_string());
        self
    }

    /// Override the reply for one agent role tag.
    pub fn with_responder(mut self, tag: &str, responder: StubResponder) -> Self {
        self.responders.insert(tag.to_string(), responder);
        self
    }

    pub fn with_score_plan(mut self, plan: ScorePlan) -> Self {
        self.plan = plan;
        self
    }

    fn request_hash(messages: &[ChatMessage], config: &GenConfig) -> u64 {
        let encoded = serde_json::to_vec(&(messages, config)).expect("request serializes");
        hash64(&encoded)
    }

    fn reply(&self, req: &StubRequest<'_>) -> String {
        if let Some(r) = self.canned.get(req.last_user()) {
            return r.clone();
        }
        if let Some(tag) = req.role_tag {
            if let Some(r) = self.responders.get(tag) {
                return r(req);
            }
        }
        match req.role_tag {
            Some("questioner") => questioner_reply(req),
            Some("student") => student_reply(req),
            Some("dialogue") => dialogue_reply(req),
            Some("profile_scorer") => self.scorer_reply(req, true),
            Some("behavior_scorer") => self.scorer_reply(req, false),
            _ => format!("stub reply {:016x}", req.request_hash),
        }
    }

    fn scorer_reply(&self, req: &StubRequest<'_>, profile_round: bool) -> String {
        let planned = req.profile_id().and_then(|id| self.plan.scores.get(id)).and_then(|p| {
            if profile_round {
                p.profile
            } else {
                p.behavior
            }
        });
        let score = planned.unwrap_or_else(|| {
            // Skewed toward high marks, like an uncalibrated LLM judge.
            const TABLE: [u8; 12] = [2, 3, 4, 5, 6, 7, 7, 8, 8, 9, 9, 10];
            let mut s = req.request_hash;
            TABLE[(splitmix64(&mut s) % TABLE.len() as u64) as usize]
        });
        let what = if profile_round { "profile" } else { "dialogue behaviour" };
        let explanation = match score {
            1..=4 => format!("The {what} contains contradictions that the answers do not resolve."),
            5..=7 => format!("The {what} is mostly coherent with a few unresolved tensions."),
            _ => format!("The {what} is coherent and consistent with the declared traits."),
        };
        let body = serde_json::json!({ "score": score, "explanation": explanation });
        format!("Here is my assessment.\n```json\n{body}\n```")
    }

    fn features(&self, text: &str) -> Vec<(u64, f64)> {
        let mut out = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            out.push((hash64(format!("L:{line}").as_bytes()), self.line_weight));
        }
        let tokens: Vec<String> = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
            .collect();
        for t in &tokens {
            out.push((hash64(format!("T:{t}").as_bytes()), self.token_weight));
        }
        for w in tokens.windows(2) {
            out.push((
                hash64(format!("B:{} {}", w[0], w[1]).as_bytes()),
                self.token_weight,
            ));
        }
        out
    }
}

impl Backend for StubBackend {
    fn name(&self) -> &str {
        "stub"
    }

    fn chat(&self, messages: &[ChatMessage], config: &GenConfig) -> Result<Completion, GatewayError> {
        let req = StubRequest {
            role_tag: role_tag(messages),
            messages,
            config,
            request_hash: Self::request_hash(messages, config),
        };
        let text = self.reply(&req);
        let tokens = messages.iter().map(|m| approx_tokens(&m.content)).sum::<u64>()
            + approx_tokens(&text);
        Ok(Completion { text, tokens })
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, GatewayError> {
        let mut values = vec![0.0; self.dimension];
        for (h, w) in self.features(text) {
            let mut s = h;
            let bucket = (splitmix64(&mut s) % self.dimension as u64) as usize;
            let sign = if splitmix64(&mut s) & 1 == 0 { 1.0 } else { -1.0 };
            values[bucket] += sign * w;
        }
        // Whole-text component: distinct texts always get distinct vectors.
        let mut s = hash64(text.as_bytes());
        for v in &mut values {
            let u = (splitmix64(&mut s) >> 11) as f64 / (1u64 << 53) as f64;
            *v += 1e-3 * (2.0 * u - 1.0);
        }
        Ok(EmbeddingVector { values })
    }
}

fn questioner_reply(req: &StubRequest<'_>) -> String {
    let lines = req.profile_lines();
    let mut questions = Vec::new();
    if lines.is_empty() {
        questions.push(serde_json::json!({
            "question": "Can you describe your background and how you study?",
            "fields": ["motivation"],
        }));
    } else {
        let mut s = req.request_hash;
        for _ in 0..3 {
            let a = lines[(splitmix64(&mut s) % lines.len() as u64) as usize];
            let b = lines[(splitmix64(&mut s) % lines.len() as u64) as usize];
            let mut fields = vec![field_for_line(a)];
            if field_for_line(b) != fields[0] {
                fields.push(field_for_line(b));
            }
            questions.push(serde_json::json!({
                "question": format!(
                    "Your profile states \"{a}\" and also \"{b}\". How do these fit together?"
                ),
                "fields": fields,
            }));
        }
    }
    serde_json::json!({ "questions": questions }).to_string()
}

/// Profile field a rendered line belongs to.
fn field_for_line(line: &str) -> &'static str {
    const PREFIXES: [(&str, &str); 5] = [
        ("Gender:", "gender"),
        ("Age:", "age"),
        ("Major:", "major"),
        ("Academic standing:", "standing"),
        ("MBTI:", "mbti"),
    ];
    if let Some((_, f)) = PREFIXES.iter().find(|(p, _)| line.starts_with(p)) {
        return f;
    }
    if line.starts_with('[') {
        "learning_traits"
    } else if line.ends_with(": Yes") || line.ends_with(": No") {
        "challenges"
    } else if line.contains("): high") || line.contains("): low") {
        "big_five"
    } else {
        "motivation"
    }
}

fn student_reply(req: &StubRequest<'_>) -> String {
    let lines = req.profile_lines();
    let fact = if lines.is_empty() {
        "I am still figuring out how I learn best"
    } else {
        let mut s = req.request_hash;
        lines[(splitmix64(&mut s) % lines.len() as u64) as usize]
    };
    let opener = req.pick(
        1,
        &[
            "Honestly,",
            "I guess",
            "To be fair,",
            "Well,",
            "If I think about it,",
        ],
    );
    let closer = req.pick(
        2,
        &[
            "That is just how things are for me right now.",
            "I am not sure it all adds up, but that is my experience.",
            "It affects how I handle my coursework.",
            "I would like some advice on it.",
        ],
    );
    format!("{opener} it comes back to this: {fact}. {closer}")
}

fn dialogue_reply(req: &StubRequest<'_>) -> String {
    let turn = req
        .messages
        .iter()
        .filter(|m| m.role == Role::Assistant)
        .count();
    const TOPICS: [&str; 8] = [
        "How has this semester been going for you so far?",
        "What does a typical study day look like for you?",
        "How do you usually prepare for exams?",
        "When you get stuck on a problem, what do you do?",
        "How do you feel about working with classmates?",
        "What keeps you going when a course gets hard?",
        "How do you handle deadlines that pile up?",
        "What would you change about how you learn?",
    ];
    let topic = TOPICS[(turn + (req.request_hash % 3) as usize) % TOPICS.len()];
    format!("Thanks for sharing. {topic}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::Gateway;

    fn chat(gw: &Gateway, messages: &[ChatMessage]) -> String {
        gw.chat(messages, &GenConfig::default()).unwrap()
    }

    #[test]
    fn canned_rule() {
        let gw = Gateway::stub(StubBackend::new().with_canned("ping", "pong"));
        assert_eq!(chat(&gw, &[ChatMessage::user("ping")]), "pong");
    }

    #[test]
    fn chat_is_pure() {
        let gw = Gateway::stub(StubBackend::new());
        let m = [
            ChatMessage::system("[agent:student]\n<profile>\nAge: 20\nMajor: Physics\n</profile>"),
            ChatMessage::user("How are you?"),
        ];
        assert_eq!(chat(&gw, &m), chat(&gw, &m));
        let other = GenConfig::default().with_param("seed", 1);
        assert_ne!(gw.chat(&m, &other).unwrap(), "");
    }

    #[test]
    fn role_tag_parsing() {
        assert_eq!(
            role_tag(&[ChatMessage::system("[agent:dialogue] be nice"), ChatMessage::user("x")]),
            Some("dialogue")
        );
        assert_eq!(role_tag(&[ChatMessage::user("x")]), None);
    }

    #[test]
    fn embedding_shape_and_determinism() {
        let gw = Gateway::stub(StubBackend::new().with_dimension(64));
        let a = gw.embed("some profile text").unwrap();
        assert_eq!(a.values.len(), 64);
        assert!(a.values.iter().all(|x| x.is_finite()));
        assert_eq!(a, gw.embed("some profile text").unwrap());
    }

    #[test]
    fn distinct_texts_give_distinct_embeddings() {
        // 1,000 random text pairs drawn from a fixed-seed generator.
        let gw = Gateway::stub(StubBackend::new());
        let mut s = 12345u64;
        let words = ["alpha", "beta", "gamma", "delta", "eps", "zeta", "eta", "theta"];
        let text = |s: &mut u64| -> String {
            let n = 1 + (splitmix64(s) % 6) as usize;
            (0..n)
                .map(|_| words[(splitmix64(s) % words.len() as u64) as usize])
                .collect::<Vec<_>>()
                .join(" ")
        };
        let mut checked = 0;
        while checked < 1000 {
            let (a, b) = (text(&mut s), text(&mut s));
            if a == b {
                continue;
            }
            assert_ne!(gw.embed(&a).unwrap(), gw.embed(&b).unwrap(), "{a} / {b}");
            checked += 1;
        }
    }

    #[test]
    fn scorer_follows_plan() {
        let mut plan = ScorePlan::default();
        plan.set("p-1", 3, 9);
        let gw = Gateway::stub(StubBackend::new().with_score_plan(plan));
        let msg = |tag: &str| {
            [
                ChatMessage::system(format!("[agent:{tag}] score it")),
                ChatMessage::user(format!("{PROFILE_ID_MARKER} p-1\n...")),
            ]
        };
        assert!(chat(&gw, &msg("profile_scorer")).contains("\"score\":3"));
        assert!(chat(&gw, &msg("behavior_scorer")).contains("\"score\":9"));
    }
}
