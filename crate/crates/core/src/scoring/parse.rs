//! Extraction of structured replies from free-form model output.

use serde_json::{Map, Value};

use super::records::ProbeQuestion;

pub const SCORE_MIN: i64 = 1;
pub const SCORE_MAX: i64 = 10;

/// Field names a probe question may cite.
pub const PROFILE_FIELDS: [&str; 9] = [
    "gender",
    "age",
    "major",
    "standing",
    "mbti",
    "big_five",
    "learning_traits",
    "challenges",
    "motivation",
];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{0}")]
pub struct ParseError(pub String);

/// Every JSON object embedded in `raw`, in order of appearance. Surrounding
/// prose and code fences are skipped.
pub fn json_objects(raw: &str) -> Vec<Map<String, Value>> {
    let mut out = Vec::new();
    let mut pos = 0;
    while let Some(offset) = raw[pos..].find('{') {
        let start = pos + offset;
        let mut stream = serde_json::Deserializer::from_str(&raw[start..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(Value::Object(map))) => {
                pos = start + stream.byte_offset();
                out.push(map);
            }
            _ => pos = start + 1,
        }
    }
    out
}

/// Pull `(score, explanation)` from scorer output. The first object carrying a
/// `"score"` key decides: its score must be an integer in 1..=10 and its
/// explanation a non-empty string.
pub fn parse_scorer_output(raw: &str) -> Result<(u8, String), ParseError> {
    let obj = json_objects(raw)
        .into_iter()
        .find(|o| o.contains_key("score"))
        .ok_or_else(|| ParseError("no JSON object with a \"score\" field".into()))?;

    let score = match &obj["score"] {
        Value::Number(n) => n
            .as_i64()
            .or_else(|| n.as_f64().filter(|f| f.fract() == 0.0).map(|f| f as i64))
            .ok_or_else(|| ParseError(format!("score {n} is not an integer")))?,
        other => return Err(ParseError(format!("score {other} is not a number"))),
    };
    if !(SCORE_MIN..=SCORE_MAX).contains(&score) {
        return Err(ParseError(format!(
            "score {score} outside [{SCORE_MIN}, {SCORE_MAX}]"
        )));
    }
    let explanation = match obj.get("explanation") {
        Some(Value::String(s)) if !s.trim().is_empty() => s.clone(),
        Some(Value::String(_)) => return Err(ParseError("explanation is empty".into())),
        Some(_) => return Err(ParseError("explanation is not a string".into())),
        None => return Err(ParseError("missing explanation".into())),
    };
    Ok((score as u8, explanation))
}

/// Parse a questioner reply of the form `{"questions": [{"question", "fields"}]}`.
pub fn parse_questions(raw: &str) -> Result<Vec<ProbeQuestion>, ParseError> {
    let obj = json_objects(raw)
        .into_iter()
        .find(|o| o.contains_key("questions"))
        .ok_or_else(|| ParseError("no JSON object with a \"questions\" field".into()))?;
    let items = obj["questions"]
        .as_array()
        .ok_or_else(|| ParseError("\"questions\" is not an array".into()))?;
    if items.is_empty() {
        return Err(ParseError("question list is empty".into()));
    }
    items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let question = item
                .get("question")
                .and_then(Value::as_str)
                .filter(|q| !q.trim().is_empty())
                .ok_or_else(|| ParseError(format!("question {i} has no text")))?;
            let fields: Vec<String> = item
                .get("fields")
                .and_then(Value::as_array)
                .map(|a| a.iter().filter_map(Value::as_str).map(str::to_string).collect())
                .unwrap_or_default();
            if fields.is_empty() {
                return Err(ParseError(format!("question {i} cites no profile field")));
            }
            if let Some(bad) = fields.iter().find(|f| !PROFILE_FIELDS.contains(&f.as_str())) {
                return Err(ParseError(format!("question {i} cites unknown field '{bad}'")));
            }
            Ok(ProbeQuestion {
                question: question.to_string(),
                fields,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extraction_examples() {
        assert_eq!(
            parse_scorer_output(r#"Here you go: {"score": 8, "explanation": "coherent"}"#).unwrap(),
            (8, "coherent".to_string())
        );
        assert!(parse_scorer_output(r#"{"score": 0, "explanation": "x"}"#).is_err());
        assert!(parse_scorer_output("no json here").is_err());
    }

    #[test]
    fn integral_float_is_accepted() {
        assert_eq!(
            parse_scorer_output(r#"{"score": 7.0, "explanation": "ok"}"#).unwrap().0,
            7
        );
        assert!(parse_scorer_output(r#"{"score": 7.5, "explanation": "ok"}"#).is_err());
    }

    #[test]
    fn finds_objects_after_broken_braces() {
        let objs = json_objects(r#"a {broken { "x": 1 } and {"y": [1, {"z": 2}]}"#);
        assert_eq!(objs.len(), 2);
        assert_eq!(objs[0]["x"], 1);
        assert!(objs[1].contains_key("y"));
    }

    #[test]
    fn question_parsing() {
        let raw = r#"{"questions": [{"question": "Why 17 and a master student?", "fields": ["age", "standing"]}]}"#;
        let q = parse_questions(raw).unwrap();
        assert_eq!(q.len(), 1);
        assert_eq!(q[0].fields, vec!["age", "standing"]);

        assert!(parse_questions(r#"{"questions": []}"#).is_err());
        assert!(parse_questions(r#"{"questions": [{"question": "x", "fields": []}]}"#).is_err());
        assert!(parse_questions(r#"{"questions": [{"question": "x", "fields": ["height"]}]}"#).is_err());
        assert!(parse_questions("[not an object]").is_err());
    }
}
