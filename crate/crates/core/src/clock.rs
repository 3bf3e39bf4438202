use serde::{Deserialize, Serialize};

/// Source of record timestamps. `Fixed` keeps artifacts byte-reproducible.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Clock {
    #[default]
    System,
    Fixed(String),
}

pub const EPOCH: &str = "1970-01-01T00:00:00Z";

impl Clock {
    pub fn fixed_epoch() -> Self {
        Clock::Fixed(EPOCH.to_string())
    }

    /// RFC 3339 timestamp, UTC, second precision.
    pub fn now(&self) -> String {
        match self {
            Clock::System => chrono::Utc::now()
                .to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            Clock::Fixed(t) => t.clone(),
        }
    }
}

