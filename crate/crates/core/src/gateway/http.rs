use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{approx_tokens, Backend, ChatMessage, Completion, EmbeddingVector, GatewayError, GenConfig};

/// Environment variable holding the bearer token for the HTTP backend.
pub const API_KEY_ENV: &str = "SIMSTUDENT_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpBackendConfig {
    /// Base URL, e.g. `https://api.openai.com/v1`.
    pub base_url: String,
    #[serde(default = "default_embedding_model")]
    pub embedding_model: String,
    #[serde(default = "default_timeout")]
    pub embedding_timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub embedding_retries: u32,
    /// Pause between attempts; always clipped to the remaining call budget.
    #[serde(default = "default_backoff")]
    pub backoff_secs: f64,
}

fn default_embedding_model() -> String {
    "BAAI/bge-m3".into()
}

fn default_timeout() -> f64 {
    60.0
}

fn default_retries() -> u32 {
    2
}

fn default_backoff() -> f64 {
    0.25
}

impl HttpBackendConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        HttpBackendConfig {
            base_url: base_url.into(),
            embedding_model: default_embedding_model(),
            embedding_timeout_secs: default_timeout(),
            embedding_retries: default_retries(),
            backoff_secs: default_backoff(),
        }
    }
}

pub struct HttpBackend {
    agent: ureq::Agent,
    config: HttpBackendConfig,
    api_key: Option<String>,
}

impl HttpBackend {
    /// The API key is read from [`API_KEY_ENV`] when present.
    pub fn new(config: HttpBackendConfig) -> Self {
        let api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::with_api_key(config, api_key)
    }

    pub fn with_api_key(config: HttpBackendConfig, api_key: Option<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .build()
            .into();
        HttpBackend {
            agent,
            config,
            api_key,
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.config.base_url.trim_end_matches('/'), path)
    }

    /// POST with retries. The whole call, backoff included, finishes within
    /// `timeout * (retries + 1)`.
    fn post_json(
        &self,
        url: &str,
        body: &Value,
        timeout: Duration,
        retries: u32,
    ) -> Result<Value, GatewayError> {
        let deadline = Instant::now() + timeout * (retries + 1);
        let backoff = Duration::from_secs_f64(self.config.backoff_secs.max(0.0));
        let mut attempts = 0;
        let mut last_transport = String::new();
        let mut last_status: Option<(u16, String)> = None;

        while attempts <= retries {
            let remaining = deadline.saturating_duration_since(Instant::now());
            if remaining.is_zero() {
                break;
            }
            attempts += 1;
            let mut req = self
                .agent
                .post(url)
                .config()
                .timeout_global(Some(timeout.min(remaining)))
                .build()
                .header("Content-Type", "application/json");
            if let Some(key) = &self.api_key {
                req = req.header("Authorization", &format!("Bearer {key}"));
            }
            match req.send(body.to_string()) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    let text = resp.body_mut().read_to_string().map_err(|e| {
                        GatewayError::Backend {
                            status: Some(status),
                            message: format!("unreadable response body: {e}"),
                        }
                    })?;
                    if (200..300).contains(&status) {
                        return serde_json::from_str(&text).map_err(|e| GatewayError::Backend {
                            status: Some(status),
                            message: format!("malformed JSON payload: {e}"),
                        });
                    }
                    let retriable = status == 429 || status >= 500;
                    if !retriable {
                        return Err(GatewayError::Backend {
                            status: Some(status),
                            message: truncate(&text),
                        });
                    }
                    last_status = Some((status, truncate(&text)));
                }
                Err(e) => {
                    last_transport = e.to_string();
                    last_status = None;
                }
            }
            if attempts <= retries {
                let pause = backoff.min(deadline.saturating_duration_since(Instant::now()));
                std::thread::sleep(pause);
            }
        }

        match last_status {
            Some((status, message)) => Err(GatewayError::Backend {
                status: Some(status),
                message,
            }),
            None => Err(GatewayError::Transient {
                attempts,
                message: if last_transport.is_empty() {
                    "call budget exhausted".into()
                } else {
                    last_transport
                },
            }),
        }
    }
}

fn truncate(s: &str) -> String {
    const MAX: usize = 500;
    if s.len() <= MAX {
        s.to_string()
    } else {
        let mut end = MAX;
        while !s.is_char_boundary(end) {
            end -= 1;
        }
        format!("{}...", &s[..end])
    }
}

fn malformed(what: &str) -> GatewayError {
    GatewayError::Backend {
        status: None,
        message: format!("malformed payload: missing {what}"),
    }
}

impl Backend for HttpBackend {
    fn name(&self) -> &str {
        "http"
    }

    fn chat(&self, messages: &[ChatMessage], config: &GenConfig) -> Result<Completion, GatewayError> {
        let mut body = json!({
            "model": config.model,
            "messages": messages,
        });
        for (k, v) in &config.params {
            body[k] = v.clone();
        }
        let payload = self.post_json(
            &self.url("chat/completions"),
            &body,
            config.timeout(),
            config.max_retries,
        )?;
        let text = payload["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| malformed("choices[0].message.content"))?
            .to_string();
        let tokens = payload["usage"]["total_tokens"].as_u64().unwrap_or_else(|| {
            messages.iter().map(|m| approx_tokens(&m.content)).sum::<u64>() + approx_tokens(&text)
        });
        Ok(Completion { text, tokens })
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, GatewayError> {
        let body = json!({
            "model": self.config.embedding_model,
            "input": text,
        });
        let payload = self.post_json(
            &self.url("embeddings"),
            &body,
            Duration::from_secs_f64(self.config.embedding_timeout_secs),
            self.config.embedding_retries,
        )?;
        let values = payload["data"][0]["embedding"]
            .as_array()
            .ok_or_else(|| malformed("data[0].embedding"))?
            .iter()
            .map(|v| v.as_f64().ok_or_else(|| malformed("numeric embedding entries")))
            .collect::<Result<Vec<f64>, _>>()?;
        Ok(EmbeddingVector { values })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    /// Minimal one-shot HTTP server replying with the given responses in turn.
    fn serve(responses: Vec<(u16, String)>) -> (String, Arc<AtomicUsize>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        std::thread::spawn(move || {
            for (status, body) in responses {
                let Ok((mut stream, _)) = listener.accept() else { return };
                counter.fetch_add(1, Ordering::SeqCst);
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0u8; len];
                reader.read_exact(&mut buf).unwrap();
                let reply = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
        });
        (format!("http://{addr}"), hits)
    }

    fn backend(url: &str) -> HttpBackend {
        let mut cfg = HttpBackendConfig::new(url);
        cfg.backoff_secs = 0.01;
        cfg.embedding_timeout_secs = 2.0;
        HttpBackend::with_api_key(cfg, Some("k".into()))
    }

    fn gen(retries: u32) -> GenConfig {
        GenConfig {
            timeout_secs: 2.0,
            max_retries: retries,
            ..Default::default()
        }
    }

    #[test]
    fn parses_chat_completion() {
        let (url, _) = serve(vec![(
            200,
            r#"{"choices":[{"message":{"role":"assistant","content":"pong"}}],"usage":{"total_tokens":12}}"#.into(),
        )]);
        let c = backend(&url)
            .chat(&[ChatMessage::user("ping")], &gen(0))
            .unwrap();
        assert_eq!(c.text, "pong");
        assert_eq!(c.tokens, 12);
    }

    #[test]
    fn parses_embedding() {
        let (url, _) = serve(vec![(200, r#"{"data":[{"embedding":[0.5,-1.0,2]}]}"#.into())]);
        let e = backend(&url).embed("x").unwrap();
        assert_eq!(e.values, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn client_error_is_backend_error_without_retry() {
        let (url, hits) = serve(vec![(400, r#"{"error":"bad"}"#.into()), (200, "{}".into())]);
        let err = backend(&url)
            .chat(&[ChatMessage::user("x")], &gen(2))
            .unwrap_err();
        assert!(matches!(err, GatewayError::Backend { status: Some(400), .. }));
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn server_error_is_retried() {
        let ok = r#"{"choices":[{"message":{"content":"fine"}}]}"#;
        let (url, hits) = serve(vec![(503, "busy".into()), (200, ok.into())]);
        let c = backend(&url)
            .chat(&[ChatMessage::user("x")], &gen(2))
            .unwrap();
        assert_eq!(c.text, "fine");
        assert_eq!(hits.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn malformed_payload_is_backend_error() {
        let (url, _) = serve(vec![(200, r#"{"choices":[]}"#.into())]);
        let err = backend(&url)
            .chat(&[ChatMessage::user("x")], &gen(0))
            .unwrap_err();
        assert!(matches!(err, GatewayError::Backend { .. }));

        let (url, _) = serve(vec![(200, "not json".into())]);
        let err = backend(&url)
            .chat(&[ChatMessage::user("x")], &gen(0))
            .unwrap_err();
        assert!(matches!(err, GatewayError::Backend { .. }));
    }

    #[test]
    fn unreachable_endpoint_is_transient_after_all_attempts() {
        // Bind then drop to get a port with nothing listening.
        let port = TcpListener::bind("127.0.0.1:0")
            .unwrap()
            .local_addr()
            .unwrap()
            .port();
        let b = backend(&format!("http://127.0.0.1:{port}"));
        let start = Instant::now();
        let err = b.chat(&[ChatMessage::user("x")], &gen(2)).unwrap_err();
        assert!(
            matches!(err, GatewayError::Transient { attempts: 3, .. }),
            "{err:?}"
        );
        assert!(start.elapsed() <= Duration::from_secs_f64(2.0 * 3.0));
    }

    #[test]
    fn hung_server_respects_call_budget() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            let mut held = Vec::new();
            for s in listener.incoming().flatten() {
                held.push(s);
            }
        });
        let cfg = GenConfig {
            timeout_secs: 0.3,
            max_retries: 1,
            ..Default::default()
        };
        let start = Instant::now();
        let err = backend(&format!("http://{addr}"))
            .chat(&[ChatMessage::user("x")], &cfg)
            .unwrap_err();
        let elapsed = start.elapsed();
        assert!(matches!(err, GatewayError::Transient { .. }), "{err:?}");
        assert!(elapsed <= Duration::from_secs_f64(0.3 * 2.0 + 0.2), "{elapsed:?}");
    }
}
