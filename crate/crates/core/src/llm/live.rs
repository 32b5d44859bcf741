use std::time::Duration;

use serde_json::Value;

use super::message::{request_to_wire, response_from_wire};
use super::{ChatProvider, ChatRequest, ChatResponse, GatewayError, ENV_API_BASE, ENV_API_KEY, ENV_MODEL};

pub const DEFAULT_API_BASE: &str = "https://api.openai.com/v1";
pub const DEFAULT_MODEL: &str = "gpt-4o";

/// Endpoint settings. The credential is held in memory only.
#[derive(Clone)]
pub struct LiveConfig {
    pub api_base: String,
    pub api_key: String,
    pub model: String,
    pub timeout: Duration,
    /// Delay before each retry of a transient failure.
    pub backoff: Vec<Duration>,
}

impl std::fmt::Debug for LiveConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LiveConfig")
            .field("api_base", &self.api_base)
            .field("model", &self.model)
            .field("timeout", &self.timeout)
            .finish_non_exhaustive()
    }
}

impl LiveConfig {
    pub fn new(api_base: impl Into<String>, api_key: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            api_base: api_base.into(),
            api_key: api_key.into(),
            model: model.into(),
            timeout: Duration::from_secs(120),
            backoff: vec![
                Duration::from_millis(500),
                Duration::from_secs(2),
                Duration::from_secs(8),
            ],
        }
    }

    /// Reads `LLM_API_BASE`, `LLM_API_KEY` and `LLM_MODEL`; the key is required.
    pub fn from_env() -> Result<Self, GatewayError> {
        let key = std::env::var(ENV_API_KEY)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| GatewayError::Config(format!("{ENV_API_KEY} is not set")))?;
        let base = std::env::var(ENV_API_BASE).unwrap_or_else(|_| DEFAULT_API_BASE.to_string());
        let model = std::env::var(ENV_MODEL).unwrap_or_else(|_| DEFAULT_MODEL.to_string());
        Ok(Self::new(base, key, model))
    }

    pub(crate) fn endpoint(&self, path: &str) -> String {
        format!("{}/{}", self.api_base.trim_end_matches('/'), path)
    }

    pub(crate) fn agent(&self) -> ureq::Agent {
        ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .http_status_as_error(false)
            .build()
            .into()
    }

    /// POSTs a JSON body, retrying connection failures, 429 and 5xx
    /// responses according to `backoff`.
    pub(crate) fn post_json(&self, agent: &ureq::Agent, path: &str, body: &Value) -> Result<Value, GatewayError> {
        let url = self.endpoint(path);
        let mut attempt = 0;
        loop {
            let outcome = agent
                .post(&url)
                .header("Authorization", &format!("Bearer {}", self.api_key))
                .send_json(body);
            let failure = match outcome {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    let text = resp
                        .body_mut()
                        .read_to_string()
                        .map_err(|e| GatewayError::Transport(e.to_string()));
                    match (status, text) {
                        (200..=299, Ok(text)) => {
                            return serde_json::from_str(&text).map_err(|e| {
                                GatewayError::Protocol(format!("malformed JSON payload: {e}"))
                            });
                        }
                        (429 | 500..=599, _) => format!("HTTP {status}"),
                        (_, Ok(text)) => {
                            return Err(GatewayError::Transport(format!(
                                "HTTP {status}: {}",
                                text.chars().take(200).collect::<String>()
                            )));
                        }
                        (_, Err(e)) => return Err(e),
                    }
                }
                Err(e) => e.to_string(),
            };
            match self.backoff.get(attempt) {
                Some(delay) => {
                    tracing::warn!(attempt, %failure, "retrying {url}");
                    std::thread::sleep(*delay);
                    attempt += 1;
                }
                None => {
                    return Err(GatewayError::Transport(format!(
                        "{failure} after {} attempts",
                        attempt + 1
                    )));
                }
            }
        }
    }
}

/// Chat-completions client over HTTP.
pub struct LiveProvider {
    config: LiveConfig,
    agent: ureq::Agent,
}

impl LiveProvider {
    pub fn new(config: LiveConfig) -> Self {
        let agent = config.agent();
        Self { config, agent }
    }

    pub fn from_env() -> Result<Self, GatewayError> {
        Ok(Self::new(LiveConfig::from_env()?))
    }

    pub fn config(&self) -> &LiveConfig {
        &self.config
    }
}

impl ChatProvider for LiveProvider {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        for m in &request.messages {
            m.validate()?;
        }
        let body = request_to_wire(request, &self.config.model);
        let payload = self.config.post_json(&self.agent, "chat/completions", &body)?;
        response_from_wire(&payload)
    }

    fn name(&self) -> &str {
        "live"
    }
}

#[cfg(test)]
pub(crate) mod test_server {
    //! Minimal HTTP/1.1 responder for exercising the client offline.
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};

    pub struct Canned {
        pub status: u16,
        pub body: String,
    }

    /// Serves `responses` in order, one per connection, and records the
    /// request bodies it received.
    pub fn serve(responses: Vec<Canned>) -> (String, Arc<Mutex<Vec<String>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = seen.clone();
        std::thread::spawn(move || {
            for canned in responses {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut length = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        length = v.trim().parse().unwrap();
                    }
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                }
                let mut body = vec![0; length];
                reader.read_exact(&mut body).unwrap();
                log.lock().unwrap().push(String::from_utf8(body).unwrap());
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                    canned.status,
                    canned.body.len(),
                    canned.body
                )
                .unwrap();
            }
        });
        (format!("http://{addr}"), seen)
    }
}
