//! OpenAI-compatible `/v1/chat/completions` client.

use std::fmt;
use std::path::Path;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{estimate_tokens, BackendError, ChatBackend, CompletionRequest, CompletionResult, ImageRef, Part, Role};

pub const API_KEY_ENV: &str = "DACO_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub model: String,
    /// Retries after the first attempt for transient failures.
    pub retries: u32,
    pub backoff_ms: u64,
    pub timeout_s: u64,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com".to_string(),
            model: "gpt-4o".to_string(),
            retries: 3,
            backoff_ms: 500,
            timeout_s: 120,
        }
    }
}

pub struct RemoteBackend {
    config: RemoteConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl fmt::Debug for RemoteBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RemoteBackend")
            .field("config", &self.config)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

enum Failure {
    Transient(String),
    Fatal(BackendError),
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig, api_key: Option<String>) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_s))
            .build()
            .map_err(|e| BackendError::Transport {
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(Self {
            config,
            api_key: api_key.filter(|k| !k.is_empty()),
            client,
        })
    }

    /// Reads the key from `DACO_API_KEY`; a missing key is allowed for local
    /// servers that do not check one.
    pub fn from_env(config: RemoteConfig) -> Result<Self, BackendError> {
        Self::new(config, std::env::var(API_KEY_ENV).ok())
    }

    pub fn url(&self) -> String {
        let base = self.config.endpoint.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else if base.ends_with("/v1") {
            format!("{base}/chat/completions")
        } else {
            format!("{base}/v1/chat/completions")
        }
    }

    pub fn body(&self, request: &CompletionRequest) -> Result<Value, BackendError> {
        let mut messages = Vec::with_capacity(request.messages.len());
        for message in &request.messages {
            let role = match message.role {
                Role::System => "system",
                Role::User => "user",
                Role::Assistant => "assistant",
            };
            let mut content = Vec::with_capacity(message.parts.len());
            for part in &message.parts {
                content.push(match part {
                    Part::Text { text } => json!({ "type": "text", "text": text }),
                    Part::Image { image } => json!({
                        "type": "image_url",
                        "image_url": { "url": data_url(image)? }
                    }),
                });
            }
            messages.push(json!({ "role": role, "content": content }));
        }
        Ok(json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }))
    }

    fn attempt(&self, body: &Value) -> Result<Value, Failure> {
        let mut builder = self.client.post(self.url()).json(body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder
            .send()
            .map_err(|e| Failure::Transient(e.without_url().to_string()))?;
        let status = response.status().as_u16();
        let text = response.text().map_err(|e| Failure::Transient(e.to_string()))?;
        match status {
            200..=299 => {
                serde_json::from_str(&text).map_err(|e| Failure::Fatal(BackendError::MalformedResponse(e.to_string())))
            }
            401 | 403 => Err(Failure::Fatal(BackendError::Authentication { status, body: text })),
            408 | 429 | 500..=599 => Err(Failure::Transient(format!("HTTP {status}: {text}"))),
            _ => Err(Failure::Fatal(BackendError::Http { status, body: text })),
        }
    }
}

impl ChatBackend for RemoteBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        request.validate()?;
        let body = self.body(request)?;
        let started = Instant::now();
        let mut attempts = 0;
        let value = loop {
            attempts += 1;
            match self.attempt(&body) {
                Ok(v) => break v,
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Transient(message)) => {
                    if attempts > self.config.retries {
                        return Err(BackendError::Transport { attempts, message });
                    }
                    log::warn!("{} attempt {attempts} failed: {message}", request.key);
                    let delay = self.config.backoff_ms.saturating_mul(1 << (attempts - 1).min(16));
                    std::thread::sleep(Duration::from_millis(delay));
                }
            }
        };
        let latency = started.elapsed().as_secs_f64();
        let text = value["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| BackendError::MalformedResponse("missing choices[0].message.content".into()))?
            .to_string();
        let usage = &value["usage"];
        let (prompt_tokens, completion_tokens, estimated) =
            match (usage["prompt_tokens"].as_u64(), usage["completion_tokens"].as_u64()) {
                (Some(p), Some(c)) => (p, c, false),
                _ => (
                    estimate_tokens(&request.serialized_text()),
                    estimate_tokens(&text),
                    true,
                ),
            };
        Ok(CompletionResult {
            text,
            prompt_tokens,
            completion_tokens,
            latency,
            estimated,
        })
    }
}

fn mime_for(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => "image/png",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        _ => "image/jpeg",
    }
}

fn data_url(image: &ImageRef) -> Result<String, BackendError> {
    match image {
        ImageRef::File { path } => {
            let bytes = std::fs::read(path).map_err(|source| BackendError::ImageRead {
                path: path.clone(),
                source,
            })?;
            Ok(format!("data:{};base64,{}", mime_for(path), STANDARD.encode(bytes)))
        }
        ImageRef::Png { bytes, .. } => Ok(format!("data:image/png;base64,{}", STANDARD.encode(bytes.as_slice()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{CallKind, ChatMessage};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};

    /// Serves canned HTTP responses in order, capturing each request.
    fn serve(responses: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<String>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = seen.clone();
        std::thread::spawn(move || {
            for (status, body) in responses {
                let Ok((mut stream, _)) = listener.accept() else { return };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut head = String::new();
                let mut length = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        length = v.trim().parse().unwrap();
                    }
                    head.push_str(&line);
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                }
                let mut payload = vec![0; length];
                reader.read_exact(&mut payload).unwrap();
                head.push_str(&String::from_utf8_lossy(&payload));
                log.lock().unwrap().push(head);
                let reply = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
        });
        (format!("http://{addr}"), seen)
    }

    fn backend(endpoint: String, retries: u32) -> RemoteBackend {
        RemoteBackend::new(
            RemoteConfig {
                endpoint,
                model: "test-model".into(),
                retries,
                backoff_ms: 1,
                timeout_s: 5,
            },
            Some("sk-secret".into()),
        )
        .unwrap()
    }

    fn request() -> CompletionRequest {
        CompletionRequest::new(
            CallKind::Action,
            vec![ChatMessage::system("sys"), ChatMessage::user("go")],
        )
    }

    const OK: &str = r#"{"choices":[{"message":{"role":"assistant","content":"Action: A"}}],"usage":{"prompt_tokens":12,"completion_tokens":3}}"#;

    #[test]
    fn successful_call_reports_usage() {
        let (url, seen) = serve(vec![(200, OK.into())]);
        let r = backend(url, 0).complete(&request()).unwrap();
        assert_eq!(r.text, "Action: A");
        assert_eq!((r.prompt_tokens, r.completion_tokens, r.estimated), (12, 3, false));
        let raw = seen.lock().unwrap()[0].clone();
        assert!(raw.starts_with("POST /v1/chat/completions"));
        assert!(raw.contains("\"temperature\":0.0"));
        assert!(raw.contains("\"max_tokens\":1000"));
        assert!(raw.to_ascii_lowercase().contains("authorization: bearer sk-secret"));
    }

    #[test]
    fn unauthorized_is_an_authentication_error() {
        let (url, _) = serve(vec![(401, r#"{"error":"bad key"}"#.into())]);
        let err = backend(url, 3).complete(&request()).unwrap_err();
        assert!(matches!(err, BackendError::Authentication { status: 401, ref body } if body.contains("bad key")));
    }

    #[test]
    fn other_client_errors_echo_the_body() {
        let (url, _) = serve(vec![(400, "nope".into())]);
        let err = backend(url, 3).complete(&request()).unwrap_err();
        assert!(matches!(err, BackendError::Http { status: 400, ref body } if body == "nope"));
    }

    #[test]
    fn server_errors_are_retried() {
        let (url, seen) = serve(vec![(503, "busy".into()), (500, "oops".into()), (200, OK.into())]);
        let r = backend(url, 3).complete(&request()).unwrap();
        assert_eq!(r.text, "Action: A");
        assert_eq!(seen.lock().unwrap().len(), 3);
    }

    #[test]
    fn retries_run_out() {
        let (url, _) = serve(vec![(503, "busy".into()), (503, "busy".into())]);
        let err = backend(url, 1).complete(&request()).unwrap_err();
        assert!(matches!(err, BackendError::Transport { attempts: 2, .. }));
    }

    #[test]
    fn missing_usage_is_estimated() {
        let body = r#"{"choices":[{"message":{"content":"Action: stop"}}]}"#;
        let (url, _) = serve(vec![(200, body.into())]);
        let r = backend(url, 0).complete(&request()).unwrap();
        assert!(r.estimated);
        assert_eq!(r.completion_tokens, 3);
    }

    #[test]
    fn images_become_data_urls() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.jpg");
        std::fs::write(&path, [1u8, 2, 3]).unwrap();
        let mut msg = ChatMessage::user("look");
        msg.push_image(ImageRef::file(&path));
        msg.push_image(ImageRef::png("map", vec![9, 9]));
        let req = CompletionRequest::new(CallKind::Describe, vec![msg]);
        let body = backend("http://unused".into(), 0).body(&req).unwrap();
        let content = &body["messages"][0]["content"];
        assert_eq!(content[1]["image_url"]["url"], "data:image/jpeg;base64,AQID");
        assert_eq!(content[2]["image_url"]["url"], "data:image/png;base64,CQk=");
    }

    #[test]
    fn unreadable_image_fails_before_dispatch() {
        let mut msg = ChatMessage::user("look");
        msg.push_image(ImageRef::file("/no/such/image.jpg"));
        let req = CompletionRequest::new(CallKind::Describe, vec![msg]);
        let err = backend("http://127.0.0.1:9".into(), 0).complete(&req).unwrap_err();
        assert!(matches!(err, BackendError::ImageRead { .. }));
    }

    #[test]
    fn debug_output_hides_the_key() {
        let b = backend("http://x".into(), 0);
        let shown = format!("{b:?}");
        assert!(!shown.contains("sk-secret"));
        assert!(shown.contains("redacted"));
    }

    #[test]
    fn url_variants() {
        assert_eq!(backend("http://h/".into(), 0).url(), "http://h/v1/chat/completions");
        assert_eq!(backend("http://h/v1".into(), 0).url(), "http://h/v1/chat/completions");
        assert_eq!(
            backend("http://h/api/chat/completions".into(), 0).url(),
            "http://h/api/chat/completions"
        );
    }
}
