//! Provider for OpenAI-compatible `/chat/completions` and `/embeddings`
//! endpoints.

use std::time::Duration;

use serde_json::{json, Value};
use tracing::warn;

use super::{
    backoff_delay, check_structured, Gateway, ModelNames, ModelRequest, ModelResponse, ProviderConfig, RequestKind,
    Role, BACKOFF_BASE_MS, DEFAULT_MAX_RETRIES, DEFAULT_TIMEOUT_MS,
};
use crate::error::GatewayError;
use crate::memory::embed::Embedding;

pub struct OpenAiCompatible {
    client: reqwest::blocking::Client,
    endpoint: String,
    models: ModelNames,
    api_key: Option<String>,
    dimension: usize,
    backoff_base_ms: u64,
    embed_timeout_ms: u64,
    embed_retries: u32,
}

impl std::fmt::Debug for OpenAiCompatible {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OpenAiCompatible")
            .field("endpoint", &self.endpoint)
            .field("models", &self.models)
            .field("dimension", &self.dimension)
            .finish_non_exhaustive()
    }
}

enum Failure {
    Retryable(String),
    Fatal(GatewayError),
}

impl OpenAiCompatible {
    pub fn new(endpoint: &str, api_key: Option<String>, models: ModelNames, dimension: usize) -> Self {
        Self {
            client: reqwest::blocking::Client::new(),
            endpoint: endpoint.trim_end_matches('/').to_string(),
            models,
            api_key,
            dimension,
            backoff_base_ms: BACKOFF_BASE_MS,
            embed_timeout_ms: DEFAULT_TIMEOUT_MS,
            embed_retries: DEFAULT_MAX_RETRIES,
        }
    }

    /// Resolves the API key from the environment variable named in the config.
    pub fn from_config(cfg: &ProviderConfig) -> Result<Self, GatewayError> {
        let endpoint = cfg
            .endpoint
            .as_deref()
            .ok_or_else(|| GatewayError::Config("missing endpoint".into()))?;
        let api_key = match cfg.api_key_env.as_deref() {
            Some(var) => Some(
                std::env::var(var).map_err(|_| GatewayError::Config(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let mut p = Self::new(endpoint, api_key, cfg.models.clone(), cfg.dimension);
        p.embed_timeout_ms = cfg.timeout_ms;
        p.embed_retries = cfg.max_retries;
        Ok(p)
    }

    pub fn with_backoff_base(mut self, ms: u64) -> Self {
        self.backoff_base_ms = ms;
        self
    }

    fn chat_body(&self, req: &ModelRequest) -> Value {
        let mut messages = Vec::new();
        if !req.system.is_empty() {
            messages.push(json!({"role": "system", "content": req.system}));
        }
        let last_user = req.messages.iter().rposition(|m| m.role == Role::User);
        for (i, m) in req.messages.iter().enumerate() {
            let role = match m.role {
                Role::System => "system",
                Role::User => "user",
                Role::Assistant => "assistant",
            };
            let content = match (&req.image_b64, Some(i) == last_user) {
                (Some(img), true) if req.kind == RequestKind::Vision => json!([
                    {"type": "text", "text": m.content},
                    {"type": "image_url", "image_url": {"url": format!("data:image/jpeg;base64,{img}")}}
                ]),
                _ => json!(m.content),
            };
            messages.push(json!({"role": role, "content": content}));
        }
        let model = if req.kind == RequestKind::Vision { &self.models.vision } else { &self.models.chat };
        let mut body = json!({"model": model, "messages": messages});
        if let (RequestKind::Structured, Some(schema)) = (req.kind, &req.schema) {
            body["response_format"] = json!({
                "type": "json_schema",
                "json_schema": {"name": "structured_output", "schema": schema}
            });
        }
        body
    }

    fn attempt(&self, url: &str, body: &Value, timeout_ms: u64) -> Result<Value, Failure> {
        let mut rb = self.client.post(url).timeout(Duration::from_millis(timeout_ms)).json(body);
        if let Some(key) = &self.api_key {
            rb = rb.bearer_auth(key);
        }
        let resp = rb.send().map_err(|e| Failure::Retryable(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() {
            return Err(Failure::Retryable(format!("HTTP {status}")));
        }
        let text = resp.text().map_err(|e| Failure::Retryable(e.to_string()))?;
        if !status.is_success() {
            return Err(Failure::Fatal(GatewayError::Provider {
                status: Some(status.as_u16()),
                message: text.chars().take(500).collect(),
            }));
        }
        serde_json::from_str(&text).map_err(|e| {
            Failure::Fatal(GatewayError::Provider {
                status: Some(status.as_u16()),
                message: format!("unparseable response body: {e}"),
            })
        })
    }

    /// Up to `max_retries` retries on transport errors and 5xx responses.
    fn post_with_retry(&self, path: &str, body: &Value, timeout_ms: u64, max_retries: u32) -> Result<Value, GatewayError> {
        let url = format!("{}/{path}", self.endpoint);
        let attempts = max_retries + 1;
        let mut rng = rand::thread_rng();
        for n in 1..=attempts {
            match self.attempt(&url, body, timeout_ms) {
                Ok(v) => return Ok(v),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retryable(msg)) => {
                    warn!(attempt = n, of = attempts, %url, error = %msg, "provider request failed");
                    if n < attempts {
                        std::thread::sleep(backoff_delay(self.backoff_base_ms, n, &mut rng));
                    }
                }
            }
        }
        Err(GatewayError::ProviderTimeout { attempts })
    }
}

fn message_content(body: &Value) -> Result<String, GatewayError> {
    body.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| GatewayError::Provider {
            status: None,
            message: "response has no choices[0].message.content".into(),
        })
}

impl Gateway for OpenAiCompatible {
    fn complete(&self, req: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        req.validate()?;
        if req.kind == RequestKind::Embed {
            let e = self.embed(req.latest_user_message())?;
            return Ok(ModelResponse::Structured(json!(e.as_slice())));
        }
        let body = self.chat_body(req);
        let resp = self.post_with_retry("chat/completions", &body, req.timeout_ms, req.max_retries)?;
        let content = message_content(&resp)?;
        if req.kind == RequestKind::Structured {
            let value = ModelResponse::Text(content).into_structured()?;
            check_structured(req, &value)?;
            return Ok(ModelResponse::Structured(value));
        }
        Ok(ModelResponse::Text(content))
    }

    fn embed(&self, text: &str) -> Result<Embedding, GatewayError> {
        if text.trim().is_empty() {
            return Err(GatewayError::InvalidArgument("empty text has no embedding".into()));
        }
        let body = json!({"model": self.models.embed, "input": text});
        let resp = self.post_with_retry("embeddings", &body, self.embed_timeout_ms, self.embed_retries)?;
        let raw: Vec<f64> = resp
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(Value::as_f64).collect())
            .ok_or_else(|| GatewayError::Provider {
                status: None,
                message: "response has no data[0].embedding".into(),
            })?;
        if raw.len() != self.dimension {
            return Err(GatewayError::Provider {
                status: None,
                message: format!("embedding has {} components, expected {}", raw.len(), self.dimension),
            });
        }
        Embedding::normalize(raw)
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn supports_vision(&self) -> bool {
        true
    }
}
