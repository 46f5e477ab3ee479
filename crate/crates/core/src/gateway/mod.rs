//! Single point of model access: chat, structured output, vision-grounded
//! description and text embedding.
//!
//! Every other module takes a [`Gateway`] handle and performs no network I/O
//! of its own. Two providers ship: [`ScriptedMock`] for deterministic offline
//! runs and [`OpenAiCompatible`] for a real chat-completions endpoint.

mod audit;
mod mock;
mod openai;

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use audit::{AuditRecord, AuditedGateway};
pub use mock::{MockMatch, MockResponse, MockRule, RuleKind, ScriptedMock};
pub use openai::OpenAiCompatible;

use crate::error::GatewayError;
use crate::memory::embed::{Embedding, STUB_DIMENSION};

pub const ENV_PROVIDER: &str = "POLYPHONY_PROVIDER";
pub const ENV_ENDPOINT: &str = "POLYPHONY_ENDPOINT";
pub const ENV_API_KEY_ENV: &str = "POLYPHONY_API_KEY_ENV";

pub const DEFAULT_TIMEOUT_MS: u64 = 30_000;
pub const DEFAULT_MAX_RETRIES: u32 = 2;
pub const BACKOFF_BASE_MS: u64 = 250;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    Chat,
    Structured,
    Vision,
    Embed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRequest {
    pub kind: RequestKind,
    pub system: String,
    pub messages: Vec<ChatMessage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_b64: Option<String>,
    pub timeout_ms: u64,
    pub max_retries: u32,
}

impl ModelRequest {
    fn base(kind: RequestKind, system: &str, messages: Vec<ChatMessage>) -> Self {
        Self {
            kind,
            system: system.to_string(),
            messages,
            schema: None,
            image_b64: None,
            timeout_ms: DEFAULT_TIMEOUT_MS,
            max_retries: DEFAULT_MAX_RETRIES,
        }
    }

    pub fn chat(system: &str, user: &str) -> Self {
        Self::base(RequestKind::Chat, system, vec![ChatMessage::user(user)])
    }

    pub fn structured(system: &str, messages: Vec<ChatMessage>, schema: Value) -> Self {
        let mut r = Self::base(RequestKind::Structured, system, messages);
        r.schema = Some(schema);
        r
    }

    /// A grounding request. `user` carries the utterance and any scene text.
    pub fn vision(system: &str, user: &str, image_b64: Option<String>) -> Self {
        let mut r = Self::base(RequestKind::Vision, system, vec![ChatMessage::user(user)]);
        r.image_b64 = image_b64;
        r
    }

    pub fn embed(text: &str) -> Self {
        Self::base(RequestKind::Embed, "", vec![ChatMessage::user(text)])
    }

    /// Content of the most recent user message, or `""`.
    pub fn latest_user_message(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: &str| Err(GatewayError::InvalidArgument(m.to_string()));
        match self.kind {
            RequestKind::Structured if self.schema.is_none() => bad("structured request without a schema"),
            RequestKind::Vision
                if self.image_b64.as_deref().map_or(true, str::is_empty)
                    && self.latest_user_message().trim().is_empty() =>
            {
                bad("vision request needs an image or scene text")
            }
            RequestKind::Embed if self.messages.len() != 1 => bad("embed request must carry exactly one text"),
            RequestKind::Embed if self.messages[0].content.trim().is_empty() => bad("empty text has no embedding"),
            RequestKind::Chat | RequestKind::Structured if self.messages.is_empty() => bad("request has no messages"),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "body", rename_all = "snake_case")]
pub enum ModelResponse {
    Text(String),
    Structured(Value),
}

impl ModelResponse {
    pub fn into_text(self) -> String {
        match self {
            ModelResponse::Text(t) => t,
            ModelResponse::Structured(v) => v.to_string(),
        }
    }

    /// Structured value; text responses are parsed as JSON.
    pub fn into_structured(self) -> Result<Value, GatewayError> {
        match self {
            ModelResponse::Structured(v) => Ok(v),
            ModelResponse::Text(t) => serde_json::from_str(&t)
                .map_err(|e| GatewayError::SchemaViolation(format!("response is not valid JSON: {e}"))),
        }
    }
}

/// Model access. Implementations must be safe for concurrent use.
pub trait Gateway: Send + Sync {
    fn complete(&self, req: &ModelRequest) -> Result<ModelResponse, GatewayError>;

    /// Unit vector of [`Gateway::dimension`] components for non-empty text.
    fn embed(&self, text: &str) -> Result<Embedding, GatewayError>;

    fn dimension(&self) -> usize;

    fn supports_vision(&self) -> bool {
        false
    }
}

/// Checks a structured response against the request schema.
pub(crate) fn check_structured(req: &ModelRequest, value: &Value) -> Result<(), GatewayError> {
    if let Some(schema) = &req.schema {
        crate::schema::validate(schema, value).map_err(|e| GatewayError::SchemaViolation(e.to_string()))?;
    }
    Ok(())
}

/// Delay before retry number `attempt` (1-based):
/// `base·2^(attempt−1)` scaled by a jitter factor in `[0.5, 1.5]`.
pub fn backoff_delay(base_ms: u64, attempt: u32, rng: &mut impl Rng) -> Duration {
    let nominal = base_ms as f64 * 2f64.powi(attempt.saturating_sub(1) as i32);
    let jitter: f64 = rng.gen_range(0.5..=1.5);
    Duration::from_secs_f64(nominal * jitter / 1000.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    ScriptedMock,
    OpenaiCompatible,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelNames {
    #[serde(default = "default_chat_model")]
    pub chat: String,
    #[serde(default = "default_vision_model")]
    pub vision: String,
    #[serde(default = "default_embed_model")]
    pub embed: String,
}

fn default_chat_model() -> String {
    "chat".into()
}
fn default_vision_model() -> String {
    "vision".into()
}
fn default_embed_model() -> String {
    "embedding".into()
}

impl Default for ModelNames {
    fn default() -> Self {
        Self {
            chat: default_chat_model(),
            vision: default_vision_model(),
            embed: default_embed_model(),
        }
    }
}

fn default_dimension() -> usize {
    STUB_DIMENSION
}
fn default_timeout() -> u64 {
    DEFAULT_TIMEOUT_MS
}
fn default_retries() -> u32 {
    DEFAULT_MAX_RETRIES
}

/// Provider selection. Credentials are referenced by environment variable
/// name and never stored inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    pub provider: ProviderKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub models: ModelNames,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_dimension")]
    pub dimension: usize,
    #[serde(default)]
    pub fixture: Option<PathBuf>,
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
}

impl ProviderConfig {
    pub fn scripted_mock(fixture: impl Into<PathBuf>) -> Self {
        Self {
            provider: ProviderKind::ScriptedMock,
            endpoint: None,
            models: ModelNames::default(),
            api_key_env: None,
            dimension: STUB_DIMENSION,
            fixture: Some(fixture.into()),
            timeout_ms: DEFAULT_TIMEOUT_MS,
            max_retries: DEFAULT_MAX_RETRIES,
        }
    }

    pub fn openai_compatible(endpoint: &str, api_key_env: &str) -> Self {
        Self {
            provider: ProviderKind::OpenaiCompatible,
            endpoint: Some(endpoint.to_string()),
            models: ModelNames::default(),
            api_key_env: Some(api_key_env.to_string()),
            dimension: STUB_DIMENSION,
            fixture: None,
            timeout_ms: DEFAULT_TIMEOUT_MS,
            max_retries: DEFAULT_MAX_RETRIES,
        }
    }

    /// Reads `POLYPHONY_PROVIDER`, `POLYPHONY_ENDPOINT` and
    /// `POLYPHONY_API_KEY_ENV`. Returns `None` when no provider is set.
    pub fn from_env() -> Result<Option<ProviderConfig>, GatewayError> {
        let Ok(kind) = std::env::var(ENV_PROVIDER) else {
            return Ok(None);
        };
        let kind = match kind.trim() {
            "scripted_mock" | "mock" => ProviderKind::ScriptedMock,
            "openai_compatible" | "openai" => ProviderKind::OpenaiCompatible,
            other => return Err(GatewayError::Config(format!("{ENV_PROVIDER}: unknown provider {other:?}"))),
        };
        let mut cfg = match kind {
            ProviderKind::ScriptedMock => Self {
                fixture: None,
                ..Self::scripted_mock("")
            },
            ProviderKind::OpenaiCompatible => Self::openai_compatible("", ""),
        };
        cfg.endpoint = std::env::var(ENV_ENDPOINT).ok().or(cfg.endpoint.filter(|e| !e.is_empty()));
        cfg.api_key_env = std::env::var(ENV_API_KEY_ENV).ok();
        Ok(Some(cfg))
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: &str| Err(GatewayError::Config(m.to_string()));
        if self.dimension == 0 {
            return bad("dimension must be positive");
        }
        match self.provider {
            ProviderKind::ScriptedMock if self.fixture.as_ref().map_or(true, |f| f.as_os_str().is_empty()) => {
                bad("scripted_mock requires a fixture path")
            }
            ProviderKind::OpenaiCompatible if self.endpoint.as_deref().map_or(true, str::is_empty) => {
                bad("openai_compatible requires an endpoint")
            }
            ProviderKind::OpenaiCompatible if self.api_key_env.as_deref().map_or(true, str::is_empty) => {
                bad("openai_compatible requires api_key_env (the name of the variable holding the key)")
            }
            _ => Ok(()),
        }
    }

    pub fn build(&self) -> Result<Arc<dyn Gateway>, GatewayError> {
        self.validate()?;
        Ok(match self.provider {
            ProviderKind::ScriptedMock => {
                let path = self.fixture.as_ref().expect("validated");
                Arc::new(ScriptedMock::load(path)?.with_dimension(self.dimension))
            }
            ProviderKind::OpenaiCompatible => Arc::new(OpenAiCompatible::from_config(self)?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    #[test]
    fn request_invariants() {
        assert!(ModelRequest::embed("").validate().is_err());
        assert!(ModelRequest::embed("x").validate().is_ok());
        let mut s = ModelRequest::structured("", vec![ChatMessage::user("x")], serde_json::json!({}));
        assert!(s.validate().is_ok());
        s.schema = None;
        assert!(s.validate().is_err());
        assert!(ModelRequest::vision("", "", None).validate().is_err());
        assert!(ModelRequest::vision("", "", Some("aGk=".into())).validate().is_ok());
        assert!(ModelRequest::vision("", "a red ball", None).validate().is_ok());
    }

    #[test]
    fn latest_user_message_skips_assistant_turns() {
        let r = ModelRequest::structured(
            "",
            vec![ChatMessage::user("first"), ChatMessage::assistant("reply"), ChatMessage::user("second")],
            serde_json::json!({}),
        );
        assert_eq!(r.latest_user_message(), "second");
    }

    #[test]
    fn provider_config_invariants() {
        let mut mock = ProviderConfig::scripted_mock("f.jsonl");
        assert!(mock.validate().is_ok());
        mock.fixture = None;
        assert!(mock.validate().is_err());
        let mut oa = ProviderConfig::openai_compatible("http://localhost:1", "KEY");
        assert!(oa.validate().is_ok());
        oa.api_key_env = None;
        assert!(oa.validate().is_err());
        oa.api_key_env = Some("KEY".into());
        oa.endpoint = None;
        assert!(oa.validate().is_err());
    }

    #[test]
    fn provider_config_deserializes_with_defaults() {
        let cfg: ProviderConfig = serde_json::from_str(
            r#"{"provider":"openai_compatible","endpoint":"http://h/v1","api_key_env":"OPENAI_API_KEY"}"#,
        )
        .unwrap();
        assert_eq!(cfg.max_retries, DEFAULT_MAX_RETRIES);
        assert_eq!(cfg.dimension, STUB_DIMENSION);
        assert!(serde_json::from_str::<ProviderConfig>(r#"{"provider":"openai_compatible","api_key":"sk-x"}"#).is_err());
    }

    proptest! {
        #[test]
        fn backoff_stays_within_jitter_band(attempt in 1u32..8, seed in any::<u64>()) {
            let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
            let d = backoff_delay(BACKOFF_BASE_MS, attempt, &mut rng).as_secs_f64() * 1000.0;
            let nominal = 250.0 * 2f64.powi(attempt as i32 - 1);
            prop_assert!(d >= nominal * 0.5 - 1e-6);
            prop_assert!(d <= nominal * 1.5 + 1e-6);
        }
    }
}
