//! Fixture-driven deterministic provider.
//!
//! A fixture is JSON-lines; each line is one rule:
//!
//! ```text
//! {"kind":"chat","match":{"contains":"favorite color"},"respond":"Your favorite color is blue!"}
//! {"kind":"structured","match":{"regex":"favorite (\\w+)"},"respond_structured":{"text":"$1"}}
//! {"kind":"structured","match":{"always":true},"fail":"timeout"}
//! ```
//!
//! Rules are tried top to bottom against the latest user message and the
//! first match wins. `contains` is case-insensitive. Regex rules expand
//! `$1`/`${name}` captures in every string of the response. A request that
//! no rule matches is a fixture error.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use regex::{Captures, Regex};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{check_structured, Gateway, ModelRequest, ModelResponse, RequestKind};
use crate::error::GatewayError;
use crate::memory::embed::{Embedding, StubEmbedder};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockMatch {
    Contains(String),
    Regex(String),
    Always(bool),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    Chat,
    Structured,
    Vision,
    Embed,
    Any,
}

impl RuleKind {
    fn accepts(self, kind: RequestKind) -> bool {
        matches!(
            (self, kind),
            (RuleKind::Any, _)
                | (RuleKind::Chat, RequestKind::Chat)
                | (RuleKind::Structured, RequestKind::Structured)
                | (RuleKind::Vision, RequestKind::Vision)
                | (RuleKind::Embed, RequestKind::Embed)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub kind: RuleKind,
    #[serde(rename = "match")]
    pub matcher: MockMatch,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub respond: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub respond_structured: Option<Value>,
    /// Simulated failure: `timeout`, `unavailable`, or any other message.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fail: Option<String>,
}

impl MockRule {
    pub fn new(kind: RuleKind, matcher: MockMatch, response: MockResponse) -> Self {
        let mut r = Self {
            id: None,
            kind,
            matcher,
            respond: None,
            respond_structured: None,
            fail: None,
        };
        match response {
            MockResponse::Text(t) => r.respond = Some(t),
            MockResponse::Structured(v) => r.respond_structured = Some(v),
            MockResponse::Fail(f) => r.fail = Some(f),
        }
        r
    }

    fn response(&self) -> Result<MockResponse, String> {
        match (&self.respond, &self.respond_structured, &self.fail) {
            (Some(t), None, None) => Ok(MockResponse::Text(t.clone())),
            (None, Some(v), None) => Ok(MockResponse::Structured(v.clone())),
            (None, None, Some(f)) => Ok(MockResponse::Fail(f.clone())),
            _ => Err("exactly one of respond, respond_structured or fail is required".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MockResponse {
    Text(String),
    Structured(Value),
    Fail(String),
}

#[derive(Debug)]
enum Matcher {
    Contains(String),
    Regex(Regex),
    Always,
}

#[derive(Debug)]
struct CompiledRule {
    kind: RuleKind,
    matcher: Matcher,
    response: MockResponse,
}

#[derive(Debug)]
pub struct ScriptedMock {
    rules: Vec<CompiledRule>,
    embedder: StubEmbedder,
    calls: AtomicUsize,
}

impl ScriptedMock {
    pub fn from_rules(rules: Vec<MockRule>) -> Result<Self, GatewayError> {
        let mut compiled = Vec::with_capacity(rules.len());
        for (i, rule) in rules.into_iter().enumerate() {
            let label = rule.id.clone().unwrap_or_else(|| format!("rule {}", i + 1));
            let response = rule.response().map_err(|e| GatewayError::Fixture(format!("{label}: {e}")))?;
            let matcher = match rule.matcher {
                MockMatch::Contains(s) => Matcher::Contains(s.to_lowercase()),
                MockMatch::Regex(p) => Matcher::Regex(
                    Regex::new(&p).map_err(|e| GatewayError::Fixture(format!("{label}: bad regex: {e}")))?,
                ),
                MockMatch::Always(true) => Matcher::Always,
                MockMatch::Always(false) => {
                    return Err(GatewayError::Fixture(format!("{label}: `always` must be true")));
                }
            };
            compiled.push(CompiledRule {
                kind: rule.kind,
                matcher,
                response,
            });
        }
        Ok(Self {
            rules: compiled,
            embedder: StubEmbedder::default(),
            calls: AtomicUsize::new(0),
        })
    }

    /// Parses JSON-lines. Blank lines and lines starting with `#` or `//`
    /// are skipped.
    pub fn parse(text: &str) -> Result<Self, GatewayError> {
        Self::from_rules(parse_rules(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Fixture(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            GatewayError::Fixture(m) => GatewayError::Fixture(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn with_dimension(mut self, dimension: usize) -> Self {
        self.embedder = StubEmbedder::new(dimension);
        self
    }

    /// Number of `complete` calls served so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    /// Whether a request of `kind` can never fall through every rule.
    pub fn covers(&self, kind: RequestKind) -> bool {
        self.rules
            .iter()
            .any(|r| r.kind.accepts(kind) && matches!(r.matcher, Matcher::Always))
    }

    /// Whether some rule answers `req`, without counting a call.
    pub fn matches(&self, req: &ModelRequest) -> bool {
        self.lookup(req).is_ok()
    }

    fn lookup(&self, req: &ModelRequest) -> Result<MockResponse, GatewayError> {
        let input = req.latest_user_message();
        let lowered = input.to_lowercase();
        for rule in self.rules.iter().filter(|r| r.kind.accepts(req.kind)) {
            match &rule.matcher {
                Matcher::Always => return Ok(rule.response.clone()),
                Matcher::Contains(s) if lowered.contains(s.as_str()) => return Ok(rule.response.clone()),
                Matcher::Regex(re) => {
                    if let Some(caps) = re.captures(input) {
                        return Ok(expand_response(&rule.response, &caps));
                    }
                }
                Matcher::Contains(_) => {}
            }
        }
        Err(GatewayError::Fixture(format!(
            "no rule matched {:?} request {:?}",
            req.kind,
            truncate(input, 80)
        )))
    }
}

pub(crate) fn parse_rules(text: &str) -> Result<Vec<MockRule>, GatewayError> {
    let mut rules = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') || t.starts_with("//") {
            continue;
        }
        let rule: MockRule =
            serde_json::from_str(t).map_err(|e| GatewayError::Fixture(format!("line {}: {e}", n + 1)))?;
        rules.push(rule);
    }
    Ok(rules)
}

fn truncate(s: &str, n: usize) -> String {
    s.chars().take(n).collect()
}

fn expand(template: &str, caps: &Captures<'_>) -> String {
    let mut out = String::new();
    caps.expand(template, &mut out);
    out
}

fn expand_value(v: &Value, caps: &Captures<'_>) -> Value {
    match v {
        Value::String(s) => Value::String(expand(s, caps)),
        Value::Array(items) => Value::Array(items.iter().map(|i| expand_value(i, caps)).collect()),
        Value::Object(map) => Value::Object(map.iter().map(|(k, v)| (k.clone(), expand_value(v, caps))).collect()),
        other => other.clone(),
    }
}

fn expand_response(r: &MockResponse, caps: &Captures<'_>) -> MockResponse {
    match r {
        MockResponse::Text(t) => MockResponse::Text(expand(t, caps)),
        MockResponse::Structured(v) => MockResponse::Structured(expand_value(v, caps)),
        MockResponse::Fail(f) => MockResponse::Fail(f.clone()),
    }
}

impl Gateway for ScriptedMock {
    fn complete(&self, req: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        req.validate()?;
        self.calls.fetch_add(1, Ordering::Relaxed);
        if req.kind == RequestKind::Embed {
            let e = self.embedder.embed(req.latest_user_message())?;
            return Ok(ModelResponse::Structured(serde_json::to_value(e.as_slice()).expect("floats")));
        }
        let response = match self.lookup(req)? {
            MockResponse::Fail(f) => {
                return Err(match f.as_str() {
                    "timeout" => GatewayError::ProviderTimeout {
                        attempts: req.max_retries + 1,
                    },
                    "unavailable" => GatewayError::Provider {
                        status: Some(503),
                        message: "scripted unavailability".into(),
                    },
                    other => GatewayError::Provider {
                        status: None,
                        message: other.to_string(),
                    },
                })
            }
            MockResponse::Text(t) if req.kind == RequestKind::Structured => ModelResponse::Text(t).into_structured()?,
            MockResponse::Text(t) => return Ok(ModelResponse::Text(t)),
            MockResponse::Structured(v) if req.kind == RequestKind::Structured => v,
            MockResponse::Structured(v) => return Ok(ModelResponse::Text(v.to_string())),
        };
        check_structured(req, &response)?;
        Ok(ModelResponse::Structured(response))
    }

    fn embed(&self, text: &str) -> Result<Embedding, GatewayError> {
        self.embedder.embed(text)
    }

    fn dimension(&self) -> usize {
        self.embedder.dimension
    }

    fn supports_vision(&self) -> bool {
        self.rules.iter().any(|r| r.kind == RuleKind::Vision)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ChatMessage;
    use serde_json::json;

    fn mock(lines: &str) -> ScriptedMock {
        ScriptedMock::parse(lines).unwrap()
    }

    #[test]
    fn contains_rule_returns_exact_text() {
        let m = mock(
            r#"{"kind":"chat","match":{"contains":"favorite color"},"respond":"Your favorite color is blue!"}
{"kind":"any","match":{"always":true},"respond":"default"}"#,
        );
        let r = m.complete(&ModelRequest::chat("", "What is my Favorite Color?")).unwrap();
        assert_eq!(r, ModelResponse::Text("Your favorite color is blue!".into()));
        let r = m.complete(&ModelRequest::chat("", "hello")).unwrap();
        assert_eq!(r, ModelResponse::Text("default".into()));
    }

    #[test]
    fn first_match_wins_and_kind_filters() {
        let m = mock(
            r#"{"kind":"structured","match":{"contains":"x"},"respond_structured":{"n":1}}
{"kind":"chat","match":{"contains":"x"},"respond":"chat-x"}
{"kind":"any","match":{"contains":"x"},"respond":"late"}
{"kind":"any","match":{"always":true},"respond":"d"}"#,
        );
        assert_eq!(m.complete(&ModelRequest::chat("", "x")).unwrap(), ModelResponse::Text("chat-x".into()));
        let s = ModelRequest::structured("", vec![ChatMessage::user("x")], json!({"type":"object"}));
        assert_eq!(m.complete(&s).unwrap(), ModelResponse::Structured(json!({"n":1})));
        assert_eq!(m.calls(), 2);
    }

    #[test]
    fn regex_captures_expand_into_structured_strings() {
        let m = mock(
            r#"{"kind":"structured","match":{"regex":"favorite (\\w+) is (\\w+)"},"respond_structured":{"fact":"User's favorite $1 is $2","n":3}}
{"kind":"any","match":{"always":true},"respond":"{}"}"#,
        );
        let req = ModelRequest::structured("", vec![ChatMessage::user("my favorite food is ramen")], json!({}));
        assert_eq!(
            m.complete(&req).unwrap(),
            ModelResponse::Structured(json!({"fact":"User's favorite food is ramen","n":3}))
        );
    }

    #[test]
    fn unmatched_input_without_default_is_a_fixture_error() {
        let m = mock(r#"{"kind":"chat","match":{"contains":"a"},"respond":"b"}"#);
        assert!(matches!(m.complete(&ModelRequest::chat("", "zzz")), Err(GatewayError::Fixture(_))));
        assert!(!m.matches(&ModelRequest::chat("", "zzz")));
        assert!(m.matches(&ModelRequest::chat("", "A")));
    }

    #[test]
    fn unmatched_kind_fails_loudly() {
        let m = mock(r#"{"kind":"chat","match":{"always":true},"respond":"d"}"#);
        let req = ModelRequest::structured("", vec![ChatMessage::user("q")], json!({}));
        assert!(matches!(m.complete(&req), Err(GatewayError::Fixture(_))));
        assert!(m.covers(RequestKind::Chat));
        assert!(!m.covers(RequestKind::Structured));
    }

    #[test]
    fn structured_responses_are_schema_checked() {
        let m = mock(
            r#"{"kind":"structured","match":{"contains":"bad"},"respond":"not json"}
{"kind":"structured","match":{"always":true},"respond_structured":{"a":"x"}}"#,
        );
        let schema = json!({"type":"object","required":["b"]});
        let req = ModelRequest::structured("", vec![ChatMessage::user("ok")], schema.clone());
        assert!(matches!(m.complete(&req), Err(GatewayError::SchemaViolation(_))));
        let req = ModelRequest::structured("", vec![ChatMessage::user("bad")], schema);
        assert!(matches!(m.complete(&req), Err(GatewayError::SchemaViolation(_))));
    }

    #[test]
    fn scripted_failures() {
        let m = mock(
            r#"{"kind":"chat","match":{"contains":"slow"},"fail":"timeout"}
{"kind":"chat","match":{"always":true},"fail":"unavailable"}"#,
        );
        assert_eq!(
            m.complete(&ModelRequest::chat("", "slow")).unwrap_err(),
            GatewayError::ProviderTimeout { attempts: 3 }
        );
        assert!(m.complete(&ModelRequest::chat("", "x")).unwrap_err().is_retryable());
    }

    #[test]
    fn embed_uses_stub_and_rejects_empty() {
        let m = mock(r#"{"kind":"any","match":{"always":true},"respond":"d"}"#);
        assert!(matches!(m.embed(""), Err(GatewayError::InvalidArgument(_))));
        assert!(m.complete(&ModelRequest::embed("")).is_err());
        let a = m.embed("blue").unwrap();
        assert_eq!(a, m.embed("blue").unwrap());
        assert!(a.is_unit());
    }

    #[test]
    fn rule_needs_exactly_one_response() {
        let e = ScriptedMock::parse(r#"{"kind":"chat","match":{"always":true},"respond":"a","fail":"timeout"}"#);
        assert!(e.is_err());
    }
}
