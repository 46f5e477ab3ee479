//! Session API payloads. Every response carries `v: 1`; request bodies may
//! omit `v` but must not name another version.

use polyphony_core::coordinator::CoordinationDecision;
use polyphony_core::executor::InteractionEvent;
use polyphony_core::harness::overlapping_pairs;
use polyphony_core::identity::{AgentProfile, PersonalityVector};
use polyphony_core::memory::{MemoryRecord, Tier};
use polyphony_core::session::{TranscriptEntry, TurnOutcome};
use serde::{Deserialize, Serialize};

pub const API_VERSION: u32 = 1;

fn v1() -> u32 {
    API_VERSION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSummary {
    pub agent_id: String,
    pub display_name: String,
    pub personality: PersonalityVector,
}

impl From<&AgentProfile> for AgentSummary {
    fn from(a: &AgentProfile) -> Self {
        Self {
            agent_id: a.agent_id.clone(),
            display_name: a.display_name.clone(),
            personality: a.personality,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub v: u32,
    pub status: String,
    pub service: String,
    pub version: String,
    pub provider: String,
    pub sessions: usize,
    pub agents: Vec<AgentSummary>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    #[serde(default = "v1")]
    pub v: u32,
    #[serde(default)]
    pub session_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Toggles {
    pub v: u32,
    pub session_id: String,
    pub coordination: bool,
    pub longterm_memory: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub v: u32,
    pub session_id: String,
    pub agents: Vec<AgentSummary>,
    pub threshold: f64,
    pub coordination: bool,
    pub longterm_memory: bool,
    pub turns: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Utterance {
    #[serde(default = "v1")]
    pub v: u32,
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub scene: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnSummary {
    pub agent_id: String,
    pub attempts: u32,
    pub fallback_used: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub speech: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// One handled utterance: the decision first, then what each agent did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnResponse {
    pub v: u32,
    pub session_id: String,
    pub turn_index: u64,
    pub decision: CoordinationDecision,
    pub events: Vec<InteractionEvent>,
    pub transcript_delta: Vec<TranscriptEntry>,
    pub turns: Vec<TurnSummary>,
    /// Agent pairs whose speech overlapped on this turn.
    pub overlaps: Vec<(String, String)>,
}

impl TurnResponse {
    pub fn from_outcome(o: &TurnOutcome) -> Self {
        let mut events: Vec<InteractionEvent> = o.turns.iter().flat_map(|t| t.events.iter().cloned()).collect();
        events.sort_by_key(|e| (e.start_ms, e.event_id));
        let overlaps = overlapping_pairs(&events).into_iter().map(|(_, a, b)| (a, b)).collect();
        Self {
            v: API_VERSION,
            session_id: o.session_id.clone(),
            turn_index: o.turn_index,
            decision: o.decision.clone(),
            events,
            transcript_delta: o.transcript_delta.clone(),
            turns: o
                .turns
                .iter()
                .map(|t| TurnSummary {
                    agent_id: t.agent_id.clone(),
                    attempts: t.attempts,
                    fallback_used: t.fallback_used,
                    speech: t.speech().map(str::to_string),
                    error: t.execution_error.clone(),
                })
                .collect(),
            overlaps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub record_id: String,
    pub tier: Tier,
    pub text: String,
    pub created_at: u64,
    pub session_id: String,
    pub source_turn: u64,
    /// Cosine similarity to the agent's most recent retrieval query.
    pub similarity: Option<f64>,
}

impl MemoryEntry {
    pub fn new(r: MemoryRecord, similarity: Option<f64>) -> Self {
        Self {
            record_id: r.record_id,
            tier: r.tier,
            text: r.text,
            created_at: r.created_at,
            session_id: r.session_id,
            source_turn: r.source_turn,
            similarity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryView {
    pub v: u32,
    pub session_id: String,
    pub agent_id: String,
    pub longterm_memory: bool,
    pub last_query: Option<String>,
    pub records: Vec<MemoryEntry>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToggleRequest {
    #[serde(default = "v1")]
    pub v: u32,
    #[serde(default)]
    pub coordination: Option<bool>,
    #[serde(default)]
    pub longterm_memory: Option<bool>,
}

/// Pushed on a session's event stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StreamEvent {
    Turn(TurnResponse),
    Toggles(Toggles),
}

impl StreamEvent {
    pub fn name(&self) -> &'static str {
        match self {
            StreamEvent::Turn(_) => "turn",
            StreamEvent::Toggles(_) => "toggles",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub v: u32,
    pub error: ErrorBody,
}

impl ApiError {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        Self {
            v: API_VERSION,
            error: ErrorBody {
                code: code.to_string(),
                message: message.into(),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_bodies_default_to_v1() {
        let u: Utterance = serde_json::from_str(r#"{"text": "hi"}"#).unwrap();
        assert_eq!(u.v, 1);
        assert!(serde_json::from_str::<Utterance>(r#"{"text": "hi", "volume": 3}"#).is_err());
        let t: ToggleRequest = serde_json::from_str(r#"{"coordination": false}"#).unwrap();
        assert_eq!((t.coordination, t.longterm_memory), (Some(false), None));
    }

    #[test]
    fn stream_events_are_tagged() {
        let e = StreamEvent::Toggles(Toggles {
            v: 1,
            session_id: "s".into(),
            coordination: true,
            longterm_memory: false,
        });
        let j = serde_json::to_value(&e).unwrap();
        assert_eq!(j["type"], "toggles");
        assert_eq!(j["v"], 1);
    }
}
