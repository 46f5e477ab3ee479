//! Model-driven decision on whether an observation becomes a long-term
//! memory.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::warn;

use super::{MemoryStore, Tier, WorkingMemory};
use crate::error::MemoryError;
use crate::gateway::{ChatMessage, ModelRequest};
use crate::perception::Observation;

/// First line of every controller prompt. Fixtures anchor on it.
pub const CONTROLLER_HEADER: &str = "Memory controller";

const CONTROLLER_SYSTEM: &str = "You maintain a robot's long-term memory about the people it talks to. \
Given the latest observation and recent context, decide whether it contains a durable fact about the user \
(store_semantic), a noteworthy event worth remembering (store_episodic), or nothing new (skip). When \
storing, rewrite the content as one short third-person sentence in extracted_text. Skip anything already \
known.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoreAction {
    StoreSemantic,
    StoreEpisodic,
    Skip,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreDecision {
    pub action: StoreAction,
    #[serde(default)]
    pub extracted_text: String,
}

impl StoreDecision {
    pub fn skip() -> Self {
        Self {
            action: StoreAction::Skip,
            extracted_text: String::new(),
        }
    }
}

pub fn controller_schema() -> Value {
    json!({
        "type": "object",
        "properties": {
            "action": {"enum": ["store_semantic", "store_episodic", "skip"]},
            "extracted_text": {"type": "string"}
        },
        "required": ["action"],
        "additionalProperties": false
    })
}

/// The controller's user message. Deterministic in its inputs.
pub fn controller_prompt(observation: &Observation, context: &WorkingMemory) -> String {
    let mut out = format!("{CONTROLLER_HEADER}\nObservation: {}\nRecent context:", observation.text);
    let lines = context.lines();
    if lines.is_empty() {
        out.push_str("\n(none)");
    }
    for line in lines {
        out.push('\n');
        out.push_str(&line);
    }
    out
}

impl MemoryStore {
    /// Asks the model whether `observation` should be remembered and, if so,
    /// appends the extracted text. Gateway and embedding failures degrade
    /// to `Skip`; only caller errors surface.
    pub fn consider_store(
        &self,
        namespace: &str,
        observation: &Observation,
        context: &WorkingMemory,
    ) -> Result<StoreDecision, MemoryError> {
        if observation.text.trim().is_empty() {
            return Err(MemoryError::InvalidArgument("empty observation".into()));
        }
        if !self.longterm_enabled(namespace)? {
            return Ok(StoreDecision::skip());
        }
        let req = ModelRequest::structured(
            CONTROLLER_SYSTEM,
            vec![ChatMessage::user(controller_prompt(observation, context))],
            controller_schema(),
        );
        let decision = match self
            .embedder()
            .complete(&req)
            .and_then(|r| r.into_structured())
            .and_then(|v| {
                serde_json::from_value::<StoreDecision>(v)
                    .map_err(|e| crate::error::GatewayError::SchemaViolation(e.to_string()))
            }) {
            Ok(d) => d,
            Err(e) => {
                warn!(namespace, error = %e, "memory controller failed, skipping store");
                return Ok(StoreDecision::skip());
            }
        };
        let tier = match decision.action {
            StoreAction::StoreSemantic => Tier::Semantic,
            StoreAction::StoreEpisodic => Tier::Episodic,
            StoreAction::Skip => return Ok(decision),
        };
        let text = decision.extracted_text.trim();
        if text.is_empty() {
            return Ok(StoreDecision::skip());
        }
        match self.append(namespace, tier, text, context.session_id(), observation.turn_index) {
            Ok(Some(_)) => Ok(StoreDecision {
                action: decision.action,
                extracted_text: text.to_string(),
            }),
            Ok(None) => Ok(StoreDecision::skip()),
            Err(MemoryError::Provider(e)) => {
                warn!(namespace, error = %e, "embedding failed, skipping store");
                Ok(StoreDecision::skip())
            }
            Err(e) => Err(e),
        }
    }
}
