//! Turns an agent's observation, context, memories and persona into an
//! embodied action policy validated against the agent's capabilities.

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use tracing::warn;

use crate::error::{GatewayError, PlannerError};
use crate::gateway::{ChatMessage, Gateway, ModelRequest};
use crate::identity::{ActionKind, CapabilitySet};
use crate::memory::{RetrievalResult, WorkingEntry, WorkingMemory};
use crate::perception::Observation;

pub const MAX_STEPS: usize = 5;
/// Model calls per plan before falling back: the first try plus one
/// corrective retry.
pub const MAX_ATTEMPTS: u32 = 2;
pub const MEMORY_PREFIX: &str = "You remember: ";
pub const FALLBACK_TEXT: &str = "Sorry, I lost my train of thought. Could you say that again?";

const PLANNER_SYSTEM: &str = "You control an embodied social robot taking part in a group conversation. \
Reply only with a JSON action policy that matches the provided schema.";

const PLAN_INSTRUCTION: &str = "Decide how to respond. Return an ordered list of 1 to 5 actions \
from your capability set, with at most one speak action.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case", deny_unknown_fields)]
pub enum ActionStep {
    Speak { text: String },
    Gesture { name: String },
    Posture { name: String },
    Head { direction: String },
    Move { direction: String, magnitude: f64 },
}

impl ActionStep {
    pub fn speak(text: &str) -> Self {
        ActionStep::Speak { text: text.to_string() }
    }

    pub fn gesture(name: &str) -> Self {
        ActionStep::Gesture { name: name.to_string() }
    }

    pub fn posture(name: &str) -> Self {
        ActionStep::Posture { name: name.to_string() }
    }

    pub fn head(direction: &str) -> Self {
        ActionStep::Head {
            direction: direction.to_string(),
        }
    }

    pub fn movement(direction: &str, magnitude: f64) -> Self {
        ActionStep::Move {
            direction: direction.to_string(),
            magnitude,
        }
    }

    pub fn kind(&self) -> ActionKind {
        match self {
            ActionStep::Speak { .. } => ActionKind::Speak,
            ActionStep::Gesture { .. } => ActionKind::Gesture,
            ActionStep::Posture { .. } => ActionKind::Posture,
            ActionStep::Head { .. } => ActionKind::Head,
            ActionStep::Move { .. } => ActionKind::Move,
        }
    }

    pub fn speech(&self) -> Option<&str> {
        match self {
            ActionStep::Speak { text } => Some(text),
            _ => None,
        }
    }

    /// Why this step is outside `caps`, if it is.
    pub fn violation(&self, caps: &CapabilitySet) -> Option<String> {
        let kind = self.kind();
        if !caps.allows(kind) {
            return Some(format!("{kind} is not in the capability set"));
        }
        let word = match self {
            ActionStep::Speak { text } => {
                if text.trim().is_empty() {
                    return Some("speak text is empty".into());
                }
                let n = text.chars().count();
                if n > caps.max_utterance_chars {
                    return Some(format!("speak text has {n} characters, limit {}", caps.max_utterance_chars));
                }
                return None;
            }
            ActionStep::Move { direction, magnitude } => {
                if !(magnitude.is_finite() && *magnitude > 0.0 && *magnitude <= caps.max_move_magnitude) {
                    return Some(format!("move magnitude {magnitude} outside (0, {}]", caps.max_move_magnitude));
                }
                direction
            }
            ActionStep::Gesture { name } | ActionStep::Posture { name } => name,
            ActionStep::Head { direction } => direction,
        };
        match caps.vocabulary(kind) {
            Some(v) if v.contains(word) => None,
            _ => Some(format!("{kind} parameter {word:?} is not in the vocabulary")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionPolicy {
    pub agent_id: String,
    pub turn_index: u64,
    pub steps: Vec<ActionStep>,
}

impl ActionPolicy {
    /// Checks the structural invariants: 1 to [`MAX_STEPS`] steps, at most
    /// one of them Speak.
    pub fn new(agent_id: &str, turn_index: u64, steps: Vec<ActionStep>) -> Result<Self, PlannerError> {
        if steps.is_empty() || steps.len() > MAX_STEPS {
            return Err(PlannerError::InvalidArgument(format!(
                "policy has {} steps, expected 1 to {MAX_STEPS}",
                steps.len()
            )));
        }
        if steps.iter().filter(|s| s.kind() == ActionKind::Speak).count() > 1 {
            return Err(PlannerError::InvalidArgument("policy has more than one speak step".into()));
        }
        Ok(Self {
            agent_id: agent_id.to_string(),
            turn_index,
            steps,
        })
    }

    pub fn fallback(agent_id: &str, turn_index: u64, caps: &CapabilitySet) -> Self {
        let text: String = FALLBACK_TEXT.chars().take(caps.max_utterance_chars).collect();
        Self {
            agent_id: agent_id.to_string(),
            turn_index,
            steps: vec![ActionStep::Speak { text }],
        }
    }

    pub fn speech(&self) -> Option<&str> {
        self.steps.iter().find_map(ActionStep::speech)
    }

    /// Every violation of the structural invariants and of `caps`.
    pub fn violations(&self, caps: &CapabilitySet) -> Vec<String> {
        let mut out = Vec::new();
        if let Err(PlannerError::InvalidArgument(m)) = ActionPolicy::new(&self.agent_id, self.turn_index, self.steps.clone()) {
            out.push(m);
        }
        for (i, s) in self.steps.iter().enumerate() {
            if let Some(v) = s.violation(caps) {
                out.push(format!("step {i}: {v}"));
            }
        }
        out
    }
}

fn enum_of(words: &std::collections::BTreeSet<String>) -> Value {
    json!({ "enum": words.iter().collect::<Vec<_>>() })
}

fn step_schema(kind: ActionKind, params: Value) -> Value {
    json!({
        "type": "object",
        "properties": {"kind": {"const": kind.name()}, "params": params},
        "required": ["kind", "params"],
        "additionalProperties": false
    })
}

fn params_schema(props: Map<String, Value>) -> Value {
    let required: Vec<&String> = props.keys().collect();
    json!({
        "type": "object",
        "properties": props,
        "required": required,
        "additionalProperties": false
    })
}

/// Structured-output schema accepting exactly the policies `caps` permits.
/// Deterministic: kinds and vocabularies are emitted in sorted order.
pub fn build_action_schema(caps: &CapabilitySet) -> Result<Value, PlannerError> {
    if caps.primitives.is_empty() {
        return Err(PlannerError::InvalidArgument("empty capability set".into()));
    }
    if let Some(v) = caps.violations().first() {
        return Err(PlannerError::InvalidArgument(v.to_string()));
    }
    let mut branches = Vec::new();
    for &kind in &caps.primitives {
        let mut p = Map::new();
        match kind {
            ActionKind::Speak => {
                p.insert(
                    "text".into(),
                    json!({"type": "string", "minLength": 1, "maxLength": caps.max_utterance_chars, "pattern": "\\S"}),
                );
            }
            ActionKind::Gesture | ActionKind::Posture => {
                p.insert("name".into(), enum_of(caps.vocabulary(kind).expect("vocabulary kind")));
            }
            ActionKind::Head => {
                p.insert("direction".into(), enum_of(&caps.head_directions));
            }
            ActionKind::Move => {
                p.insert("direction".into(), enum_of(&caps.move_directions));
                p.insert(
                    "magnitude".into(),
                    json!({"type": "number", "exclusiveMinimum": 0, "maximum": caps.max_move_magnitude}),
                );
            }
        }
        branches.push(step_schema(kind, params_schema(p)));
    }
    Ok(json!({
        "type": "object",
        "properties": {
            "agent_id": {"type": "string"},
            "turn_index": {"type": "integer", "minimum": 0},
            "steps": {
                "type": "array",
                "minItems": 1,
                "maxItems": MAX_STEPS,
                "items": {"oneOf": branches},
                "contains": {"type": "object", "properties": {"kind": {"const": "speak"}}, "required": ["kind"]},
                "minContains": 0,
                "maxContains": 1
            }
        },
        "required": ["steps"],
        "additionalProperties": false
    }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Draft {
    steps: Vec<ActionStep>,
    #[serde(default)]
    #[allow(dead_code)]
    agent_id: Option<String>,
    #[serde(default)]
    #[allow(dead_code)]
    turn_index: Option<u64>,
}

/// Typed validation of a model's policy document, independent of the JSON
/// schema. Returns the parsed steps or the first reason for rejection.
pub fn parse_policy(value: &Value, caps: &CapabilitySet) -> Result<Vec<ActionStep>, String> {
    let draft: Draft = serde_json::from_value(value.clone()).map_err(|e| e.to_string())?;
    let policy = ActionPolicy::new("", 0, draft.steps).map_err(|e| e.to_string())?;
    match policy.violations(caps).into_iter().next() {
        Some(v) => Err(v),
        None => Ok(policy.steps),
    }
}

/// Accepts `value` only if both the schema and the typed check do.
pub fn validate_policy(schema: &Value, value: &Value, caps: &CapabilitySet) -> Result<Vec<ActionStep>, String> {
    crate::schema::validate(schema, value).map_err(|e| e.to_string())?;
    parse_policy(value, caps)
}

pub struct PlannerContext<'a> {
    pub agent_id: &'a str,
    pub observation: &'a Observation,
    pub working: &'a WorkingMemory,
    pub retrieved: &'a RetrievalResult,
    pub persona: &'a str,
    pub capabilities: &'a CapabilitySet,
}

impl PlannerContext<'_> {
    /// The user message sent to the model:
    /// persona, memories, transcript, observation, instruction.
    pub fn prompt(&self) -> String {
        let mut out = String::new();
        out.push_str(self.persona);
        out.push_str("\n\n");
        if !self.retrieved.is_empty() {
            for text in self.retrieved.texts() {
                out.push_str(MEMORY_PREFIX);
                out.push_str(text);
                out.push('\n');
            }
            out.push('\n');
        }
        out.push_str("Conversation so far:\n");
        let lines: Vec<String> = self
            .working
            .entries()
            .filter(|e| !matches!(e, WorkingEntry::Observation { turn_index, .. } if *turn_index == self.observation.turn_index))
            .map(WorkingEntry::render)
            .collect();
        if lines.is_empty() {
            out.push_str("(nothing yet)\n");
        }
        for l in lines {
            out.push_str(&l);
            out.push('\n');
        }
        out.push_str("\nCurrent observation: ");
        out.push_str(&self.observation.text);
        out.push_str("\n\n");
        out.push_str(PLAN_INSTRUCTION);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanOutcome {
    pub policy: ActionPolicy,
    pub attempts: u32,
    pub fallback_used: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    pub prompt: String,
    pub schema: Value,
}

/// Plans one turn. Never fails for model-side problems: schema-invalid
/// output earns one corrective retry, and any remaining failure yields the
/// single-Speak fallback policy.
pub fn plan(ctx: &PlannerContext<'_>, gateway: &dyn Gateway) -> Result<PlanOutcome, PlannerError> {
    let schema = build_action_schema(ctx.capabilities)?;
    if ctx.observation.text.trim().is_empty() {
        return Err(PlannerError::InvalidArgument("empty observation".into()));
    }
    let prompt = ctx.prompt();
    let mut messages = vec![ChatMessage::user(prompt.clone())];
    let mut attempts = 0;
    let failure = loop {
        attempts += 1;
        let req = ModelRequest::structured(PLANNER_SYSTEM, messages.clone(), schema.clone());
        let reason = match gateway.complete(&req).and_then(|r| r.into_structured()) {
            Ok(value) => match validate_policy(&schema, &value, ctx.capabilities) {
                Ok(steps) => {
                    return Ok(PlanOutcome {
                        policy: ActionPolicy::new(ctx.agent_id, ctx.observation.turn_index, steps)?,
                        attempts,
                        fallback_used: false,
                        failure: None,
                        prompt,
                        schema,
                    });
                }
                Err(reason) => reason,
            },
            Err(GatewayError::SchemaViolation(reason)) => reason,
            Err(other) => break other.to_string(),
        };
        if attempts >= MAX_ATTEMPTS {
            break reason;
        }
        messages.push(ChatMessage::user(format!(
            "Your previous reply was rejected: {reason}. Reply again with a policy that satisfies the schema."
        )));
    };
    warn!(agent = ctx.agent_id, attempts, %failure, "planning failed, using fallback policy");
    Ok(PlanOutcome {
        policy: ActionPolicy::fallback(ctx.agent_id, ctx.observation.turn_index, ctx.capabilities),
        attempts,
        fallback_used: true,
        failure: Some(failure),
        prompt,
        schema,
    })
}
