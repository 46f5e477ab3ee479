//! Multi-agent conversational orchestration: agents with personalities,
//! private memories and capability sets, a coordinator that serializes
//! who speaks, and a scenario harness that measures the result.

pub mod coordinator;
pub mod error;
pub mod executor;
pub mod gateway;
pub mod harness;
pub mod identity;
pub mod memory;
pub mod perception;
pub mod planner;
pub mod schema;
pub mod session;

pub use error::{Error, Result};
pub use coordinator::{select, CoordinationDecision, GatewayScorer, RuleScorer, Scorer, Threshold};
pub use executor::{ClockMode, InteractionEvent, Timeline};
pub use gateway::{Gateway, ModelRequest, ModelResponse, ProviderConfig, ScriptedMock};
pub use harness::{builtin_conditions, builtin_scenario, run_scenario, MetricsReport, ScenarioConfig, ScenarioRun};
pub use identity::{AgentProfile, CapabilitySet, PersonalityVector, Trait};
pub use memory::{MemoryRecord, MemoryStore, RetrievalResult, Tier, WorkingMemory};
pub use perception::{MultimodalInput, Observation, ScenePayload, Speaker};
pub use planner::{ActionPolicy, ActionStep};
pub use session::{Session, SessionConfig, TranscriptEntry, TurnOutcome};
