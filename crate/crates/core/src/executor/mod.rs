//! Runs validated policies as timed events on a backend and records them
//! on a shared timeline.

pub mod remote;
pub mod wire;

use std::io::{BufRead, Write};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::BackendError;
use crate::identity::{ActionKind, CapabilitySet};
use crate::planner::{ActionPolicy, ActionStep};

pub use remote::{RemoteBackend, StubRobot};
pub use wire::{WireMessage, MAX_FRAME_BYTES};

pub const SPEAK_MS_PER_WORD: u64 = 60;
pub const SPEAK_MIN_MS: u64 = 500;
pub const POSE_MS: u64 = 800;
pub const MOVE_MS_PER_UNIT: f64 = 1000.0;

/// Simulated duration of one step.
pub fn step_duration_ms(step: &ActionStep) -> u64 {
    match step {
        ActionStep::Speak { text } => (SPEAK_MS_PER_WORD * text.split_whitespace().count() as u64).max(SPEAK_MIN_MS),
        ActionStep::Gesture { .. } | ActionStep::Posture { .. } | ActionStep::Head { .. } => POSE_MS,
        ActionStep::Move { magnitude, .. } => (MOVE_MS_PER_UNIT * magnitude).round() as u64,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    #[default]
    Simulated,
    RealTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionEvent {
    pub event_id: u64,
    pub agent_id: String,
    pub step: ActionStep,
    pub start_ms: u64,
    pub end_ms: u64,
    pub session_id: String,
    pub turn_index: u64,
    pub status: EventStatus,
}

impl InteractionEvent {
    pub fn is_speak(&self) -> bool {
        self.step.kind() == ActionKind::Speak
    }
}

/// Append-only event log ordered by `(start_ms, event_id)`.
#[derive(Debug, Clone)]
pub struct Timeline {
    clock: ClockMode,
    events: Vec<InteractionEvent>,
    next_id: u64,
    origin: Instant,
}

impl Timeline {
    pub fn new(clock: ClockMode) -> Self {
        Self {
            clock,
            events: Vec::new(),
            next_id: 1,
            origin: Instant::now(),
        }
    }

    pub fn clock(&self) -> ClockMode {
        self.clock
    }

    /// Milliseconds since the timeline was created (real-time clock only).
    pub fn now_ms(&self) -> u64 {
        self.origin.elapsed().as_millis() as u64
    }

    /// Latest end time recorded so far; 0 when empty.
    pub fn horizon_ms(&self) -> u64 {
        self.events.iter().map(|e| e.end_ms).max().unwrap_or(0)
    }

    /// Records an event and returns it with its assigned id.
    #[allow(clippy::too_many_arguments)]
    pub fn record(
        &mut self,
        agent_id: &str,
        step: ActionStep,
        start_ms: u64,
        end_ms: u64,
        session_id: &str,
        turn_index: u64,
        status: EventStatus,
    ) -> InteractionEvent {
        debug_assert!(end_ms >= start_ms);
        let ev = InteractionEvent {
            event_id: self.next_id,
            agent_id: agent_id.to_string(),
            step,
            start_ms,
            end_ms: end_ms.max(start_ms),
            session_id: session_id.to_string(),
            turn_index,
            status,
        };
        self.next_id += 1;
        let at = self
            .events
            .partition_point(|e| (e.start_ms, e.event_id) <= (ev.start_ms, ev.event_id));
        self.events.insert(at, ev.clone());
        ev
    }

    /// An empty timeline sharing this one's clock and origin, for executing
    /// on another thread. Merge its events back with [`Timeline::absorb`].
    pub fn fork(&self) -> Self {
        Self {
            clock: self.clock,
            events: Vec::new(),
            next_id: 1,
            origin: self.origin,
        }
    }

    /// Re-records events from a fork, assigning ids from this timeline.
    pub fn absorb(&mut self, events: Vec<InteractionEvent>) -> Vec<InteractionEvent> {
        events
            .into_iter()
            .map(|e| self.record(&e.agent_id, e.step, e.start_ms, e.end_ms, &e.session_id, e.turn_index, e.status))
            .collect()
    }

    pub fn events(&self) -> &[InteractionEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> std::io::Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<Vec<InteractionEvent>, String> {
        let mut out = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| e.to_string())?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(|e| format!("line {}: {e}", i + 1))?);
        }
        Ok(out)
    }
}

/// Where policies are physically carried out.
pub trait Backend: Send {
    /// Announces a policy before its steps run.
    fn begin(&mut self, policy: &ActionPolicy) -> Result<(), BackendError>;

    /// Performs step `index` of the announced policy, returning once the
    /// backend acknowledges it.
    fn perform(&mut self, policy: &ActionPolicy, index: usize) -> Result<(), BackendError>;

    /// Whether `perform` itself takes the step's real duration.
    fn paces_itself(&self) -> bool {
        false
    }
}

/// The built-in embodiment: acknowledges everything instantly.
#[derive(Debug, Default, Clone, Copy)]
pub struct SimulatedBackend;

impl Backend for SimulatedBackend {
    fn begin(&mut self, _: &ActionPolicy) -> Result<(), BackendError> {
        Ok(())
    }

    fn perform(&mut self, _: &ActionPolicy, _: usize) -> Result<(), BackendError> {
        Ok(())
    }
}

#[derive(Debug)]
pub struct Execution {
    pub events: Vec<InteractionEvent>,
    /// Time at which the agent's last step finished.
    pub end_ms: u64,
    pub error: Option<BackendError>,
}

/// Executes `policy` step by step from `start_ms` (ignored on a real-time
/// clock). A backend failure marks the failing step, aborts the rest, and is
/// reported in [`Execution::error`].
pub fn execute(
    policy: &ActionPolicy,
    caps: &CapabilitySet,
    backend: &mut dyn Backend,
    timeline: &mut Timeline,
    session_id: &str,
    start_ms: u64,
) -> Execution {
    let real = timeline.clock() == ClockMode::RealTime;
    let mut cursor = if real { timeline.now_ms() } else { start_ms };
    let mut events = Vec::with_capacity(policy.steps.len());
    let mut record = |tl: &mut Timeline, step: &ActionStep, s: u64, e: u64, status| {
        let ev = tl.record(&policy.agent_id, step.clone(), s, e, session_id, policy.turn_index, status);
        events.push(ev);
    };

    let started = match policy.violations(caps).into_iter().next() {
        Some(v) => Err(BackendError::Rejected { step: 0, status: v }),
        None => backend.begin(policy),
    };
    if let Err(e) = started {
        record(timeline, &policy.steps[0], cursor, cursor, EventStatus::Failed);
        return Execution {
            events,
            end_ms: cursor,
            error: Some(e),
        };
    }

    for (i, step) in policy.steps.iter().enumerate() {
        let dur = step_duration_ms(step);
        if let Err(e) = backend.perform(policy, i) {
            let at = if real { timeline.now_ms() } else { cursor };
            record(timeline, step, at, at, EventStatus::Failed);
            return Execution {
                events,
                end_ms: at,
                error: Some(e),
            };
        }
        let end = if real {
            if !backend.paces_itself() {
                std::thread::sleep(Duration::from_millis(dur));
            }
            timeline.now_ms().max(cursor)
        } else {
            cursor + dur
        };
        record(timeline, step, cursor, end, EventStatus::Ok);
        cursor = end;
    }
    Execution {
        events,
        end_ms: cursor,
        error: None,
    }
}
