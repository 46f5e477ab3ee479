//! One conversation with a group of agents: the per-turn cognitive loop
//! plus coordinated or independent dispatch.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::coordinator::{select, snapshot_all, AgentSnapshot, CoordinationDecision, Scorer, Threshold};
use crate::error::{ConfigError, Error};
use crate::executor::{execute, Backend, ClockMode, InteractionEvent, SimulatedBackend, Timeline};
use crate::gateway::Gateway;
use crate::identity::{validate_profile, validate_roster, AgentProfile};
use crate::memory::{
    MemoryStore, RetrievalResult, StoreAction, StoreDecision, WorkingEntry, WorkingMemory, DEFAULT_TOP_K,
    DEFAULT_WINDOW,
};
use crate::perception::{MultimodalInput, Speaker, TurnCounter};
use crate::planner::{plan, ActionPolicy, PlanOutcome, PlannerContext};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub coordination_enabled: bool,
    pub longterm_memory_enabled: bool,
    pub threshold: Threshold,
    pub window: usize,
    pub top_k: usize,
    pub clock: ClockMode,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            coordination_enabled: true,
            longterm_memory_enabled: true,
            threshold: Threshold::default(),
            window: DEFAULT_WINDOW,
            top_k: DEFAULT_TOP_K,
            clock: ClockMode::Simulated,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub session_id: String,
    pub turn_index: u64,
    pub speaker: Speaker,
    pub name: String,
    pub text: String,
}

impl TranscriptEntry {
    pub fn render(&self) -> String {
        format!("{}: {}", self.name, self.text)
    }
}

/// What one agent did in one turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTurn {
    pub agent_id: String,
    pub turn_index: u64,
    pub policy: ActionPolicy,
    pub attempts: u32,
    pub fallback_used: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planning_failure: Option<String>,
    pub events: Vec<InteractionEvent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub execution_error: Option<String>,
}

impl AgentTurn {
    pub fn speech(&self) -> Option<&str> {
        self.policy.speech()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryActivity {
    pub agent_id: String,
    pub retrieved: Vec<String>,
    pub stored: StoreDecision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnOutcome {
    pub session_id: String,
    pub turn_index: u64,
    pub decision: CoordinationDecision,
    pub turns: Vec<AgentTurn>,
    pub memory: Vec<MemoryActivity>,
    pub transcript_delta: Vec<TranscriptEntry>,
}

impl TurnOutcome {
    pub fn speeches(&self) -> impl Iterator<Item = &str> {
        self.turns.iter().filter_map(AgentTurn::speech)
    }
}

pub struct Session {
    agents: Vec<AgentProfile>,
    gateway: Arc<dyn Gateway>,
    memory: Arc<MemoryStore>,
    scorer: Box<dyn Scorer>,
    config: SessionConfig,
    session_id: String,
    working: IndexMap<String, WorkingMemory>,
    backends: HashMap<String, Box<dyn Backend>>,
    transcript: Vec<TranscriptEntry>,
    timeline: Timeline,
    decisions: Vec<CoordinationDecision>,
    last_retrieval: HashMap<String, RetrievalResult>,
    turns: TurnCounter,
    prompt_dir: Option<PathBuf>,
}

impl Session {
    /// Validates the roster and registers every agent's memory namespace.
    pub fn new(
        session_id: &str,
        agents: Vec<AgentProfile>,
        gateway: Arc<dyn Gateway>,
        memory: Arc<MemoryStore>,
        scorer: Box<dyn Scorer>,
        config: SessionConfig,
    ) -> Result<Self, Error> {
        if agents.is_empty() {
            return Err(ConfigError::field("agents", "at least one agent is required").into());
        }
        if config.window == 0 {
            return Err(ConfigError::field("window", "must be at least 1").into());
        }
        if config.top_k == 0 {
            return Err(ConfigError::field("top_k", "must be at least 1").into());
        }
        let agents: Vec<AgentProfile> = agents.into_iter().map(AgentProfile::normalized).collect();
        for (i, a) in agents.iter().enumerate() {
            validate_profile(a).map_err(|v| {
                let mut e = ConfigError::from(v);
                if let ConfigError::Field { field, .. } = &mut e {
                    *field = format!("agents[{i}].{field}");
                }
                e
            })?;
        }
        validate_roster(&agents).map_err(ConfigError::from)?;
        let mut working = IndexMap::new();
        let mut backends: HashMap<String, Box<dyn Backend>> = HashMap::new();
        for a in &agents {
            memory.register(&a.memory_namespace)?;
            memory.set_longterm_enabled(&a.memory_namespace, config.longterm_memory_enabled)?;
            working.insert(a.agent_id.clone(), WorkingMemory::new(session_id, config.window));
            backends.insert(a.agent_id.clone(), Box::new(SimulatedBackend));
        }
        Ok(Self {
            agents,
            gateway,
            memory,
            scorer,
            config,
            session_id: session_id.to_string(),
            working,
            backends,
            transcript: Vec::new(),
            timeline: Timeline::new(config.clock),
            decisions: Vec::new(),
            last_retrieval: HashMap::new(),
            turns: TurnCounter::default(),
            prompt_dir: None,
        })
    }

    /// Writes each planner prompt and schema under `dir`.
    pub fn dump_prompts_to(&mut self, dir: impl Into<PathBuf>) {
        self.prompt_dir = Some(dir.into());
    }

    pub fn set_backend(&mut self, agent_id: &str, backend: Box<dyn Backend>) -> Result<(), ConfigError> {
        match self.backends.get_mut(agent_id) {
            Some(slot) => {
                *slot = backend;
                Ok(())
            }
            None => Err(ConfigError::field("agent_id", format!("unknown agent {agent_id:?}"))),
        }
    }

    pub fn agents(&self) -> &[AgentProfile] {
        &self.agents
    }

    pub fn agent(&self, agent_id: &str) -> Option<&AgentProfile> {
        self.agents.iter().find(|a| a.agent_id == agent_id)
    }

    pub fn config(&self) -> SessionConfig {
        self.config
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn memory(&self) -> &Arc<MemoryStore> {
        &self.memory
    }

    pub fn timeline(&self) -> &Timeline {
        &self.timeline
    }

    pub fn transcript(&self) -> &[TranscriptEntry] {
        &self.transcript
    }

    pub fn decisions(&self) -> &[CoordinationDecision] {
        &self.decisions
    }

    pub fn working(&self, agent_id: &str) -> Option<&WorkingMemory> {
        self.working.get(agent_id)
    }

    pub fn last_retrieval(&self, agent_id: &str) -> Option<&RetrievalResult> {
        self.last_retrieval.get(agent_id)
    }

    pub fn set_coordination(&mut self, enabled: bool) {
        self.config.coordination_enabled = enabled;
    }

    pub fn set_longterm_memory(&mut self, enabled: bool) -> Result<(), Error> {
        for a in &self.agents {
            self.memory.set_longterm_enabled(&a.memory_namespace, enabled)?;
        }
        self.config.longterm_memory_enabled = enabled;
        Ok(())
    }

    /// Starts a new session: every working memory is emptied, long-term
    /// stores are kept. Turn indices keep increasing.
    pub fn reset(&mut self, new_session_id: &str) -> Result<(), Error> {
        for a in &self.agents {
            let wm = self.memory.reset_session(&a.memory_namespace, new_session_id, self.config.window)?;
            self.working.insert(a.agent_id.clone(), wm);
        }
        self.session_id = new_session_id.to_string();
        Ok(())
    }

    fn context_digest(&self) -> String {
        let current: Vec<&TranscriptEntry> =
            self.transcript.iter().filter(|e| e.session_id == self.session_id).collect();
        let skip = current.len().saturating_sub(self.config.window);
        current[skip..].iter().map(|e| e.render()).collect::<Vec<_>>().join("\n")
    }

    /// Runs one human (or agent) input through the full loop.
    pub fn handle(&mut self, input: &MultimodalInput) -> Result<TurnOutcome, Error> {
        input.validate()?;
        let turn = self.turns.advance();
        let digest = self.context_digest();
        let snapshots = snapshot_all(&self.agents, input, turn, &digest, Some(self.gateway.as_ref()));

        let mut delta = Vec::new();
        if !input.speech_text.trim().is_empty() {
            let name = input.speaker.to_string();
            delta.push(self.log_utterance(turn, input.speaker.clone(), name, input.speech_text.trim()));
        }

        let mut memory = Vec::new();
        let mut retrieved = HashMap::new();
        for (agent, snap) in self.agents.iter().zip(&snapshots) {
            let wm = self.working.get_mut(&agent.agent_id).expect("working memory per agent");
            wm.push(WorkingEntry::Observation {
                turn_index: turn,
                text: snap.observation.text.clone(),
            });
            let r = self
                .memory
                .retrieve(&agent.memory_namespace, &snap.observation.text, self.config.top_k)
                .unwrap_or_else(|e| {
                    warn!(agent = %agent.agent_id, error = %e, "retrieval failed, planning without memories");
                    RetrievalResult::empty(&snap.observation.text)
                });
            let stored = if input.speaker == Speaker::Human {
                self.memory.consider_store(&agent.memory_namespace, &snap.observation, wm)?
            } else {
                StoreDecision::skip()
            };
            memory.push(MemoryActivity {
                agent_id: agent.agent_id.clone(),
                retrieved: r.texts().map(str::to_string).collect(),
                stored,
            });
            self.last_retrieval.insert(agent.agent_id.clone(), r.clone());
            retrieved.insert(agent.agent_id.clone(), r);
        }

        let (decision, turns) = if self.config.coordination_enabled {
            self.coordinated(turn, &snapshots, &retrieved)
        } else {
            self.uncoordinated(turn, &snapshots, &retrieved)
        };
        for t in &turns {
            let agent = self.agent(&t.agent_id).expect("selected agent is registered").clone();
            if let Some(text) = t.speech() {
                delta.push(self.log_utterance(turn, Speaker::Agent(agent.agent_id.clone()), agent.display_name, text));
            }
        }
        self.decisions.push(decision.clone());
        Ok(TurnOutcome {
            session_id: self.session_id.clone(),
            turn_index: turn,
            decision,
            turns,
            memory,
            transcript_delta: delta,
        })
    }

    fn log_utterance(&mut self, turn: u64, speaker: Speaker, name: String, text: &str) -> TranscriptEntry {
        let e = TranscriptEntry {
            session_id: self.session_id.clone(),
            turn_index: turn,
            speaker,
            name,
            text: text.to_string(),
        };
        self.transcript.push(e.clone());
        e
    }

    fn plan_for(&self, snap: &AgentSnapshot, retrieved: &RetrievalResult) -> PlanOutcome {
        let agent = self.agent(&snap.agent_id).expect("snapshot of a registered agent");
        let ctx = PlannerContext {
            agent_id: &agent.agent_id,
            observation: &snap.observation,
            working: &self.working[&agent.agent_id],
            retrieved,
            persona: &snap.persona,
            capabilities: &agent.capabilities,
        };
        let out = plan(&ctx, self.gateway.as_ref()).unwrap_or_else(|e| {
            warn!(agent = %agent.agent_id, error = %e, "planner rejected its context, using fallback");
            PlanOutcome {
                policy: ActionPolicy::fallback(&agent.agent_id, snap.observation.turn_index, &agent.capabilities),
                attempts: 0,
                fallback_used: true,
                failure: Some(e.to_string()),
                prompt: String::new(),
                schema: serde_json::Value::Null,
            }
        });
        if let Some(dir) = &self.prompt_dir {
            let stem = dir.join(format!("{:04}-{}", snap.observation.turn_index, agent.agent_id));
            let written = std::fs::create_dir_all(dir)
                .and_then(|_| std::fs::write(stem.with_extension("prompt.txt"), &out.prompt))
                .and_then(|_| {
                    std::fs::write(
                        stem.with_extension("schema.json"),
                        serde_json::to_string_pretty(&out.schema).unwrap_or_default(),
                    )
                });
            if let Err(e) = written {
                warn!(dir = %dir.display(), error = %e, "could not dump prompt");
            }
        }
        out
    }

    fn agent_turn(plan: PlanOutcome, exec: crate::executor::Execution) -> AgentTurn {
        AgentTurn {
            agent_id: plan.policy.agent_id.clone(),
            turn_index: plan.policy.turn_index,
            attempts: plan.attempts,
            fallback_used: plan.fallback_used,
            planning_failure: plan.failure,
            policy: plan.policy,
            events: exec.events,
            execution_error: exec.error.map(|e| e.to_string()),
        }
    }

    fn share_turn(&mut self, turn: u64, agent_id: &str, text: &str) {
        let name = self.agent(agent_id).map(|a| a.display_name.clone()).unwrap_or_default();
        for wm in self.working.values_mut() {
            wm.push(WorkingEntry::AgentTurn {
                turn_index: turn,
                agent_id: agent_id.to_string(),
                display_name: name.clone(),
                text: text.to_string(),
            });
        }
    }

    /// Selected agents plan and execute one after another; each later
    /// responder sees the earlier responses.
    fn coordinated(
        &mut self,
        turn: u64,
        snapshots: &[AgentSnapshot],
        retrieved: &HashMap<String, RetrievalResult>,
    ) -> (CoordinationDecision, Vec<AgentTurn>) {
        let decision = select(turn, self.scorer.score(snapshots), self.config.threshold);
        let mut cursor = self.timeline.horizon_ms();
        let mut turns = Vec::new();
        for id in &decision.selected {
            let snap = snapshots.iter().find(|s| &s.agent_id == id).expect("selected agent has a snapshot");
            let outcome = self.plan_for(snap, &retrieved[id]);
            let caps = self.agent(id).expect("registered").capabilities.clone();
            let backend = self.backends.get_mut(id).expect("backend per agent");
            let exec = execute(&outcome.policy, &caps, backend.as_mut(), &mut self.timeline, &self.session_id, cursor);
            if let Some(e) = &exec.error {
                warn!(agent = %id, error = %e, "execution failed");
            }
            cursor = cursor.max(exec.end_ms);
            if let Some(text) = outcome.policy.speech() {
                self.share_turn(turn, id, &text.to_string());
            }
            turns.push(Self::agent_turn(outcome, exec));
        }
        (decision, turns)
    }

    /// Each agent scores only itself and responds iff its score reaches τ.
    /// All responders start at the same instant.
    fn uncoordinated(
        &mut self,
        turn: u64,
        snapshots: &[AgentSnapshot],
        retrieved: &HashMap<String, RetrievalResult>,
    ) -> (CoordinationDecision, Vec<AgentTurn>) {
        let tau = self.config.threshold;
        let mut scores = IndexMap::new();
        let mut why = Vec::new();
        for s in snapshots {
            let r = self.scorer.score(std::slice::from_ref(s));
            let score = r.scores.get(&s.agent_id).copied().unwrap_or(0.0);
            scores.insert(s.agent_id.clone(), score);
            why.push(r.rationale);
        }
        let selected: Vec<String> = scores
            .iter()
            .filter(|(_, &r)| r >= tau.get())
            .map(|(id, _)| id.clone())
            .collect();
        let decision = CoordinationDecision {
            turn_index: turn,
            scores,
            threshold: tau,
            selected: selected.clone(),
            rationale: format!("independent: {}", why.join(" | ")),
            fallback_used: false,
            coordinated: false,
        };

        let plans: Vec<PlanOutcome> = selected
            .iter()
            .map(|id| {
                let snap = snapshots.iter().find(|s| &s.agent_id == id).expect("snapshot");
                self.plan_for(snap, &retrieved[id])
            })
            .collect();
        let start = self.timeline.horizon_ms();
        let session_id = self.session_id.clone();
        let mut execs = Vec::with_capacity(plans.len());
        if self.config.clock == ClockMode::RealTime {
            let caps: Vec<_> = plans
                .iter()
                .map(|p| self.agent(&p.policy.agent_id).expect("registered").capabilities.clone())
                .collect();
            let mut forks: Vec<Timeline> = plans.iter().map(|_| self.timeline.fork()).collect();
            let mut backends: Vec<(String, Box<dyn Backend>)> = plans
                .iter()
                .map(|p| {
                    let id = p.policy.agent_id.clone();
                    let b = self.backends.remove(&id).expect("backend per agent");
                    (id, b)
                })
                .collect();
            let results: Vec<_> = std::thread::scope(|scope| {
                let handles: Vec<_> = plans
                    .iter()
                    .zip(caps.iter())
                    .zip(backends.iter_mut())
                    .zip(forks.iter_mut())
                    .map(|(((p, c), (_, b)), tl)| {
                        let sid = session_id.as_str();
                        scope.spawn(move || execute(&p.policy, c, b.as_mut(), tl, sid, start))
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("executor thread panicked")).collect()
            });
            for (id, b) in backends {
                self.backends.insert(id, b);
            }
            for mut exec in results {
                exec.events = self.timeline.absorb(exec.events);
                execs.push(exec);
            }
        } else {
            for p in &plans {
                let id = &p.policy.agent_id;
                let caps = self.agent(id).expect("registered").capabilities.clone();
                let backend = self.backends.get_mut(id).expect("backend per agent");
                execs.push(execute(&p.policy, &caps, backend.as_mut(), &mut self.timeline, &session_id, start));
            }
        }

        let mut turns = Vec::new();
        for (p, exec) in plans.into_iter().zip(execs) {
            if let Some(text) = p.policy.speech() {
                let text = text.to_string();
                self.share_turn(turn, &p.policy.agent_id.clone(), &text);
            }
            turns.push(Self::agent_turn(p, exec));
        }
        (decision, turns)
    }

    /// Records of `agent_id`'s long-term store with their similarity to the
    /// agent's most recent retrieval query.
    pub fn memory_view(&self, agent_id: &str) -> Result<Vec<(crate::memory::MemoryRecord, Option<f64>)>, Error> {
        let agent = self
            .agent(agent_id)
            .ok_or_else(|| ConfigError::field("agent_id", format!("unknown agent {agent_id:?}")))?;
        let records = self.memory.records(&agent.memory_namespace)?;
        let query = self.last_retrieval.get(agent_id).map(|r| r.query_text.clone());
        let q = match query {
            Some(q) if !q.trim().is_empty() => self.memory.embedder().embed(&q).ok(),
            _ => None,
        };
        Ok(records
            .into_iter()
            .map(|r| {
                let s = q.as_ref().map(|q| q.cosine(&r.embedding));
                (r, s)
            })
            .collect())
    }

    /// Count of stored records per tier action, for reporting.
    pub fn stored_count(outcomes: &[TurnOutcome]) -> usize {
        outcomes
            .iter()
            .flat_map(|o| &o.memory)
            .filter(|m| m.stored.action != StoreAction::Skip)
            .count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coordinator::RuleScorer;
    use crate::gateway::ScriptedMock;
    use crate::identity::PersonalityVector;

    const RULES: &str = r#"{"kind":"structured","match":{"regex":"^Memory controller"},"respond_structured":{"action":"skip"}}
{"kind":"structured","match":{"regex":"(?s)Nao-A: [^\\n]+\\n.*Current observation"},"respond_structured":{"steps":[{"kind":"speak","params":{"text":"I heard Nao-A answer first."}}]}}
{"kind":"structured","match":{"always":true},"respond_structured":{"steps":[{"kind":"gesture","params":{"name":"nod"}},{"kind":"speak","params":{"text":"Happy to help with that."}}]}}
{"kind":"any","match":{"always":true},"respond":""}"#;

    fn session(coordinated: bool) -> Session {
        let gw: Arc<dyn Gateway> = Arc::new(ScriptedMock::parse(RULES).unwrap());
        let memory = Arc::new(MemoryStore::in_memory(gw.clone()));
        let agents = vec![
            AgentProfile::new("nao_a", "Nao-A", PersonalityVector::NEUTRAL),
            AgentProfile::new("nao_b", "Nao-B", PersonalityVector::NEUTRAL),
        ];
        let config = SessionConfig {
            coordination_enabled: coordinated,
            ..SessionConfig::default()
        };
        Session::new("s1", agents, gw, memory, Box::new(RuleScorer), config).unwrap()
    }

    fn speak_spans(o: &TurnOutcome) -> Vec<(String, u64, u64)> {
        o.turns
            .iter()
            .flat_map(|t| &t.events)
            .filter(|e| e.is_speak())
            .map(|e| (e.agent_id.clone(), e.start_ms, e.end_ms))
            .collect()
    }

    #[test]
    fn later_responders_see_earlier_responses() {
        let mut s = session(true);
        let o = s.handle(&MultimodalInput::utterance("Hello everyone")).unwrap();
        assert_eq!(o.decision.selected, ["nao_a", "nao_b"]);
        assert_eq!(o.turns[0].speech(), Some("Happy to help with that."));
        assert_eq!(o.turns[1].speech(), Some("I heard Nao-A answer first."));
        let spans = speak_spans(&o);
        let a_last = o.turns[0].events.last().unwrap().end_ms;
        assert!(a_last <= o.turns[1].events[0].start_ms);
        assert!(spans[0].2 <= spans[1].1);
        assert_eq!(o.transcript_delta.len(), 3);
    }

    #[test]
    fn single_selection_is_one_turn() {
        let mut s = session(true);
        let o = s.handle(&MultimodalInput::utterance("Nao-B, please stay quiet. Nao-A, hi!")).unwrap();
        // Nao-B scores 0.1, Nao-A 0.9.
        assert_eq!(o.decision.selected, ["nao_a"]);
        assert_eq!(o.turns.len(), 1);
    }

    #[test]
    fn uncoordinated_responders_overlap() {
        let mut s = session(false);
        let o = s.handle(&MultimodalInput::utterance("Hello everyone")).unwrap();
        assert!(!o.decision.coordinated);
        let spans = speak_spans(&o);
        assert_eq!(spans.len(), 2);
        assert!(spans[0].1 < spans[1].2 && spans[1].1 < spans[0].2);
        // Neither saw the other's answer.
        assert!(o.speeches().all(|t| t == "Happy to help with that."));
    }

    #[test]
    fn turn_indices_increase_across_resets() {
        let mut s = session(true);
        let a = s.handle(&MultimodalInput::utterance("Hi")).unwrap().turn_index;
        s.reset("s2").unwrap();
        assert!(s.working("nao_a").unwrap().is_empty());
        let b = s.handle(&MultimodalInput::utterance("Hi again")).unwrap();
        assert!(b.turn_index > a);
        assert_eq!(b.session_id, "s2");
    }

    #[test]
    fn invalid_roster_is_rejected() {
        let gw: Arc<dyn Gateway> = Arc::new(ScriptedMock::parse(RULES).unwrap());
        let memory = Arc::new(MemoryStore::in_memory(gw.clone()));
        let mut bad = AgentProfile::new("a", "A", PersonalityVector::NEUTRAL);
        bad.personality.extraversion = 6;
        let err = Session::new("s", vec![bad], gw.clone(), memory.clone(), Box::new(RuleScorer), SessionConfig::default())
            .err()
            .unwrap();
        assert!(err.to_string().contains("agents[0].personality.extraversion"), "{err}");
        let dup = vec![
            AgentProfile::new("a", "A", PersonalityVector::NEUTRAL),
            AgentProfile::new("a", "B", PersonalityVector::NEUTRAL),
        ];
        assert!(Session::new("s", dup, gw, memory, Box::new(RuleScorer), SessionConfig::default()).is_err());
    }
}
