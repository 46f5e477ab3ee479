//! Declarative scenarios: a roster, toggles, a scripted conversation split
//! into sessions, and a mock fixture. Running one yields the timeline, the
//! transcript and objective metrics.

pub mod conditions;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::coordinator::{
    scorer_prompt, snapshot_all, CoordinationDecision, GatewayScorer, RuleScorer, Scorer, Threshold,
};
use crate::error::{ConfigError, Error};
use crate::executor::{ClockMode, InteractionEvent, Timeline};
use crate::gateway::{ChatMessage, Gateway, ModelRequest, RequestKind, ScriptedMock};
use crate::identity::{validate_roster, AgentProfile, PersonalityVector, Trait};
use crate::memory::{controller_prompt, MemoryStore, RetrievalResult, WorkingMemory, DEFAULT_TOP_K, DEFAULT_WINDOW};
use crate::perception::{MultimodalInput, ScenePayload, Speaker};
use crate::planner::{build_action_schema, PlannerContext};
use crate::session::{AgentTurn, Session, SessionConfig, TranscriptEntry, TurnOutcome};

pub use conditions::{builtin_conditions, builtin_fixture, builtin_scenario, scenario_ids, Condition};

pub const CONFIG_VERSION: u32 = 1;
pub const BUILTIN_PREFIX: &str = "builtin:";

fn version() -> u32 {
    CONFIG_VERSION
}
fn enabled() -> bool {
    true
}
fn default_window() -> usize {
    DEFAULT_WINDOW
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerChoice {
    #[default]
    Rules,
    Gateway,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptInput {
    #[serde(default)]
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
    /// Per-agent scene descriptions that override `scene` for that agent.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub views: BTreeMap<String, String>,
    /// Substrings expected in some responding agent's speech this turn.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub probes: Vec<String>,
}

impl ScriptInput {
    pub fn say(text: &str) -> Self {
        Self {
            text: text.to_string(),
            scene: None,
            image: None,
            views: BTreeMap::new(),
            probes: Vec::new(),
        }
    }

    pub fn expecting(mut self, probe: &str) -> Self {
        self.probes.push(probe.to_string());
        self
    }

    pub fn to_input(&self, base: Option<&Path>) -> MultimodalInput {
        let mut input = MultimodalInput::utterance(&self.text);
        input.scene = match (&self.image, &self.scene) {
            (Some(img), _) => Some(ScenePayload::Image(resolve(base, img))),
            (None, Some(d)) => Some(ScenePayload::Description(d.clone())),
            (None, None) => None,
        };
        for (agent, d) in &self.views {
            input = input.with_view(agent, ScenePayload::Description(d.clone()));
        }
        input
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptSession {
    pub session_id: String,
    pub inputs: Vec<ScriptInput>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "version")]
    pub v: u32,
    pub scenario_id: String,
    /// Experimental condition this scenario belongs to. A trait name turns
    /// on the high/low pairing check.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<String>,
    pub agents: Vec<AgentProfile>,
    #[serde(default = "enabled")]
    pub coordination_enabled: bool,
    #[serde(default = "enabled")]
    pub longterm_memory_enabled: bool,
    #[serde(default)]
    pub threshold: Threshold,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default)]
    pub clock: ClockMode,
    #[serde(default)]
    pub scorer: ScorerChoice,
    /// Mock fixture: a path relative to the config file, or `builtin:NAME`.
    pub fixture: String,
    pub sessions: Vec<ScriptSession>,
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

fn resolve(base: Option<&Path>, p: &Path) -> PathBuf {
    match base {
        Some(b) if p.is_relative() => b.join(p),
        _ => p.to_path_buf(),
    }
}

impl ScenarioConfig {
    /// Parses and validates a config document. Errors name the failing field.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ScenarioConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            if path == "." {
                ConfigError::Parse(inner.to_string())
            } else {
                ConfigError::field(path, inner.to_string())
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_json(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.v != CONFIG_VERSION {
            return Err(ConfigError::field("v", format!("unsupported version {}", self.v)));
        }
        if self.scenario_id.trim().is_empty() {
            return Err(ConfigError::field("scenario_id", "must not be empty"));
        }
        let agents: Vec<AgentProfile> = self.agents.iter().cloned().map(AgentProfile::normalized).collect();
        validate_roster(&agents).map_err(ConfigError::from)?;
        if self.window == 0 {
            return Err(ConfigError::field("window", "must be at least 1"));
        }
        if self.fixture.trim().is_empty() {
            return Err(ConfigError::field("fixture", "must not be empty"));
        }
        if let Some(name) = self.fixture.strip_prefix(BUILTIN_PREFIX) {
            if builtin_fixture(name).is_none() {
                return Err(ConfigError::field("fixture", format!("no builtin fixture {name:?}")));
            }
        }
        if self.sessions.is_empty() {
            return Err(ConfigError::field("sessions", "at least one session is required"));
        }
        let ids: HashSet<&str> = agents.iter().map(|a| a.agent_id.as_str()).collect();
        let mut seen = HashSet::new();
        for (i, s) in self.sessions.iter().enumerate() {
            let at = |f: &str| format!("sessions[{i}].{f}");
            if s.session_id.trim().is_empty() {
                return Err(ConfigError::field(at("session_id"), "must not be empty"));
            }
            if !seen.insert(s.session_id.as_str()) {
                return Err(ConfigError::field(at("session_id"), format!("duplicate session id {:?}", s.session_id)));
            }
            if s.inputs.is_empty() {
                return Err(ConfigError::field(at("inputs"), "at least one input is required"));
            }
            for (j, input) in s.inputs.iter().enumerate() {
                let at = |f: &str| format!("sessions[{i}].inputs[{j}].{f}");
                if input.scene.is_some() && input.image.is_some() {
                    return Err(ConfigError::field(at("image"), "give either scene or image, not both"));
                }
                let has_scene = input.scene.as_deref().is_some_and(|d| !d.trim().is_empty())
                    || input.image.is_some()
                    || input.views.values().any(|d| !d.trim().is_empty());
                if input.text.trim().is_empty() && !has_scene {
                    return Err(ConfigError::field(at("text"), "input has neither speech nor scene"));
                }
                if let Some(agent) = input.views.keys().find(|k| !ids.contains(k.as_str())) {
                    return Err(ConfigError::field(at("views"), format!("unknown agent {agent:?}")));
                }
                if input.probes.iter().any(|p| p.trim().is_empty()) {
                    return Err(ConfigError::field(at("probes"), "probes must not be empty"));
                }
            }
        }
        if let Some(t) = self.condition.as_deref().and_then(Trait::parse) {
            check_personality_pairing(t, &agents)?;
        }
        Ok(())
    }

    pub fn agents(&self) -> Vec<AgentProfile> {
        self.agents.iter().cloned().map(AgentProfile::normalized).collect()
    }

    pub fn session_config(&self) -> SessionConfig {
        SessionConfig {
            coordination_enabled: self.coordination_enabled,
            longterm_memory_enabled: self.longterm_memory_enabled,
            threshold: self.threshold,
            window: self.window,
            top_k: DEFAULT_TOP_K,
            clock: self.clock,
        }
    }

    pub fn probe_count(&self) -> usize {
        self.sessions.iter().flat_map(|s| &s.inputs).map(|i| i.probes.len()).sum()
    }

    /// Fixture rules as text, from the embedded set or from disk.
    pub fn fixture_text(&self) -> Result<String, ConfigError> {
        if let Some(name) = self.fixture.strip_prefix(BUILTIN_PREFIX) {
            return builtin_fixture(name)
                .map(str::to_string)
                .ok_or_else(|| ConfigError::field("fixture", format!("no builtin fixture {name:?}")));
        }
        let path = resolve(self.base_dir.as_deref(), Path::new(&self.fixture));
        std::fs::read_to_string(&path).map_err(|source| ConfigError::Io { path, source })
    }

    /// Top-level fields whose values differ between two configs.
    pub fn differing_fields(&self, other: &ScenarioConfig) -> Vec<String> {
        let a = serde_json::to_value(self).expect("config serializes");
        let b = serde_json::to_value(other).expect("config serializes");
        let (a, b) = (a.as_object().expect("object"), b.as_object().expect("object"));
        let keys: BTreeSet<&String> = a.keys().chain(b.keys()).collect();
        keys.into_iter().filter(|k| a.get(*k) != b.get(*k)).cloned().collect()
    }
}

/// Exactly two agents: one at level 5 of `target`, the other at level 1,
/// every other trait neutral.
fn check_personality_pairing(target: Trait, agents: &[AgentProfile]) -> Result<(), ConfigError> {
    let [a, b] = agents else {
        return Err(ConfigError::field(
            "agents",
            format!("{target} condition needs exactly two agents, got {}", agents.len()),
        ));
    };
    let high = PersonalityVector::with_single(target, 5);
    let low = PersonalityVector::with_single(target, 1);
    let ok = (a.personality == high && b.personality == low) || (a.personality == low && b.personality == high);
    if ok {
        Ok(())
    } else {
        Err(ConfigError::field(
            "agents",
            format!("{target} condition needs one agent at {target}=5 and one at {target}=1, all other traits 3"),
        ))
    }
}

/// Loads the scenario's fixture and checks, before anything runs, that
/// every request the script will make has an answering rule.
pub fn prepare(config: &ScenarioConfig) -> Result<ScriptedMock, Error> {
    config.validate()?;
    let mock = ScriptedMock::parse(&config.fixture_text()?)
        .map_err(|e| ConfigError::field("fixture", e.to_string()))?;
    preflight(config, &mock)?;
    Ok(mock)
}

/// Walks the script against the fixture. Kinds with a catch-all rule are
/// covered outright; the rest are probed with each input's bare requests.
pub fn preflight(config: &ScenarioConfig, mock: &ScriptedMock) -> Result<(), ConfigError> {
    let agents = config.agents();
    let structured = mock.covers(RequestKind::Structured);
    let vision = mock.covers(RequestKind::Vision);
    if structured && vision {
        return Ok(());
    }
    let mut turn = 0;
    for (i, s) in config.sessions.iter().enumerate() {
        for (j, raw) in s.inputs.iter().enumerate() {
            let at = format!("sessions[{i}].inputs[{j}]");
            let gap = |what: &str| ConfigError::field(at.clone(), format!("fixture has no rule for the {what}"));
            let input = raw.to_input(config.base_dir.as_deref());
            if raw.image.is_some() && !vision {
                let user = format!("[Human] said: {}", input.speech_text.trim());
                if !mock.matches(&ModelRequest::vision("", &user, None)) {
                    return Err(gap("vision request"));
                }
            }
            if structured {
                continue;
            }
            let snaps = snapshot_all(&agents, &input, turn, "", None);
            if config.scorer == ScorerChoice::Gateway && config.coordination_enabled {
                let req = ModelRequest::structured("", vec![ChatMessage::user(scorer_prompt(&snaps))], serde_json::Value::Null);
                if !mock.matches(&req) {
                    return Err(gap("coordinator request"));
                }
            }
            for (agent, snap) in agents.iter().zip(&snaps) {
                let wm = WorkingMemory::new(&s.session_id, config.window);
                let req = ModelRequest::structured(
                    "",
                    vec![ChatMessage::user(controller_prompt(&snap.observation, &wm))],
                    serde_json::Value::Null,
                );
                if !mock.matches(&req) {
                    return Err(gap(&format!("memory controller request of {}", agent.agent_id)));
                }
                let retrieved = RetrievalResult::empty(&snap.observation.text);
                let ctx = PlannerContext {
                    agent_id: &agent.agent_id,
                    observation: &snap.observation,
                    working: &wm,
                    retrieved: &retrieved,
                    persona: &snap.persona,
                    capabilities: &agent.capabilities,
                };
                let schema = build_action_schema(&agent.capabilities).unwrap_or(serde_json::Value::Null);
                if !mock.matches(&ModelRequest::structured("", vec![ChatMessage::user(ctx.prompt())], schema)) {
                    return Err(gap(&format!("planner request of {}", agent.agent_id)));
                }
            }
            turn += 1;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Probe {
    pub session_id: String,
    pub turn_index: u64,
    pub expected: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overlap_count: u64,
    pub turn_attribution: BTreeMap<String, u64>,
    pub recall_hits: u64,
    pub recall_probes: u64,
    /// Turns on which nobody reached τ and the top scorer was chosen.
    pub fallback_turns: u64,
    /// Agent turns that ended in the planner's fallback policy.
    pub planning_failures: u64,
}

impl MetricsReport {
    pub fn recall_rate(&self) -> Option<f64> {
        (self.recall_probes > 0).then(|| self.recall_hits as f64 / self.recall_probes as f64)
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<20} {}", "overlap_count", self.overlap_count);
        let _ = writeln!(out, "{:<20} {}/{}", "recall", self.recall_hits, self.recall_probes);
        let _ = writeln!(out, "{:<20} {}", "fallback_turns", self.fallback_turns);
        let _ = writeln!(out, "{:<20} {}", "planning_failures", self.planning_failures);
        for (agent, n) in &self.turn_attribution {
            let _ = writeln!(out, "{:<20} {}", format!("turns[{agent}]"), n);
        }
        out
    }
}

/// Unordered agent pairs, per turn, whose Speak intervals intersect with
/// positive length.
pub fn overlapping_pairs(events: &[InteractionEvent]) -> BTreeSet<(u64, String, String)> {
    let mut by_turn: BTreeMap<u64, Vec<&InteractionEvent>> = BTreeMap::new();
    for e in events.iter().filter(|e| e.is_speak() && e.end_ms > e.start_ms) {
        by_turn.entry(e.turn_index).or_default().push(e);
    }
    let mut pairs = BTreeSet::new();
    for (turn, mut evs) in by_turn {
        evs.sort_by_key(|e| (e.start_ms, e.end_ms));
        for (i, a) in evs.iter().enumerate() {
            // Sorted by start: once b starts at or after a ends, so do the rest.
            for b in evs[i + 1..].iter().take_while(|b| b.start_ms < a.end_ms) {
                if a.agent_id != b.agent_id {
                    let (x, y) = if a.agent_id < b.agent_id { (a, b) } else { (b, a) };
                    pairs.insert((turn, x.agent_id.clone(), y.agent_id.clone()));
                }
            }
        }
    }
    pairs
}

/// Pure function of the run's artifacts.
pub fn compute_metrics(
    events: &[InteractionEvent],
    transcript: &[TranscriptEntry],
    probes: &[Probe],
    decisions: &[CoordinationDecision],
    turns: &[AgentTurn],
) -> MetricsReport {
    let mut attribution = BTreeMap::new();
    let taken: BTreeSet<(&str, u64)> = events.iter().map(|e| (e.agent_id.as_str(), e.turn_index)).collect();
    for (agent, _) in taken {
        *attribution.entry(agent.to_string()).or_insert(0) += 1;
    }
    let recall_hits = probes
        .iter()
        .filter(|p| {
            let want = p.expected.to_lowercase();
            transcript.iter().any(|t| {
                matches!(t.speaker, Speaker::Agent(_))
                    && t.turn_index == p.turn_index
                    && t.session_id == p.session_id
                    && t.text.to_lowercase().contains(&want)
            })
        })
        .count() as u64;
    MetricsReport {
        overlap_count: overlapping_pairs(events).len() as u64,
        turn_attribution: attribution,
        recall_hits,
        recall_probes: probes.len() as u64,
        fallback_turns: decisions.iter().filter(|d| d.fallback_used).count() as u64,
        planning_failures: turns.iter().filter(|t| t.fallback_used).count() as u64,
    }
}

#[derive(Debug, Default, Clone)]
pub struct RunOptions {
    /// Persist long-term memory here instead of in process memory.
    pub data_dir: Option<PathBuf>,
    pub prompt_dir: Option<PathBuf>,
}

#[derive(Debug)]
pub struct ScenarioRun {
    pub scenario_id: String,
    pub timeline: Timeline,
    pub transcript: Vec<TranscriptEntry>,
    pub decisions: Vec<CoordinationDecision>,
    pub outcomes: Vec<TurnOutcome>,
    pub probes: Vec<Probe>,
    pub metrics: MetricsReport,
}

pub const TIMELINE_FILE: &str = "timeline.jsonl";
pub const TRANSCRIPT_FILE: &str = "transcript.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const DECISIONS_FILE: &str = "decisions.jsonl";

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

impl ScenarioRun {
    pub fn transcript_jsonl(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for t in &self.transcript {
            serde_json::to_writer(&mut out, t).expect("transcript serializes");
            out.push(b'\n');
        }
        out
    }

    /// Writes timeline, transcript, metrics and decisions into `dir`.
    pub fn write_artifacts(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut tl = std::io::BufWriter::new(std::fs::File::create(dir.join(TIMELINE_FILE))?);
        self.timeline.write_jsonl(&mut tl)?;
        tl.flush()?;
        std::fs::write(dir.join(TRANSCRIPT_FILE), self.transcript_jsonl())?;
        let mut metrics = serde_json::to_vec_pretty(&self.metrics)?;
        metrics.push(b'\n');
        std::fs::write(dir.join(METRICS_FILE), metrics)?;
        write_jsonl(&dir.join(DECISIONS_FILE), &self.decisions)
    }
}

/// Loads the fixture, runs the pre-flight walk, and runs the scenario.
pub fn run_scenario(config: &ScenarioConfig) -> Result<ScenarioRun, Error> {
    let mock = prepare(config)?;
    run_scenario_on(config, Arc::new(mock), &RunOptions::default())
}

/// Runs the script against an already prepared gateway.
pub fn run_scenario_on(config: &ScenarioConfig, gateway: Arc<dyn Gateway>, opts: &RunOptions) -> Result<ScenarioRun, Error> {
    config.validate()?;
    let memory = Arc::new(match &opts.data_dir {
        Some(dir) => MemoryStore::open(dir, gateway.clone())?,
        None => MemoryStore::in_memory(gateway.clone()),
    });
    let scorer: Box<dyn Scorer> = match config.scorer {
        ScorerChoice::Rules => Box::new(RuleScorer),
        ScorerChoice::Gateway => Box::new(GatewayScorer::new(gateway.clone())),
    };
    let first = &config.sessions[0].session_id;
    let mut session = Session::new(first, config.agents(), gateway, memory, scorer, config.session_config())?;
    if let Some(dir) = &opts.prompt_dir {
        session.dump_prompts_to(dir);
    }

    let mut outcomes = Vec::new();
    let mut probes = Vec::new();
    for (i, s) in config.sessions.iter().enumerate() {
        if i > 0 {
            session.reset(&s.session_id)?;
        }
        for raw in &s.inputs {
            let outcome = session.handle(&raw.to_input(config.base_dir.as_deref()))?;
            probes.extend(raw.probes.iter().map(|p| Probe {
                session_id: s.session_id.clone(),
                turn_index: outcome.turn_index,
                expected: p.clone(),
            }));
            outcomes.push(outcome);
        }
    }

    let turns: Vec<AgentTurn> = outcomes.iter().flat_map(|o| o.turns.iter().cloned()).collect();
    let mut metrics = compute_metrics(
        session.timeline().events(),
        session.transcript(),
        &probes,
        session.decisions(),
        &turns,
    );
    for a in session.agents() {
        metrics.turn_attribution.entry(a.agent_id.clone()).or_insert(0);
    }
    Ok(ScenarioRun {
        scenario_id: config.scenario_id.clone(),
        timeline: session.timeline().clone(),
        transcript: session.transcript().to_vec(),
        decisions: session.decisions().to_vec(),
        outcomes,
        probes,
        metrics,
    })
}
