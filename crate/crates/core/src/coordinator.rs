//! Turn-taking: snapshot every agent, score how suitable each is to
//! respond, and select who speaks and in which order.

use std::fmt;
use std::sync::Arc;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::warn;

use crate::error::ConfigError;
use crate::gateway::{ChatMessage, Gateway, ModelRequest};
use crate::identity::AgentProfile;
use crate::perception::{perceive, template_text, MultimodalInput, Observation};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const SCORE_ADDRESSED: f64 = 0.9;
pub const SCORE_DEFAULT: f64 = 0.6;
pub const SCORE_QUIET: f64 = 0.1;

/// Phrases that tell the agents named in the same sentence not to respond.
const QUIET_MARKERS: &[&str] = &[
    "stay quiet",
    "be quiet",
    "keep quiet",
    "stay silent",
    "be silent",
    "don't answer",
    "do not answer",
    "don't respond",
    "do not respond",
    "don't reply",
    "do not reply",
    "hold on",
    "hush",
];

const GROUP_WORDS: &[&str] = &["everyone", "everybody", "all of you", "both of you", "robots", "you two", "you all"];

/// Response threshold τ, strictly inside (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Threshold(f64);

impl Threshold {
    pub fn new(tau: f64) -> Result<Self, ConfigError> {
        if tau > 0.0 && tau < 1.0 {
            Ok(Self(tau))
        } else {
            Err(ConfigError::field("threshold", format!("{tau} is outside (0, 1)")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for Threshold {
    fn default() -> Self {
        Self(DEFAULT_THRESHOLD)
    }
}

impl TryFrom<f64> for Threshold {
    type Error = String;

    fn try_from(v: f64) -> Result<Self, String> {
        Threshold::new(v).map_err(|e| e.to_string())
    }
}

impl From<Threshold> for f64 {
    fn from(t: Threshold) -> f64 {
        t.0
    }
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSnapshot {
    pub agent_id: String,
    pub display_name: String,
    pub observation: Observation,
    pub context_digest: String,
    pub persona: String,
}

/// One snapshot per agent, each from the agent's own perception. An agent
/// whose perception fails gets the template observation instead of being
/// dropped.
pub fn snapshot_all(
    agents: &[AgentProfile],
    input: &MultimodalInput,
    turn_index: u64,
    context_digest: &str,
    gateway: Option<&dyn Gateway>,
) -> Vec<AgentSnapshot> {
    agents
        .iter()
        .map(|a| {
            let observation = perceive(a, input, turn_index, gateway).unwrap_or_else(|e| {
                warn!(agent = %a.agent_id, error = %e, "perception failed, using template");
                Observation {
                    text: template_text(&input.speaker, &input.speech_text, input.scene_for(&a.agent_id)),
                    source: input.clone(),
                    agent_id: a.agent_id.clone(),
                    turn_index,
                    degraded: true,
                }
            });
            AgentSnapshot {
                agent_id: a.agent_id.clone(),
                display_name: a.display_name.clone(),
                observation,
                context_digest: context_digest.to_string(),
                persona: a.persona().unwrap_or_else(|_| format!("You are {}.", a.display_name)),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    /// Scores in snapshot (registration) order, each within [0, 1].
    pub scores: IndexMap<String, f64>,
    pub rationale: String,
}

pub trait Scorer: Send + Sync {
    fn score(&self, snapshots: &[AgentSnapshot]) -> ScoreReport;
}

/// Clamps to [0, 1]; NaN maps to 0.
pub fn clamp_score(x: f64) -> f64 {
    if x.is_nan() {
        0.0
    } else {
        x.clamp(0.0, 1.0)
    }
}

/// Case-insensitive whole-word search: the match may not be flanked by
/// alphanumeric characters.
pub fn mentions(haystack: &str, needle: &str) -> bool {
    let hay = haystack.to_lowercase();
    let needle = needle.to_lowercase();
    if needle.is_empty() {
        return false;
    }
    let mut from = 0;
    while let Some(pos) = hay[from..].find(&needle) {
        let start = from + pos;
        let end = start + needle.len();
        let before = hay[..start].chars().next_back().map_or(true, |c| !c.is_alphanumeric());
        let after = hay[end..].chars().next().map_or(true, |c| !c.is_alphanumeric());
        if before && after {
            return true;
        }
        from = start + hay[start..].chars().next().map_or(1, char::len_utf8);
    }
    false
}

fn sentences(text: &str) -> impl Iterator<Item = &str> {
    text.split(['.', ';', '!', '?']).map(str::trim).filter(|s| !s.is_empty())
}

/// Addressing rules over the raw utterance: agents told to stay quiet score
/// [`SCORE_QUIET`], agents named score [`SCORE_ADDRESSED`], everyone else
/// [`SCORE_DEFAULT`]. Each agent is judged on its own snapshot, so the
/// result does not depend on which other snapshots are present.
#[derive(Debug, Default, Clone, Copy)]
pub struct RuleScorer;

impl RuleScorer {
    pub fn score_one(utterance: &str, display_name: &str) -> (f64, &'static str) {
        let mut named = false;
        for s in sentences(utterance) {
            let quiet = QUIET_MARKERS.iter().any(|m| mentions(s, m));
            let me = mentions(s, display_name);
            if quiet && (me || GROUP_WORDS.iter().any(|g| mentions(s, g))) {
                return (SCORE_QUIET, "told to stay quiet");
            }
            named |= me;
        }
        if named {
            (SCORE_ADDRESSED, "addressed by name")
        } else {
            (SCORE_DEFAULT, "not singled out")
        }
    }
}

impl Scorer for RuleScorer {
    fn score(&self, snapshots: &[AgentSnapshot]) -> ScoreReport {
        let mut scores = IndexMap::new();
        let mut why = Vec::new();
        for s in snapshots {
            let (r, reason) = Self::score_one(&s.observation.source.speech_text, &s.display_name);
            scores.insert(s.agent_id.clone(), r);
            why.push(format!("{}: {reason}", s.display_name));
        }
        ScoreReport {
            scores,
            rationale: format!("rules: {}", why.join("; ")),
        }
    }
}

/// One structured model call scores all presented snapshots jointly.
/// Failures fall back to [`RuleScorer`] for the turn.
pub struct GatewayScorer {
    gateway: Arc<dyn Gateway>,
}

const SCORER_HEADER: &str = "Turn-taking coordinator";

const SCORER_SYSTEM: &str = "You coordinate a group of social robots in conversation with a human. \
For each robot, rate from 0 to 1 how appropriate it is for that robot to respond next, considering \
who was addressed, what each robot knows, and its personality. Reply with JSON matching the schema.";

impl GatewayScorer {
    pub fn new(gateway: Arc<dyn Gateway>) -> Self {
        Self { gateway }
    }
}

pub fn scorer_schema() -> Value {
    json!({
        "type": "object",
        "properties": {
            "scores": {
                "type": "array",
                "items": {
                    "type": "object",
                    "properties": {"agent_id": {"type": "string"}, "score": {"type": "number"}},
                    "required": ["agent_id", "score"]
                }
            },
            "rationale": {"type": "string"}
        },
        "required": ["scores"]
    })
}

/// The scorer's user message; its first line is fixed so fixtures can
/// anchor on it.
pub fn scorer_prompt(snapshots: &[AgentSnapshot]) -> String {
    let mut out = format!("{SCORER_HEADER}\n");
    if let Some(first) = snapshots.first() {
        out.push_str(&format!("Utterance: {}\n", first.observation.source.speech_text));
        out.push_str("Conversation so far:\n");
        out.push_str(if first.context_digest.is_empty() { "(nothing yet)" } else { &first.context_digest });
        out.push('\n');
    }
    out.push_str("Robots:\n");
    for s in snapshots {
        out.push_str(&format!(
            "- agent_id {} ({}). {}\n  Observation: {}\n",
            s.agent_id, s.display_name, s.persona, s.observation.text
        ));
    }
    out
}

#[derive(Deserialize)]
struct RawScores {
    scores: Vec<RawScore>,
    #[serde(default)]
    rationale: String,
}

#[derive(Deserialize)]
struct RawScore {
    agent_id: String,
    score: f64,
}

impl Scorer for GatewayScorer {
    fn score(&self, snapshots: &[AgentSnapshot]) -> ScoreReport {
        let req = ModelRequest::structured(
            SCORER_SYSTEM,
            vec![ChatMessage::user(scorer_prompt(snapshots))],
            scorer_schema(),
        );
        let parsed = self
            .gateway
            .complete(&req)
            .and_then(|r| r.into_structured())
            .map_err(|e| e.to_string())
            .and_then(|v| serde_json::from_value::<RawScores>(v).map_err(|e| e.to_string()))
            .and_then(|raw| {
                let mut scores = IndexMap::new();
                for s in snapshots {
                    let r = raw
                        .scores
                        .iter()
                        .find(|x| x.agent_id == s.agent_id)
                        .ok_or_else(|| format!("no score for {}", s.agent_id))?;
                    scores.insert(s.agent_id.clone(), clamp_score(r.score));
                }
                Ok(ScoreReport {
                    scores,
                    rationale: raw.rationale,
                })
            });
        match parsed {
            Ok(r) => r,
            Err(e) => {
                warn!(error = %e, "model scorer failed, using rules for this turn");
                let mut r = RuleScorer.score(snapshots);
                r.rationale = format!("model scorer unavailable ({e}); {}", r.rationale);
                r
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinationDecision {
    pub turn_index: u64,
    pub scores: IndexMap<String, f64>,
    pub threshold: Threshold,
    pub selected: Vec<String>,
    pub rationale: String,
    pub fallback_used: bool,
    /// False when agents decided independently.
    #[serde(default = "yes")]
    pub coordinated: bool,
}

fn yes() -> bool {
    true
}

/// Agents with score ≥ τ in descending score order, registration order
/// breaking ties. With `fallback`, an empty result becomes the argmax agent
/// and the flag in the returned pair is set.
pub fn select_ids(scores: &IndexMap<String, f64>, tau: Threshold, fallback: bool) -> (Vec<String>, bool) {
    let mut ranked: Vec<(usize, &String, f64)> =
        scores.iter().enumerate().map(|(i, (id, &r))| (i, id, clamp_score(r))).collect();
    ranked.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    let selected: Vec<String> = ranked
        .iter()
        .filter(|(_, _, r)| *r >= tau.get())
        .map(|(_, id, _)| (*id).clone())
        .collect();
    if selected.is_empty() && fallback {
        if let Some((_, id, _)) = ranked.first() {
            return (vec![(*id).clone()], true);
        }
    }
    (selected, false)
}

/// Builds the decision for a coordinated turn.
pub fn select(turn_index: u64, report: ScoreReport, tau: Threshold) -> CoordinationDecision {
    let scores: IndexMap<String, f64> = report.scores.into_iter().map(|(k, v)| (k, clamp_score(v))).collect();
    let (selected, fallback_used) = select_ids(&scores, tau, true);
    let mut rationale = report.rationale;
    if fallback_used {
        rationale.push_str(&format!("; no agent reached {tau}, falling back to the highest score"));
    }
    CoordinationDecision {
        turn_index,
        scores,
        threshold: tau,
        selected,
        rationale,
        fallback_used,
        coordinated: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ScriptedMock;
    use crate::identity::PersonalityVector;

    fn agents() -> Vec<AgentProfile> {
        vec![
            AgentProfile::new("nao_a", "Nao-A", PersonalityVector::NEUTRAL),
            AgentProfile::new("nao_b", "Nao-B", PersonalityVector::NEUTRAL),
        ]
    }

    fn scores(pairs: &[(&str, f64)]) -> IndexMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn rule(text: &str) -> IndexMap<String, f64> {
        let snaps = snapshot_all(&agents(), &MultimodalInput::utterance(text), 0, "", None);
        RuleScorer.score(&snaps).scores
    }

    #[test]
    fn addressing_rules() {
        assert_eq!(rule("Nao-A, what do you think?"), scores(&[("nao_a", 0.9), ("nao_b", 0.6)]));
        assert_eq!(rule("hello everyone"), scores(&[("nao_a", 0.6), ("nao_b", 0.6)]));
        assert_eq!(
            rule("Nao-A, please stay quiet for a moment. Nao-B, how should teachers use AI?"),
            scores(&[("nao_a", 0.1), ("nao_b", 0.9)])
        );
        assert_eq!(rule("nao-b? hmm"), scores(&[("nao_a", 0.6), ("nao_b", 0.9)]));
        assert_eq!(rule("Everyone, please stay quiet."), scores(&[("nao_a", 0.1), ("nao_b", 0.1)]));
    }

    #[test]
    fn whole_word_mentions() {
        assert!(mentions("Hi Nao-A!", "nao-a"));
        assert!(!mentions("Hi Nao-AB", "Nao-A"));
        assert!(!mentions("xNao-A", "Nao-A"));
        assert!(mentions("Nao-AB and Nao-A", "Nao-A"));
    }

    #[test]
    fn one_snapshot_per_agent() {
        let input = MultimodalInput::utterance("Look").with_view(
            "nao_b",
            crate::perception::ScenePayload::Description("a cup".into()),
        );
        let snaps = snapshot_all(&agents(), &input, 4, "Human: hi", None);
        assert_eq!(snaps.len(), 2);
        assert!(snaps[1].observation.text.ends_with("a cup"));
        assert_eq!(snapshot_all(&agents()[..1], &input, 4, "", None).len(), 1);
    }

    #[test]
    fn selection_examples() {
        let tau = Threshold::default();
        assert_eq!(select_ids(&scores(&[("A", 0.9), ("B", 0.2)]), tau, true), (vec!["A".to_string()], false));
        assert_eq!(
            select_ids(&scores(&[("A", 0.6), ("B", 0.7)]), tau, true),
            (vec!["B".to_string(), "A".to_string()], false)
        );
        assert_eq!(select_ids(&scores(&[("A", 0.3), ("B", 0.2)]), tau, true), (vec!["A".to_string()], true));
        assert_eq!(
            select_ids(&scores(&[("A", 0.6), ("B", 0.6)]), tau, true).0,
            ["A".to_string(), "B".to_string()]
        );
        assert!(select_ids(&scores(&[("A", 0.3)]), tau, false).0.is_empty());
    }

    #[test]
    fn threshold_bounds() {
        assert!(Threshold::new(0.0).is_err());
        assert!(Threshold::new(1.0).is_err());
        assert!(serde_json::from_str::<Threshold>("1.5").is_err());
        assert_eq!(serde_json::from_str::<Threshold>("0.25").unwrap().get(), 0.25);
    }

    #[test]
    fn gateway_scores_are_clamped_and_failures_fall_back() {
        let mock: Arc<dyn Gateway> = Arc::new(
            ScriptedMock::parse(
                r#"{"kind":"structured","match":{"contains":"broken"},"respond":"not json"}
{"kind":"structured","match":{"regex":"^Turn-taking coordinator"},"respond_structured":{"scores":[{"agent_id":"nao_a","score":1.7},{"agent_id":"nao_b","score":-0.2}],"rationale":"A was asked"}}
{"kind":"any","match":{"always":true},"respond":""}"#,
            )
            .unwrap(),
        );
        let scorer = GatewayScorer::new(mock);
        let snaps = snapshot_all(&agents(), &MultimodalInput::utterance("Nao-A?"), 0, "", None);
        let r = scorer.score(&snaps);
        assert_eq!(r.scores, scores(&[("nao_a", 1.0), ("nao_b", 0.0)]));
        let snaps = snapshot_all(&agents(), &MultimodalInput::utterance("broken Nao-B"), 0, "", None);
        let r = scorer.score(&snaps);
        assert_eq!(r.scores, scores(&[("nao_a", 0.6), ("nao_b", 0.9)]));
        assert!(r.rationale.contains("model scorer unavailable"));
    }

    #[test]
    fn decision_marks_fallback() {
        let d = select(
            2,
            ScoreReport {
                scores: scores(&[("A", 0.3), ("B", 0.4)]),
                rationale: "r".into(),
            },
            Threshold::default(),
        );
        assert_eq!(d.selected, ["B"]);
        assert!(d.fallback_used);
    }
}
