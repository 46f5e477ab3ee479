//! The seven built-in conditions: one per personality trait, plus the
//! memory and coordination ablation pairs. Every one runs offline against
//! an embedded fixture.

use super::{ScenarioConfig, ScorerChoice, ScriptInput, ScriptSession, BUILTIN_PREFIX, CONFIG_VERSION};
use crate::coordinator::Threshold;
use crate::executor::ClockMode;
use crate::identity::{AgentProfile, PersonalityVector, Trait};
use crate::memory::DEFAULT_WINDOW;

const FIXTURES: &[(&str, &str)] = &[
    ("personality.jsonl", include_str!("../../fixtures/personality.jsonl")),
    ("memory.jsonl", include_str!("../../fixtures/memory.jsonl")),
    ("coordination.jsonl", include_str!("../../fixtures/coordination.jsonl")),
];

pub fn builtin_fixture(name: &str) -> Option<&'static str> {
    FIXTURES.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}

/// A condition and its scenario variants. Ablation conditions have an
/// `_on` and an `_off` variant; personality conditions have one.
#[derive(Debug, Clone)]
pub struct Condition {
    pub id: &'static str,
    pub variants: Vec<ScenarioConfig>,
}

fn topic_script(tr: Trait) -> [&'static str; 3] {
    match tr {
        Trait::Openness => [
            "Hi you two! I want to find an unconventional hobby this year.",
            "Would you try something odd like competitive birdsong imitation?",
            "What would you tell a friend who thinks new hobbies are a waste of time?",
        ],
        Trait::Conscientiousness => [
            "Hi both. My exam is tomorrow, but my friends invited me to a party tonight.",
            "How would you spend the evening if you were me?",
            "What if I only go to the party for an hour?",
        ],
        Trait::Extraversion => [
            "Hello everyone! I am going to a meetup where I will not know anyone.",
            "How do you usually start a conversation with a stranger?",
            "Do you enjoy big groups or small ones?",
        ],
        Trait::Agreeableness => [
            "Hi both, I want to start a podcast reviewing breakfast cereals.",
            "Be honest, would you listen to it?",
            "What should I change before the first episode?",
        ],
        Trait::Neuroticism => [
            "Hello both. My cat went missing yesterday.",
            "What should I do if she does not come back tonight?",
            "How do you cope when something like this happens?",
        ],
    }
}

fn base(scenario_id: &str, condition: &str, agents: Vec<AgentProfile>, fixture: &str, sessions: Vec<ScriptSession>) -> ScenarioConfig {
    ScenarioConfig {
        v: CONFIG_VERSION,
        scenario_id: scenario_id.to_string(),
        condition: Some(condition.to_string()),
        agents,
        coordination_enabled: true,
        longterm_memory_enabled: true,
        threshold: Threshold::default(),
        window: DEFAULT_WINDOW,
        clock: ClockMode::Simulated,
        scorer: ScorerChoice::Rules,
        fixture: format!("{BUILTIN_PREFIX}{fixture}"),
        sessions,
        base_dir: None,
    }
}

fn neutral_pair() -> Vec<AgentProfile> {
    vec![
        AgentProfile::new("nao_a", "Nao-A", PersonalityVector::NEUTRAL),
        AgentProfile::new("nao_b", "Nao-B", PersonalityVector::NEUTRAL),
    ]
}

fn session(id: &str, inputs: Vec<ScriptInput>) -> ScriptSession {
    ScriptSession {
        session_id: id.to_string(),
        inputs,
    }
}

fn personality(tr: Trait) -> ScenarioConfig {
    let agents = vec![
        AgentProfile::new("nao_a", "Nao-A", PersonalityVector::with_single(tr, 5)),
        AgentProfile::new("nao_b", "Nao-B", PersonalityVector::with_single(tr, 1)),
    ];
    let inputs = topic_script(tr).into_iter().map(ScriptInput::say).collect();
    base(tr.name(), tr.name(), agents, "personality.jsonl", vec![session("s1", inputs)])
}

fn memory(enabled: bool) -> ScenarioConfig {
    let tell = vec![
        ScriptInput::say("My favorite color is blue."),
        ScriptInput::say("My favorite food is ramen."),
        ScriptInput::say("My favorite activity is hiking."),
    ];
    let ask = vec![
        ScriptInput::say("Do you remember my favorite color?").expecting("blue"),
        ScriptInput::say("What is my favorite food?").expecting("ramen"),
        ScriptInput::say("And what is my favorite activity?").expecting("hiking"),
    ];
    let id = if enabled { "memory_on" } else { "memory_off" };
    let mut cfg = base(id, "memory", neutral_pair(), "memory.jsonl", vec![session("s1", tell), session("s2", ask)]);
    cfg.longterm_memory_enabled = enabled;
    cfg
}

fn coordination(enabled: bool) -> ScenarioConfig {
    let inputs = vec![
        ScriptInput::say("Hello everyone, today let's talk about AI in education."),
        ScriptInput::say("Nao-A, what do you think about AI tutors in classrooms?"),
        ScriptInput::say("Nao-B, do you agree with that?"),
        ScriptInput::say("Nao-A, please stay quiet for a moment. Nao-B, how should teachers use AI?"),
    ];
    let id = if enabled { "coordination_on" } else { "coordination_off" };
    let mut cfg = base(id, "coordination", neutral_pair(), "coordination.jsonl", vec![session("s1", inputs)]);
    cfg.coordination_enabled = enabled;
    cfg
}

pub fn builtin_conditions() -> Vec<Condition> {
    let mut out: Vec<Condition> = Trait::ALL
        .into_iter()
        .map(|t| Condition {
            id: t.name(),
            variants: vec![personality(t)],
        })
        .collect();
    out.push(Condition {
        id: "memory",
        variants: vec![memory(true), memory(false)],
    });
    out.push(Condition {
        id: "coordination",
        variants: vec![coordination(true), coordination(false)],
    });
    out
}

/// Every runnable scenario id, in condition order.
pub fn scenario_ids() -> Vec<String> {
    builtin_conditions()
        .into_iter()
        .flat_map(|c| c.variants)
        .map(|v| v.scenario_id)
        .collect()
}

/// Looks up a scenario by id. A bare ablation condition id resolves to its
/// enabled variant.
pub fn builtin_scenario(id: &str) -> Option<ScenarioConfig> {
    let conditions = builtin_conditions();
    let all = || conditions.iter().flat_map(|c| &c.variants);
    all()
        .find(|v| v.scenario_id == id)
        .or_else(|| conditions.iter().find(|c| c.id == id).and_then(|c| c.variants.first()))
        .cloned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seven_conditions_nine_scenarios() {
        let c = builtin_conditions();
        assert_eq!(c.len(), 7);
        assert_eq!(scenario_ids().len(), 9);
        for v in c.iter().flat_map(|c| &c.variants) {
            v.validate().unwrap_or_else(|e| panic!("{}: {e}", v.scenario_id));
        }
    }

    #[test]
    fn openness_pairing() {
        let cfg = builtin_scenario("openness").unwrap();
        assert_eq!(cfg.agents[0].personality, PersonalityVector::new(5, 3, 3, 3, 3));
        assert_eq!(cfg.agents[1].personality, PersonalityVector::new(1, 3, 3, 3, 3));
        assert_eq!(cfg.sessions[0].inputs.len(), 3);
    }

    #[test]
    fn ablation_pairs_differ_in_one_field() {
        let on = builtin_scenario("memory_on").unwrap();
        let off = builtin_scenario("memory_off").unwrap();
        assert_eq!(on.differing_fields(&off), ["longterm_memory_enabled", "scenario_id"]);
        let on = builtin_scenario("coordination_on").unwrap();
        let off = builtin_scenario("coordination_off").unwrap();
        assert_eq!(on.differing_fields(&off), ["coordination_enabled", "scenario_id"]);
    }

    #[test]
    fn bare_ablation_id_resolves_to_enabled_variant() {
        assert_eq!(builtin_scenario("memory").unwrap().scenario_id, "memory_on");
        assert!(builtin_scenario("nonexistent").is_none());
    }

    #[test]
    fn fixtures_parse() {
        for (name, text) in FIXTURES {
            crate::gateway::ScriptedMock::parse(text).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }
}
