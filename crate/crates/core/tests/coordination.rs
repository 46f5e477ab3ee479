use std::collections::BTreeSet;
use std::sync::{Arc, Mutex};

use indexmap::IndexMap;
use polyphony_core::coordinator::{clamp_score, select, select_ids, AgentSnapshot, RuleScorer, ScoreReport, Scorer, Threshold};
use polyphony_core::executor::{EventStatus, InteractionEvent};
use polyphony_core::gateway::{Gateway, ScriptedMock};
use polyphony_core::harness::{compute_metrics, overlapping_pairs};
use polyphony_core::identity::{AgentProfile, PersonalityVector};
use polyphony_core::memory::MemoryStore;
use polyphony_core::perception::MultimodalInput;
use polyphony_core::planner::ActionStep;
use polyphony_core::session::{Session, SessionConfig};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn arb_scores() -> impl Strategy<Value = IndexMap<String, f64>> {
    prop::collection::vec(prop_oneof![0.0f64..=1.0, Just(0.5), Just(1.0), -1.0f64..2.0], 1..8)
        .prop_map(|v| v.into_iter().enumerate().map(|(i, r)| (format!("agent_{i}"), r)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    /// Raising τ never adds an agent (fallback disabled).
    #[test]
    fn selection_is_monotone_in_tau(scores in arb_scores(), a in 1e-6f64..1.0, b in 1e-6f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (sel_lo, _) = select_ids(&scores, Threshold::new(lo).unwrap(), false);
        let (sel_hi, _) = select_ids(&scores, Threshold::new(hi).unwrap(), false);
        let lo_set: BTreeSet<_> = sel_lo.iter().collect();
        prop_assert!(sel_hi.iter().all(|id| lo_set.contains(id)));
    }

    #[test]
    fn tiny_tau_selects_everyone(scores in prop::collection::vec(1e-9f64..=1.0, 1..8)) {
        let scores: IndexMap<String, f64> = scores.into_iter().enumerate().map(|(i, r)| (format!("a{i}"), r)).collect();
        let d = select(0, ScoreReport { scores: scores.clone(), rationale: String::new() }, Threshold::new(f64::MIN_POSITIVE).unwrap());
        prop_assert_eq!(d.selected.len(), scores.len());
        prop_assert!(!d.fallback_used);
        // Descending score order.
        let ordered: Vec<f64> = d.selected.iter().map(|id| d.scores[id]).collect();
        prop_assert!(ordered.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn all_below_tau_falls_back_to_argmax(raw in arb_scores(), tau in 1e-6f64..1.0) {
        // Map every raw score into [0, tau) while keeping negatives, so
        // clamping is still exercised.
        let scores: IndexMap<String, f64> =
            raw.into_iter().map(|(k, r)| (k, if r < 0.0 { r } else { (r * tau * 0.999).min(tau * 0.999) })).collect();
        let clamped: Vec<f64> = scores.values().map(|&r| clamp_score(r)).collect();
        prop_assert!(clamped.iter().all(|&r| r < tau));
        let d = select(3, ScoreReport { scores: scores.clone(), rationale: String::new() }, Threshold::new(tau).unwrap());
        prop_assert!(d.fallback_used);
        prop_assert_eq!(d.selected.len(), 1);
        let best = clamped.iter().cloned().fold(f64::MIN, f64::max);
        // The first registered agent among those tied at the maximum.
        let expected = scores.keys().zip(&clamped).find(|(_, &r)| r == best).unwrap().0;
        prop_assert_eq!(&d.selected[0], expected);
    }

    #[test]
    fn decision_scores_are_clamped(scores in arb_scores(), tau in 1e-6f64..1.0) {
        let d = select(0, ScoreReport { scores, rationale: String::new() }, Threshold::new(tau).unwrap());
        prop_assert!(d.scores.values().all(|r| (0.0..=1.0).contains(r)));
    }
}

#[test]
fn fallback_triggers_on_a_thousand_fuzzed_low_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let tau = rng.gen_range(0.05..0.95);
        let n = rng.gen_range(1..6);
        let scores: IndexMap<String, f64> = (0..n).map(|i| (format!("a{i}"), rng.gen_range(0.0..tau))).collect();
        let d = select(0, ScoreReport { scores: scores.clone(), rationale: String::new() }, Threshold::new(tau).unwrap());
        assert!(d.fallback_used);
        let best = scores.values().cloned().fold(f64::MIN, f64::max);
        assert_eq!(d.scores[&d.selected[0]], best);
    }
}

/// Scores drawn from a seeded generator: exercises selections the rule
/// scorer never produces.
struct RandomScorer(Mutex<ChaCha8Rng>);

impl Scorer for RandomScorer {
    fn score(&self, snapshots: &[AgentSnapshot]) -> ScoreReport {
        let mut rng = self.0.lock().unwrap();
        ScoreReport {
            scores: snapshots.iter().map(|s| (s.agent_id.clone(), rng.gen_range(0.0..1.0))).collect(),
            rationale: "random".into(),
        }
    }
}

const ECHO: &str = r#"{"kind":"structured","match":{"regex":"^Memory controller"},"respond_structured":{"action":"skip"}}
{"kind":"structured","match":{"regex":"(?s)Current observation: \\[Human\\] said: ([^\\n]*?) Scene:"},"respond_structured":{"steps":[{"kind":"gesture","params":{"name":"nod"}},{"kind":"speak","params":{"text":"You said: $1"}},{"kind":"head","params":{"direction":"center"}}]}}
{"kind":"structured","match":{"always":true},"respond_structured":{"steps":[{"kind":"speak","params":{"text":"Hmm."}}]}}"#;

const FILLER: &[&str] = &[
    "what", "do", "you", "think", "about", "robots", "in", "school", "tell", "me", "more", "please", "today", "music",
    "weather", "and", "why",
];

fn random_utterance(rng: &mut impl Rng, names: &[String]) -> String {
    let mut sentences = Vec::new();
    for _ in 0..rng.gen_range(1..=3) {
        let mut words: Vec<String> = (0..rng.gen_range(1..12)).map(|_| FILLER.choose(rng).unwrap().to_string()).collect();
        if rng.gen_bool(0.5) {
            words.insert(0, format!("{},", names.choose(rng).unwrap()));
        }
        if rng.gen_bool(0.2) {
            words.push(["stay quiet", "hold on", "everyone"].choose(rng).unwrap().to_string());
        }
        sentences.push(words.join(" "));
    }
    let stop = ["?", ".", "!"].choose(rng).unwrap();
    format!("{}{stop}", sentences.join(". "))
}

fn fuzz_session(seed: u64, coordinated: bool) -> (Session, Vec<String>, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=4);
    let agents: Vec<AgentProfile> = (0..n)
        .map(|i| AgentProfile::new(&format!("robot_{i}"), &format!("Robo-{i}"), PersonalityVector::NEUTRAL))
        .collect();
    let names = agents.iter().map(|a| a.display_name.clone()).collect();
    let gw: Arc<dyn Gateway> = Arc::new(ScriptedMock::parse(ECHO).unwrap());
    let memory = Arc::new(MemoryStore::in_memory(gw.clone()));
    let scorer: Box<dyn Scorer> = if seed % 2 == 0 {
        Box::new(RuleScorer)
    } else {
        Box::new(RandomScorer(Mutex::new(ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef))))
    };
    let config = SessionConfig {
        coordination_enabled: coordinated,
        threshold: Threshold::new(rng.gen_range(0.05..0.95)).unwrap(),
        ..SessionConfig::default()
    };
    (Session::new("fuzz", agents, gw, memory, scorer, config).unwrap(), names, rng)
}

#[test]
fn coordinated_dispatch_never_overlaps() {
    let mut turns_checked = 0;
    for seed in 0..120 {
        let (mut session, names, mut rng) = fuzz_session(seed, true);
        for _ in 0..rng.gen_range(3..8) {
            let text = random_utterance(&mut rng, &names);
            let out = session.handle(&MultimodalInput::utterance(&text)).unwrap();
            // Responders run back to back in decision order.
            assert_eq!(out.turns.iter().map(|t| t.agent_id.clone()).collect::<Vec<_>>(), out.decision.selected);
            for w in out.turns.windows(2) {
                let prev_end = w[0].events.iter().map(|e| e.end_ms).max().unwrap();
                let next_start = w[1].events.iter().map(|e| e.start_ms).min().unwrap();
                assert!(prev_end <= next_start, "seed {seed}: {text}");
            }
            turns_checked += 1;
        }
        let pairs = overlapping_pairs(session.timeline().events());
        assert!(pairs.is_empty(), "seed {seed}: {pairs:?}");
    }
    assert!(turns_checked >= 300);
}

#[test]
fn independent_dispatch_overlaps_when_several_respond() {
    let mut overlapping_turns = 0;
    for seed in 0..40 {
        let (mut session, names, mut rng) = fuzz_session(seed, false);
        for _ in 0..5 {
            let out = session.handle(&MultimodalInput::utterance(&random_utterance(&mut rng, &names))).unwrap();
            let speakers = out.turns.iter().filter(|t| t.speech().is_some()).count();
            let pairs: Vec<_> = overlapping_pairs(session.timeline().events())
                .into_iter()
                .filter(|(t, _, _)| *t == out.turn_index)
                .collect();
            // Everyone starts at once, so any two speakers overlap.
            assert_eq!(pairs.len(), speakers * speakers.saturating_sub(1) / 2);
            overlapping_turns += usize::from(!pairs.is_empty());
        }
    }
    assert!(overlapping_turns > 0);
}

fn brute_force_overlaps(events: &[InteractionEvent]) -> usize {
    let mut pairs = BTreeSet::new();
    for (i, a) in events.iter().enumerate() {
        for b in &events[i + 1..] {
            if a.turn_index == b.turn_index
                && a.agent_id != b.agent_id
                && a.is_speak()
                && b.is_speak()
                && a.start_ms.max(b.start_ms) < a.end_ms.min(b.end_ms)
            {
                let key = if a.agent_id < b.agent_id {
                    (a.turn_index, a.agent_id.clone(), b.agent_id.clone())
                } else {
                    (a.turn_index, b.agent_id.clone(), a.agent_id.clone())
                };
                pairs.insert(key);
            }
        }
    }
    pairs.len()
}

fn random_timeline(rng: &mut impl Rng, n: usize) -> Vec<InteractionEvent> {
    let turns = rng.gen_range(1..=(n / 20).max(1)) as u64;
    (0..n)
        .map(|i| {
            let start = rng.gen_range(0..5_000u64);
            let len = if rng.gen_bool(0.05) { 0 } else { rng.gen_range(1..1_500) };
            InteractionEvent {
                event_id: i as u64,
                agent_id: format!("a{}", rng.gen_range(0..6)),
                step: if rng.gen_bool(0.7) { ActionStep::speak("x") } else { ActionStep::gesture("wave") },
                start_ms: start,
                end_ms: start + len,
                session_id: "s".into(),
                turn_index: rng.gen_range(0..turns),
                status: EventStatus::Ok,
            }
        })
        .collect()
}

#[test]
fn overlap_metric_matches_pairwise_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut sizes: Vec<usize> = (0..40).map(|_| rng.gen_range(0..1_500)).collect();
    sizes.push(10_000);
    for n in sizes {
        let events = random_timeline(&mut rng, n);
        let m = compute_metrics(&events, &[], &[], &[], &[]);
        assert_eq!(m.overlap_count as usize, brute_force_overlaps(&events), "n = {n}");
    }
}
