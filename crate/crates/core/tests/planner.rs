use polyphony_core::gateway::{MockMatch, MockResponse, MockRule, RuleKind, ScriptedMock};
use polyphony_core::identity::CapabilitySet;
use polyphony_core::memory::{RetrievalResult, WorkingMemory};
use polyphony_core::perception::{template_text, MultimodalInput, Observation, Speaker};
use polyphony_core::planner::{build_action_schema, parse_policy, plan, PlannerContext, FALLBACK_TEXT, MAX_ATTEMPTS};
use polyphony_core::schema;
use proptest::prelude::*;
use serde_json::{json, Value};

const KINDS: &[&str] = &["speak", "gesture", "posture", "head", "move", "dance", "fly", ""];
const WORDS: &[&str] = &[
    "wave", "nod", "point", "shake_head", "sit", "stand", "crouch", "up", "down", "left", "right", "center", "forward",
    "backward", "turn_left", "turn_right", "moonwalk", "backflip", "sideways", "",
];

fn arb_params() -> impl Strategy<Value = Value> {
    let word = prop::sample::select(WORDS);
    let text = prop_oneof!["[a-zA-Z ,.!?]{0,40}".prop_map(Value::from), Just(Value::from("   ")), Just(json!(7))];
    let magnitude = prop_oneof![(-2.0f64..12.0).prop_map(Value::from), (0i64..12).prop_map(Value::from), Just(json!("far"))];
    (
        prop::option::of(text),
        prop::option::of(word.clone()),
        prop::option::of(word),
        prop::option::of(magnitude),
        prop::bool::weighted(0.05),
    )
        .prop_map(|(text, name, direction, magnitude, extra)| {
            let mut p = serde_json::Map::new();
            if let Some(t) = text {
                p.insert("text".into(), t);
            }
            if let Some(n) = name {
                p.insert("name".into(), n.into());
            }
            if let Some(d) = direction {
                p.insert("direction".into(), d.into());
            }
            if let Some(m) = magnitude {
                p.insert("magnitude".into(), m);
            }
            if extra {
                p.insert("volume".into(), json!(3));
            }
            Value::Object(p)
        })
}

/// Steps biased toward well-formed shapes so both outcomes are common.
fn arb_step() -> impl Strategy<Value = Value> {
    let valid = prop_oneof![
        "[a-zA-Z][a-zA-Z ,.!?]{0,30}".prop_map(|t| json!({"kind": "speak", "params": {"text": t}})),
        prop::sample::select(&["wave", "nod", "point", "shake_head", "moonwalk"][..])
            .prop_map(|n| json!({"kind": "gesture", "params": {"name": n}})),
        prop::sample::select(&["sit", "stand", "crouch", "lie"][..]).prop_map(|n| json!({"kind": "posture", "params": {"name": n}})),
        prop::sample::select(&["up", "down", "left", "right", "center", "behind"][..])
            .prop_map(|d| json!({"kind": "head", "params": {"direction": d}})),
        (prop::sample::select(&["forward", "backward", "turn_left", "turn_right", "sideways"][..]), 0.0f64..11.0)
            .prop_map(|(d, m)| json!({"kind": "move", "params": {"direction": d, "magnitude": m}})),
    ];
    let raw = (prop::sample::select(KINDS), arb_params(), prop::bool::weighted(0.05)).prop_map(|(k, p, extra)| {
        let mut s = json!({"kind": k, "params": p});
        if extra {
            s["note"] = json!("x");
        }
        s
    });
    prop_oneof![4 => valid, 1 => raw]
}

fn arb_document() -> impl Strategy<Value = Value> {
    (prop::collection::vec(arb_step(), 0..7), prop::bool::weighted(0.05), prop::bool::weighted(0.1)).prop_map(
        |(steps, extra, ids)| {
            let mut d = json!({"steps": steps});
            if extra {
                d["mood"] = json!("happy");
            }
            if ids {
                d["agent_id"] = json!("nao_a");
                d["turn_index"] = json!(2);
            }
            d
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    /// The generated schema and the typed parser accept exactly the same
    /// documents.
    #[test]
    fn schema_and_typed_validation_agree(doc in arb_document()) {
        let caps = CapabilitySet::default();
        let s = build_action_schema(&caps).unwrap();
        let by_schema = schema::validate(&s, &doc);
        let by_type = parse_policy(&doc, &caps);
        prop_assert_eq!(by_schema.is_ok(), by_type.is_ok(), "schema: {:?}\ntyped: {:?}\ndoc: {}", by_schema, by_type, doc);
    }
}

fn observation() -> Observation {
    Observation {
        text: template_text(&Speaker::Human, "Hello there", None),
        source: MultimodalInput::utterance("Hello there"),
        agent_id: "nao_a".into(),
        turn_index: 1,
        degraded: false,
    }
}

/// A policy with one out-of-vocabulary element, chosen by `seed`.
fn out_of_vocabulary(seed: u64) -> Value {
    let pick = |xs: &[&str], salt: u64| xs[((seed / 7 + salt) % xs.len() as u64) as usize].to_string();
    let bad = match seed % 6 {
        0 => json!({"kind": "gesture", "params": {"name": pick(&["moonwalk", "salute", "clap", "bow"], 0)}}),
        1 => json!({"kind": "posture", "params": {"name": pick(&["lie", "kneel", "jump"], 1)}}),
        2 => json!({"kind": "head", "params": {"direction": pick(&["behind", "north", "spin"], 2)}}),
        3 => json!({"kind": "move", "params": {"direction": pick(&["sideways", "up", "teleport"], 3), "magnitude": 1.0}}),
        4 => json!({"kind": pick(&["dance", "fly", "sing", "blink"], 4), "params": {}}),
        _ => json!({"kind": "move", "params": {"direction": "forward", "magnitude": 50 + seed % 100}}),
    };
    let mut steps = vec![json!({"kind": "speak", "params": {"text": format!("reply {seed}")}})];
    steps.insert((seed % 2) as usize, bad);
    json!({"steps": steps})
}

#[test]
fn out_of_vocabulary_outputs_end_in_fallback_after_two_attempts() {
    let caps = CapabilitySet::default();
    let s = build_action_schema(&caps).unwrap();
    let obs = observation();
    let wm = WorkingMemory::new("s", 10);
    let retrieved = RetrievalResult::empty("");
    for seed in 0..500 {
        let doc = out_of_vocabulary(seed);
        assert!(schema::validate(&s, &doc).is_err(), "schema accepted {doc}");
        assert!(parse_policy(&doc, &caps).is_err(), "typed check accepted {doc}");
        let rule = MockRule::new(RuleKind::Structured, MockMatch::Always(true), MockResponse::Structured(doc));
        let mock = ScriptedMock::from_rules(vec![rule]).unwrap();
        let ctx = PlannerContext {
            agent_id: "nao_a",
            observation: &obs,
            working: &wm,
            retrieved: &retrieved,
            persona: "You are Nao-A.",
            capabilities: &caps,
        };
        let out = plan(&ctx, &mock).unwrap();
        assert!(out.fallback_used);
        assert_eq!(out.attempts, MAX_ATTEMPTS);
        assert_eq!(mock.calls(), 2);
        assert_eq!(out.policy.speech(), Some(FALLBACK_TEXT));
        assert_eq!(out.policy.steps.len(), 1);
    }
}
