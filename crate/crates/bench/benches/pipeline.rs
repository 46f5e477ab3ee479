//! Hot paths of one conversational turn, smallest first.

use std::sync::Arc;

use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use indexmap::IndexMap;
use polyphony_core::coordinator::{select, ScoreReport, Threshold};
use polyphony_core::executor::wire::{deserialize_policy, serialize_policy};
use polyphony_core::gateway::{Gateway, ScriptedMock};
use polyphony_core::harness::{builtin_scenario, run_scenario};
use polyphony_core::identity::{persona_preamble, PersonalityVector};
use polyphony_core::memory::{MemoryStore, Tier};
use polyphony_core::planner::{ActionPolicy, ActionStep};

fn identity(c: &mut Criterion) {
    let p = PersonalityVector::new(5, 1, 4, 2, 3);
    c.bench_function("persona_preamble", |b| b.iter(|| persona_preamble(black_box(&p), "Nao-A").unwrap()));
}

fn memory(c: &mut Criterion) {
    let gw: Arc<dyn Gateway> = Arc::new(ScriptedMock::parse("").unwrap());
    c.bench_function("embed_sentence", |b| b.iter(|| gw.embed(black_box("What is my favorite color today?")).unwrap()));

    let store = MemoryStore::in_memory(gw.clone());
    store.register("a").unwrap();
    for i in 0..1000u64 {
        let text = format!("User's favorite thing number {i} is item {}", i * 7 % 13);
        store.append("a", if i % 2 == 0 { Tier::Semantic } else { Tier::Episodic }, &text, "s", i).unwrap();
    }
    c.bench_function("retrieve_top4_of_1000", |b| b.iter(|| store.retrieve("a", black_box("What is my favorite thing number 42?"), 4).unwrap()));
}

fn coordination(c: &mut Criterion) {
    let scores: IndexMap<String, f64> = (0..8).map(|i| (format!("agent_{i}"), f64::from(i) / 8.0)).collect();
    let tau = Threshold::new(0.5).unwrap();
    c.bench_function("select_8_agents", |b| {
        b.iter_batched(
            || ScoreReport { scores: scores.clone(), rationale: String::new() },
            |report| select(0, report, tau),
            BatchSize::SmallInput,
        )
    });
}

fn wire(c: &mut Criterion) {
    let policy = ActionPolicy::new(
        "nao_a",
        3,
        vec![
            ActionStep::Gesture { name: "nod".into() },
            ActionStep::speak("That is a thoughtful question, and I have a few ideas about it."),
            ActionStep::Head { direction: "left".into() },
        ],
    )
    .unwrap();
    let frame = serialize_policy(&policy).unwrap();
    c.bench_function("wire_encode", |b| b.iter(|| serialize_policy(black_box(&policy)).unwrap()));
    c.bench_function("wire_decode", |b| b.iter(|| deserialize_policy(black_box(&frame)).unwrap()));
}

fn scenario(c: &mut Criterion) {
    let mut g = c.benchmark_group("scenario");
    g.sample_size(10);
    for id in ["coordination_on", "memory_on"] {
        let cfg = builtin_scenario(id).unwrap();
        g.bench_function(id, |b| b.iter(|| run_scenario(&cfg).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, identity, memory, coordination, wire, scenario);
criterion_main!(benches);
