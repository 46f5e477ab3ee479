use std::cmp::Ordering;
use std::sync::Arc;

use polyphony_core::gateway::{Gateway, ScriptedMock};
use polyphony_core::memory::{rank, Embedding, MemoryRecord, MemoryStore, Tier, DEFAULT_TOP_K, SIMILARITY_FLOOR};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn embedder() -> Arc<dyn Gateway> {
    Arc::new(ScriptedMock::parse("").unwrap())
}

/// Exhaustive ranking written independently of `rank`: repeated selection
/// of the best remaining record.
fn brute_force(query: &[f64], records: &[MemoryRecord], top_k: usize, floor: f64) -> Vec<String> {
    let cos = |v: &[f64]| {
        let dot: f64 = query.iter().zip(v).map(|(a, b)| a * b).sum();
        let nq = query.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (nq * nv)
    };
    let mut pool: Vec<(f64, u64, &str)> = records
        .iter()
        .map(|r| (cos(r.embedding.as_slice()), r.created_at, r.record_id.as_str()))
        .filter(|(s, _, _)| *s >= floor)
        .collect();
    let mut out = Vec::new();
    while out.len() < top_k && !pool.is_empty() {
        let mut best = 0;
        for i in 1..pool.len() {
            let better = match pool[i].0.partial_cmp(&pool[best].0).unwrap() {
                Ordering::Greater => true,
                Ordering::Equal => pool[i].1 > pool[best].1,
                Ordering::Less => false,
            };
            if better {
                best = i;
            }
        }
        out.push(pool.remove(best).2.to_string());
    }
    out
}

const WORDS: &[&str] = &[
    "blue", "green", "ramen", "sushi", "hiking", "chess", "color", "food", "favorite", "likes", "user", "music", "jazz",
    "piano", "cat", "dog", "tea", "coffee",
];

fn random_text(rng: &mut impl Rng) -> String {
    let n = rng.gen_range(1..=5);
    (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

#[test]
fn retrieval_matches_brute_force_on_random_stores() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let gw = embedder();
    for round in 0..50 {
        let store = MemoryStore::in_memory(gw.clone());
        store.register("a").unwrap();
        let n = rng.gen_range(0..=200);
        for i in 0..n {
            let tier = if rng.gen_bool(0.5) { Tier::Semantic } else { Tier::Episodic };
            store.append("a", tier, &random_text(&mut rng), "s", i).unwrap();
        }
        let records = store.records("a").unwrap();
        for _ in 0..5 {
            let q = random_text(&mut rng);
            let top_k = rng.gen_range(1..=8);
            let got: Vec<String> = store
                .retrieve("a", &q, top_k)
                .unwrap()
                .records
                .into_iter()
                .map(|s| s.record.record_id)
                .collect();
            let qv = gw.embed(&q).unwrap();
            assert_eq!(got, brute_force(qv.as_slice(), &records, top_k, SIMILARITY_FLOOR), "round {round} query {q:?}");
        }
    }
}

fn arb_unit(dim: usize) -> impl Strategy<Value = Embedding> {
    prop::collection::vec(-3i8..=3, dim).prop_filter_map("zero vector", |v| {
        Embedding::normalize(v.into_iter().map(f64::from).collect()).ok()
    })
}

proptest! {
    // Coarse integer components make exact score ties common, so the
    // recency tie-break is exercised.
    #[test]
    fn rank_agrees_with_oracle(
        q in arb_unit(4),
        recs in prop::collection::vec((arb_unit(4), 0u64..20), 0..60),
        top_k in 1usize..10,
        floor in -1.0f64..1.0,
    ) {
        let records: Vec<MemoryRecord> = recs
            .into_iter()
            .enumerate()
            .map(|(i, (e, t))| MemoryRecord {
                record_id: format!("r-{i:06}"),
                namespace: "r".into(),
                tier: Tier::Semantic,
                text: format!("t{i}"),
                embedding: e,
                // Unique logical times, shuffled relative to insertion order.
                created_at: t * 100 + i as u64,
                session_id: "s".into(),
                source_turn: 0,
            })
            .collect();
        let got: Vec<String> = rank(&q, &records, top_k, floor).into_iter().map(|s| s.record.record_id).collect();
        prop_assert_eq!(got, brute_force(q.as_slice(), &records, top_k, floor));
    }

    #[test]
    fn namespaces_never_leak(
        a_texts in prop::collection::vec("[a-z]{2,8}( [a-z]{2,8}){0,3}", 1..20),
        b_texts in prop::collection::vec("[A-Z]{2,8}( [A-Z]{2,8}){0,3}", 1..20),
        query in "[a-zA-Z]{1,8}( [a-zA-Z]{1,8}){0,2}",
    ) {
        let store = MemoryStore::in_memory(embedder()).with_floor(-1.0);
        store.register("a").unwrap();
        store.register("b").unwrap();
        for (i, t) in a_texts.iter().enumerate() {
            store.append("a", Tier::Semantic, t, "s", i as u64).unwrap();
        }
        for (i, t) in b_texts.iter().enumerate() {
            store.append("b", Tier::Episodic, t, "s", i as u64).unwrap();
        }
        for r in store.retrieve("a", &query, 50).unwrap().records {
            prop_assert_eq!(&r.record.namespace, "a");
        }
        for r in store.retrieve("b", &query, 50).unwrap().records {
            prop_assert_eq!(&r.record.namespace, "b");
        }
    }
}

#[test]
fn persisted_store_reloads_identically() {
    let dir = tempfile::tempdir().unwrap();
    let gw = embedder();
    let before = {
        let store = MemoryStore::open(dir.path(), gw.clone()).unwrap();
        store.register("nao_a").unwrap();
        store.append("nao_a", Tier::Semantic, "User's favorite color is blue", "s1", 0).unwrap();
        store.append("nao_a", Tier::Episodic, "User went hiking last weekend", "s1", 1).unwrap();
        store.retrieve("nao_a", "what color do I like", DEFAULT_TOP_K).unwrap()
    };
    let store = MemoryStore::open(dir.path(), gw).unwrap();
    assert_eq!(store.count("nao_a").unwrap(), 2);
    let after = store.retrieve("nao_a", "what color do I like", DEFAULT_TOP_K).unwrap();
    assert_eq!(before, after);
    // New records continue the logical clock rather than reusing times.
    let r = store.append("nao_a", Tier::Semantic, "User's favorite food is ramen", "s2", 2).unwrap().unwrap();
    assert!(store.records("nao_a").unwrap().iter().all(|x| x.record_id == r.record_id || x.created_at < r.created_at));
}

#[test]
fn disabled_store_keeps_records_for_later() {
    let store = MemoryStore::in_memory(embedder());
    store.register("a").unwrap();
    store.append("a", Tier::Semantic, "User's favorite color is blue", "s", 0).unwrap();
    store.set_longterm_enabled("a", false).unwrap();
    assert!(store.retrieve("a", "favorite color", 4).unwrap().is_empty());
    store.set_longterm_enabled("a", true).unwrap();
    assert_eq!(store.retrieve("a", "favorite color", 4).unwrap().len(), 1);
}

const QUALIFIERS: &[&str] = &[
    "morning", "evening", "summer", "winter", "weekend", "holiday", "childhood", "travel", "rainy", "birthday",
];
const SUBJECTS: &[&str] = &["food", "drink", "song", "movie", "book", "game", "sport", "color", "place", "snack"];
const VALUES: &[&str] = &["amber", "basil", "cobalt", "dune", "ember", "fjord", "garnet", "harbor", "indigo", "juniper"];

/// One hundred preference facts with distinct subjects, stored in one
/// session and asked about (by subject only) in the next.
#[test]
fn hundred_facts_survive_a_session_reset() {
    let store = MemoryStore::in_memory(embedder());
    store.register("nao_a").unwrap();
    let mut facts = Vec::new();
    for (i, q) in QUALIFIERS.iter().enumerate() {
        for (j, s) in SUBJECTS.iter().enumerate() {
            let v = VALUES[(i * 3 + j * 7) % VALUES.len()];
            facts.push((format!("User's favorite {q} {s} is {v}"), format!("What is my favorite {q} {s}?")));
        }
    }
    assert_eq!(facts.len(), 100);
    for (i, (fact, _)) in facts.iter().enumerate() {
        store.append("nao_a", Tier::Semantic, fact, "s1", i as u64).unwrap().unwrap();
    }
    let _wm = store.reset_session("nao_a", "s2", 10).unwrap();
    let hits = facts
        .iter()
        .filter(|(fact, probe)| {
            store
                .retrieve("nao_a", probe, DEFAULT_TOP_K)
                .unwrap()
                .texts()
                .any(|t| t == fact)
        })
        .count();
    assert!(hits >= 95, "{hits}/100");
}
