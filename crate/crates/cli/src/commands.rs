//! `run`, `repl`, `memctl`, `replay` and `conditions`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::Command as Process;
use std::sync::Arc;

use polyphony_core::coordinator::CoordinationDecision;
use polyphony_core::executor::{EventStatus, InteractionEvent, Timeline};
use polyphony_core::gateway::{AuditedGateway, Gateway, ProviderKind, ScriptedMock};
use polyphony_core::harness::{
    builtin_conditions, builtin_scenario, compute_metrics, overlapping_pairs, preflight, prepare, run_scenario_on,
    scenario_ids, MetricsReport, RunOptions, ScenarioConfig, ScenarioRun, METRICS_FILE,
};
use polyphony_core::identity::{PersonalityVector, Trait};
use polyphony_core::memory::{MemoryStore, Tier};
use polyphony_core::planner::ActionStep;
use polyphony_core::session::{AgentTurn, Session, TurnOutcome};

use crate::roster::{build_provider, load_provider, SessionFactory};
use crate::serve::AUDIT_FILE;
use crate::{ConditionsArgs, Failure, MemctlAction, MemctlArgs, ReplArgs, ReplayArgs, RunArgs, EXIT_OK, EXIT_USAGE};

pub const CONFIG_FILE: &str = "config.json";
pub const SUMMARY_FILE: &str = "summary.json";

/// Everything a live session produced so far, in artifact form.
pub fn session_run(session: &Session, outcomes: &[TurnOutcome]) -> ScenarioRun {
    let turns: Vec<AgentTurn> = outcomes.iter().flat_map(|o| o.turns.iter().cloned()).collect();
    let mut metrics = compute_metrics(session.timeline().events(), session.transcript(), &[], session.decisions(), &turns);
    for a in session.agents() {
        metrics.turn_attribution.entry(a.agent_id.clone()).or_insert(0);
    }
    ScenarioRun {
        scenario_id: session.session_id().to_string(),
        timeline: session.timeline().clone(),
        transcript: session.transcript().to_vec(),
        decisions: session.decisions().to_vec(),
        outcomes: outcomes.to_vec(),
        probes: Vec::new(),
        metrics,
    }
}

pub fn write_audit(dir: &Path, audit: &AuditedGateway) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(dir.join(AUDIT_FILE))?);
    audit.write_jsonl(&mut w)?;
    w.flush()
}

fn unknown_condition(id: &str) -> Failure {
    let known: Vec<&str> = builtin_conditions().iter().map(|c| c.id).collect();
    Failure::usage(format!(
        "--condition: unknown condition {id:?} (conditions: {}; scenarios: {})",
        known.join(", "),
        scenario_ids().join(", ")
    ))
}

pub fn run(a: &RunArgs) -> Result<(), Failure> {
    if a.all {
        return run_all(a);
    }
    let config = match (&a.config, &a.condition) {
        (Some(p), _) => ScenarioConfig::load(p)?,
        (None, Some(id)) => builtin_scenario(id).ok_or_else(|| unknown_condition(id))?,
        (None, None) => return Err(Failure::usage("give --config, --condition or --all")),
    };
    let gateway: Arc<dyn Gateway> = match &a.provider {
        None => Arc::new(prepare(&config)?),
        Some(p) => {
            let cfg = load_provider(p)?;
            match (&cfg.provider, &cfg.fixture) {
                (ProviderKind::ScriptedMock, Some(f)) => {
                    let mock = ScriptedMock::load(f)
                        .map_err(|e| Failure::usage(format!("provider: {e}")))?
                        .with_dimension(cfg.dimension);
                    preflight(&config, &mock)?;
                    Arc::new(mock)
                }
                _ => build_provider(&cfg)?,
            }
        }
    };
    let audit = Arc::new(AuditedGateway::new(gateway));
    let opts = RunOptions {
        data_dir: a.data_dir.clone(),
        prompt_dir: a.dump_prompts.clone(),
    };
    let result = run_scenario_on(&config, audit.clone(), &opts)?;
    result.write_artifacts(&a.out)?;
    write_audit(&a.out, &audit)?;
    std::fs::write(a.out.join(CONFIG_FILE), config.to_json_pretty() + "\n")?;

    let mut out = std::io::stdout().lock();
    if a.json {
        writeln!(out, "{}", serde_json::to_string_pretty(&result.metrics).expect("metrics serialize"))?;
    } else {
        writeln!(
            out,
            "scenario {}: {} turn(s), {} event(s)",
            result.scenario_id,
            result.outcomes.len(),
            result.timeline.len()
        )?;
        write!(out, "{}", result.metrics.render_table())?;
        writeln!(out, "artifacts in {}", a.out.display())?;
    }
    Ok(())
}

/// Every built-in scenario in its own child process, artifacts under
/// `<out>/<scenario id>/`.
fn run_all(a: &RunArgs) -> Result<(), Failure> {
    let exe = std::env::current_exe()?;
    std::fs::create_dir_all(&a.out)?;
    let mut worst = EXIT_OK;
    let mut summary: BTreeMap<String, serde_json::Value> = BTreeMap::new();
    let sub = |base: &Option<PathBuf>, id: &str| base.as_ref().map(|d| d.join(id));
    for id in scenario_ids() {
        let dir = a.out.join(&id);
        let mut cmd = Process::new(&exe);
        cmd.args(["run", "--condition", &id, "--out"]).arg(&dir);
        if let Some(d) = sub(&a.dump_prompts, &id) {
            cmd.arg("--dump-prompts").arg(d);
        }
        if let Some(d) = sub(&a.data_dir, &id) {
            cmd.arg("--data-dir").arg(d);
        }
        if let Some(p) = &a.provider {
            cmd.arg("--provider").arg(p);
        }
        let out = cmd.output()?;
        let code = out.status.code().unwrap_or(1);
        worst = worst.max(code);
        if code == EXIT_OK {
            let metrics: MetricsReport = serde_json::from_slice(&std::fs::read(dir.join(METRICS_FILE))?)
                .map_err(|e| Failure::runtime(format!("{id}: {e}")))?;
            println!(
                "{id:<20} ok    overlaps={} recall={}/{}",
                metrics.overlap_count, metrics.recall_hits, metrics.recall_probes
            );
            summary.insert(id, serde_json::to_value(metrics).expect("metrics serialize"));
        } else {
            println!("{id:<20} exit {code}");
            eprint!("{}", String::from_utf8_lossy(&out.stderr));
        }
    }
    std::fs::write(a.out.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n")?;
    match worst {
        EXIT_OK => Ok(()),
        EXIT_USAGE => Err(Failure::usage("some scenarios had configuration errors")),
        _ => Err(Failure::runtime("some scenarios failed")),
    }
}

pub fn describe_step(step: &ActionStep) -> String {
    match step {
        ActionStep::Speak { text } => format!("speak {text:?}"),
        ActionStep::Gesture { name } => format!("gesture {name}"),
        ActionStep::Posture { name } => format!("posture {name}"),
        ActionStep::Head { direction } => format!("head {direction}"),
        ActionStep::Move { direction, magnitude } => format!("move {direction} {magnitude}"),
    }
}

fn event_line(e: &InteractionEvent) -> String {
    let failed = if e.status == EventStatus::Failed { "  [failed]" } else { "" };
    format!(
        "{:>7}-{:>7} ms  {:<10} {}{failed}",
        e.start_ms,
        e.end_ms,
        e.agent_id,
        describe_step(&e.step)
    )
}

/// Selected agents first in selection order, then the rest by score.
fn decision_lines(d: &CoordinationDecision) -> Vec<String> {
    let mode = if d.coordinated { "coordinated" } else { "independent" };
    let fallback = if d.fallback_used { "  fallback" } else { "" };
    let mut lines = vec![format!("turn {}  tau={}  {mode}{fallback}", d.turn_index, d.threshold)];
    for (i, id) in d.selected.iter().enumerate() {
        lines.push(format!("  {}. {id:<10} {:.3}", i + 1, d.scores.get(id).copied().unwrap_or(0.0)));
    }
    let mut rest: Vec<(&String, &f64)> = d.scores.iter().filter(|(id, _)| !d.selected.contains(id)).collect();
    rest.sort_by(|a, b| b.1.total_cmp(a.1));
    for (id, s) in rest {
        lines.push(format!("     {id:<10} {s:.3}"));
    }
    if !d.rationale.is_empty() {
        lines.push(format!("  rationale: {}", d.rationale));
    }
    lines
}

const REPL_HELP: &str = "commands: /memory <agent>, /coordination on|off, /longterm on|off, /reset [session], /help, /quit";

fn on_off(arg: Option<&str>) -> Option<bool> {
    match arg {
        Some("on") => Some(true),
        Some("off") => Some(false),
        _ => None,
    }
}

/// Reads utterances line by line until `/quit` or end of input, then writes
/// the artifacts. Per-turn failures are reported and the session goes on.
pub fn repl(a: &ReplArgs, input: impl BufRead, mut out: impl Write) -> Result<(), Failure> {
    let factory = SessionFactory::from_args(&a.live)?;
    let (mut session, audit) = factory.new_session(&a.session)?;
    let mut outcomes = Vec::new();
    let names: Vec<String> =
        session.agents().iter().map(|x| format!("{} ({})", x.display_name, x.agent_id)).collect();
    writeln!(out, "agents: {}  provider: {}", names.join(", "), factory.provider_label)?;
    writeln!(out, "{REPL_HELP}")?;
    let mut resets = 1;
    let mut lines = input.lines();
    loop {
        write!(out, "> ")?;
        out.flush()?;
        let Some(line) = lines.next() else { break };
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(cmd) = line.strip_prefix('/') {
            let mut parts = cmd.split_whitespace();
            match (parts.next(), parts.next()) {
                (Some("quit" | "exit"), _) => break,
                (Some("help"), _) => writeln!(out, "{REPL_HELP}")?,
                (Some("memory"), Some(agent)) => match session.memory_view(agent) {
                    Ok(records) if records.is_empty() => writeln!(out, "{agent}: no long-term records")?,
                    Ok(records) => {
                        if let Some(r) = session.last_retrieval(agent) {
                            writeln!(out, "last query: {:?}", r.query_text)?;
                            for s in &r.records {
                                writeln!(out, "  retrieved {:.3} {}", s.score, s.record.text)?;
                            }
                        }
                        for (r, sim) in records {
                            let sim = sim.map_or("-".to_string(), |s| format!("{s:.3}"));
                            writeln!(out, "  {:<8} {:>6} {}", r.tier.name(), sim, r.text)?;
                        }
                    }
                    Err(e) => writeln!(out, "error: {e}")?,
                },
                (Some("coordination"), arg) => match on_off(arg) {
                    Some(v) => {
                        session.set_coordination(v);
                        writeln!(out, "coordination {}", if v { "on" } else { "off" })?;
                    }
                    None => writeln!(out, "usage: /coordination on|off")?,
                },
                (Some("longterm"), arg) => match on_off(arg) {
                    Some(v) => match session.set_longterm_memory(v) {
                        Ok(()) => writeln!(out, "long-term memory {}", if v { "on" } else { "off" })?,
                        Err(e) => writeln!(out, "error: {e}")?,
                    },
                    None => writeln!(out, "usage: /longterm on|off")?,
                },
                (Some("reset"), arg) => {
                    resets += 1;
                    let id = arg.map_or_else(|| format!("{}-{resets}", a.session), str::to_string);
                    match session.reset(&id) {
                        Ok(()) => writeln!(out, "new session {id}")?,
                        Err(e) => writeln!(out, "error: {e}")?,
                    }
                }
                _ => writeln!(out, "unknown command; {REPL_HELP}")?,
            }
            continue;
        }
        match session.handle(&polyphony_core::perception::MultimodalInput::utterance(line)) {
            Ok(o) => {
                for l in decision_lines(&o.decision) {
                    writeln!(out, "{l}")?;
                }
                for t in &o.turns {
                    for e in &t.events {
                        writeln!(out, "  {}", event_line(e))?;
                    }
                    if let Some(err) = &t.execution_error {
                        writeln!(out, "  {}: execution error: {err}", t.agent_id)?;
                    }
                }
                outcomes.push(o);
            }
            Err(e) => writeln!(out, "error: {e}")?,
        }
    }
    let run = session_run(&session, &outcomes);
    run.write_artifacts(&a.out)?;
    write_audit(&a.out, &audit)?;
    writeln!(out, "\nartifacts in {}", a.out.display())?;
    Ok(())
}

pub fn memctl(a: &MemctlArgs, out: &mut impl Write) -> Result<(), Failure> {
    if !a.data_dir.is_dir() {
        return Err(Failure::usage(format!("--data-dir {}: not a directory", a.data_dir.display())));
    }
    // Only the dimension matters here; nothing is embedded.
    let embedder: Arc<dyn Gateway> = Arc::new(ScriptedMock::parse("").expect("empty fixture").with_dimension(a.dimension));
    let store = MemoryStore::open(&a.data_dir, embedder).map_err(|e| Failure::runtime(e.to_string()))?;
    let known = |ns: &str| -> Result<(), Failure> {
        if store.namespaces().iter().any(|n| n == ns) {
            Ok(())
        } else {
            Err(Failure::usage(format!("no namespace {ns:?} in {}", a.data_dir.display())))
        }
    };
    match &a.action {
        MemctlAction::List => {
            for ns in store.namespaces() {
                let records = store.records(&ns).map_err(|e| Failure::runtime(e.to_string()))?;
                let semantic = records.iter().filter(|r| r.tier == Tier::Semantic).count();
                writeln!(
                    out,
                    "{ns:<20} {:>6} records ({semantic} semantic, {} episodic)",
                    records.len(),
                    records.len() - semantic
                )?;
            }
        }
        MemctlAction::Count { namespace } => {
            known(namespace)?;
            writeln!(out, "{}", store.count(namespace).map_err(|e| Failure::runtime(e.to_string()))?)?;
        }
        MemctlAction::Dump { namespace, tier, json } => {
            known(namespace)?;
            for r in store.records(namespace).map_err(|e| Failure::runtime(e.to_string()))? {
                if tier.as_deref().is_some_and(|t| t != r.tier.name()) {
                    continue;
                }
                if *json {
                    writeln!(out, "{}", serde_json::to_string(&r).expect("record serializes"))?;
                } else {
                    writeln!(
                        out,
                        "{:>6} {:<8} {}#{:<4} {}",
                        r.created_at,
                        r.tier.name(),
                        r.session_id,
                        r.source_turn,
                        r.text
                    )?;
                }
            }
        }
        MemctlAction::Purge { namespace, yes } => {
            known(namespace)?;
            if !yes {
                return Err(Failure::usage(format!("purge deletes every record of {namespace:?}; pass --yes to confirm")));
            }
            let n = store.purge(namespace).map_err(|e| Failure::runtime(e.to_string()))?;
            writeln!(out, "purged {n} record(s) from {namespace}")?;
        }
    }
    Ok(())
}

pub fn replay(a: &ReplayArgs, out: &mut impl Write) -> Result<(), Failure> {
    let file = File::open(&a.timeline).map_err(|e| Failure::usage(format!("{}: {e}", a.timeline.display())))?;
    let events = Timeline::read_jsonl(BufReader::new(file)).map_err(|e| Failure::usage(format!("{}: {e}", a.timeline.display())))?;
    let events: Vec<InteractionEvent> = events
        .into_iter()
        .filter(|e| a.session.as_ref().map_or(true, |s| *s == e.session_id))
        .collect();
    // Sessions and turns in order of first appearance.
    let mut order: Vec<(String, u64)> = Vec::new();
    let mut groups: BTreeMap<(String, u64), Vec<&InteractionEvent>> = BTreeMap::new();
    for e in &events {
        let key = (e.session_id.clone(), e.turn_index);
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(e);
    }
    let overlaps = overlapping_pairs(&events);
    let mut session = None;
    for key in &order {
        if session.as_ref() != Some(&key.0) {
            writeln!(out, "== session {} ==", key.0)?;
            session = Some(key.0.clone());
        }
        writeln!(out, "-- turn {} --", key.1)?;
        for e in &groups[key] {
            writeln!(out, "  {}", event_line(e))?;
        }
        for (_, x, y) in overlaps.iter().filter(|(t, _, _)| *t == key.1) {
            writeln!(out, "  ! overlapping speech: {x} and {y}")?;
        }
    }
    writeln!(out, "{} event(s), {} turn(s), {} overlap(s)", events.len(), order.len(), overlaps.len())?;
    Ok(())
}

fn personality_tag(p: &PersonalityVector) -> String {
    let tags: Vec<String> = Trait::ALL
        .into_iter()
        .filter(|t| p.get(*t) != 3)
        .map(|t| format!("{}{}", t.name()[..1].to_uppercase(), p.get(t)))
        .collect();
    if tags.is_empty() {
        "neutral".into()
    } else {
        tags.join(",")
    }
}

pub fn conditions(a: &ConditionsArgs, out: &mut impl Write) -> Result<(), Failure> {
    if let Some(id) = &a.show {
        let cfg = builtin_scenario(id).ok_or_else(|| unknown_condition(id))?;
        writeln!(out, "{}", cfg.to_json_pretty())?;
        return Ok(());
    }
    writeln!(out, "{:<18} {:<20} {:<5} {:<7} {:>6}  agents", "condition", "scenario", "coord", "memory", "probes")?;
    for c in builtin_conditions() {
        for s in &c.variants {
            let agents: Vec<String> = s
                .agents
                .iter()
                .map(|x| format!("{}[{}]", x.display_name, personality_tag(&x.personality)))
                .collect();
            writeln!(
                out,
                "{:<18} {:<20} {:<5} {:<7} {:>6}  {}",
                c.id,
                s.scenario_id,
                if s.coordination_enabled { "on" } else { "off" },
                if s.longterm_memory_enabled { "on" } else { "off" },
                s.probe_count(),
                agents.join(" ")
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use polyphony_core::executor::ClockMode;

    #[test]
    fn decisions_list_selected_agents_first() {
        let d = CoordinationDecision {
            turn_index: 4,
            scores: [("a".to_string(), 0.6), ("b".to_string(), 0.9), ("c".to_string(), 0.1)].into_iter().collect(),
            threshold: polyphony_core::coordinator::Threshold::new(0.5).unwrap(),
            selected: vec!["b".into(), "a".into()],
            rationale: String::new(),
            fallback_used: false,
            coordinated: true,
        };
        let lines = decision_lines(&d);
        assert!(lines[1].contains("1. b"));
        assert!(lines[2].contains("2. a"));
        assert!(lines[3].trim_start().starts_with('c'));
    }

    #[test]
    fn personality_tags_name_non_neutral_traits() {
        assert_eq!(personality_tag(&PersonalityVector::NEUTRAL), "neutral");
        assert_eq!(personality_tag(&PersonalityVector::with_single(Trait::Extraversion, 5)), "E5");
    }

    #[test]
    fn replay_groups_turns_and_flags_overlap() {
        let mut t = Timeline::new(ClockMode::Simulated);
        t.record("a", ActionStep::speak("hello there"), 0, 500, "s1", 1, EventStatus::Ok);
        t.record("b", ActionStep::speak("hi"), 100, 600, "s1", 1, EventStatus::Ok);
        t.record("a", ActionStep::gesture("wave"), 600, 1400, "s2", 2, EventStatus::Ok);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        t.write_jsonl(File::create(&p).unwrap()).unwrap();
        let mut out = Vec::new();
        replay(&ReplayArgs { timeline: p, session: None }, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.contains("== session s1 =="));
        assert!(text.contains("== session s2 =="));
        assert!(text.contains("! overlapping speech: a and b"));
        assert!(text.contains("3 event(s), 2 turn(s), 1 overlap(s)"));
    }
}
