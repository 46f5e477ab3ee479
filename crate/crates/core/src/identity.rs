//! Agent identity: Big Five personality vectors, the trait descriptor table,
//! capability sets and the composed agent profile.
//!
//! Identity data is immutable once a session is registered, so profiles are
//! shared freely between agent loops.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::IdentityError;

const BUILTIN_DESCRIPTORS: &str = include_str!("../resources/descriptors.csv");

pub const NEUTRAL_LEVEL: u8 = 3;
pub const INTENSIFIER: &str = "extremely ";
pub const SOFTENER: &str = "somewhat ";

/// One of the five OCEAN dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trait {
    Openness,
    Conscientiousness,
    Extraversion,
    Agreeableness,
    Neuroticism,
}

impl Trait {
    pub const ALL: [Trait; 5] = [
        Trait::Openness,
        Trait::Conscientiousness,
        Trait::Extraversion,
        Trait::Agreeableness,
        Trait::Neuroticism,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Trait::Openness => "openness",
            Trait::Conscientiousness => "conscientiousness",
            Trait::Extraversion => "extraversion",
            Trait::Agreeableness => "agreeableness",
            Trait::Neuroticism => "neuroticism",
        }
    }

    pub fn parse(s: &str) -> Option<Trait> {
        Trait::ALL.into_iter().find(|t| t.name() == s)
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Trait {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Five integer trait levels, each expected in `1..=5` with 3 as neutral.
///
/// Fields are plain integers so that configuration files can be loaded and
/// then checked with [`PersonalityVector::violations`] rather than failing at
/// parse time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PersonalityVector {
    pub openness: u8,
    pub conscientiousness: u8,
    pub extraversion: u8,
    pub agreeableness: u8,
    pub neuroticism: u8,
}

impl Default for PersonalityVector {
    fn default() -> Self {
        Self::NEUTRAL
    }
}

impl PersonalityVector {
    pub const NEUTRAL: PersonalityVector = PersonalityVector {
        openness: 3,
        conscientiousness: 3,
        extraversion: 3,
        agreeableness: 3,
        neuroticism: 3,
    };

    pub fn new(o: u8, c: u8, e: u8, a: u8, n: u8) -> Self {
        Self {
            openness: o,
            conscientiousness: c,
            extraversion: e,
            agreeableness: a,
            neuroticism: n,
        }
    }

    /// Neutral everywhere except `target`, which is set to `level`.
    pub fn with_single(target: Trait, level: u8) -> Self {
        let mut v = Self::NEUTRAL;
        v.set(target, level);
        v
    }

    pub fn get(&self, t: Trait) -> u8 {
        match t {
            Trait::Openness => self.openness,
            Trait::Conscientiousness => self.conscientiousness,
            Trait::Extraversion => self.extraversion,
            Trait::Agreeableness => self.agreeableness,
            Trait::Neuroticism => self.neuroticism,
        }
    }

    pub fn set(&mut self, t: Trait, level: u8) {
        match t {
            Trait::Openness => self.openness = level,
            Trait::Conscientiousness => self.conscientiousness = level,
            Trait::Extraversion => self.extraversion = level,
            Trait::Agreeableness => self.agreeableness = level,
            Trait::Neuroticism => self.neuroticism = level,
        }
    }

    pub fn levels(&self) -> [(Trait, u8); 5] {
        Trait::ALL.map(|t| (t, self.get(t)))
    }

    /// Traits whose level is outside `1..=5`.
    pub fn violations(&self) -> Vec<Trait> {
        self.levels()
            .into_iter()
            .filter(|(_, l)| !(1..=5).contains(l))
            .map(|(t, _)| t)
            .collect()
    }

    pub fn is_valid(&self) -> bool {
        self.violations().is_empty()
    }

    pub fn non_neutral_count(&self) -> usize {
        self.levels()
            .iter()
            .filter(|(_, l)| *l != NEUTRAL_LEVEL)
            .count()
    }
}

/// The full 5x5 trait/level descriptor table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DescriptorTable {
    cells: [[String; 5]; 5],
}

impl DescriptorTable {
    /// The table shipped in `resources/descriptors.csv`.
    pub fn builtin() -> &'static DescriptorTable {
        static TABLE: OnceLock<DescriptorTable> = OnceLock::new();
        TABLE.get_or_init(|| {
            DescriptorTable::parse(BUILTIN_DESCRIPTORS).expect("builtin descriptor table is valid")
        })
    }

    pub fn load(path: &Path) -> Result<DescriptorTable, IdentityError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| IdentityError::Table(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Parses `trait,level,descriptor` records. Blank lines and `#` comments
    /// are ignored. All 25 cells must be present exactly once.
    pub fn parse(text: &str) -> Result<DescriptorTable, IdentityError> {
        let mut cells: [[Option<String>; 5]; 5] = Default::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: &str| IdentityError::Table(format!("line {}: {msg}", lineno + 1));
            let mut parts = line.splitn(3, ',');
            let (Some(t), Some(l), Some(d)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(bad("expected `trait,level,descriptor`"));
            };
            let t = Trait::parse(t.trim()).ok_or_else(|| bad("unknown trait"))?;
            let level: u8 = l.trim().parse().map_err(|_| bad("level is not an integer"))?;
            if !(1..=5).contains(&level) {
                return Err(bad("level out of range"));
            }
            let expected_prefix = match level {
                1 | 5 => Some(INTENSIFIER),
                2 | 4 => Some(SOFTENER),
                _ => None,
            };
            match expected_prefix {
                None if !d.is_empty() => return Err(bad("neutral level must have an empty descriptor")),
                Some(p) if !d.starts_with(p) || d.len() == p.len() => {
                    return Err(bad(&format!("descriptor must start with {p:?}")))
                }
                _ => {}
            }
            let slot = &mut cells[t.index()][level as usize - 1];
            if slot.is_some() {
                return Err(bad("duplicate cell"));
            }
            *slot = Some(d.to_string());
        }
        let mut out: [[String; 5]; 5] = Default::default();
        for t in Trait::ALL {
            for level in 1..=5u8 {
                out[t.index()][level as usize - 1] = cells[t.index()][level as usize - 1]
                    .take()
                    .ok_or_else(|| IdentityError::Table(format!("missing cell {t},{level}")))?;
            }
        }
        Ok(DescriptorTable { cells: out })
    }

    pub fn describe(&self, t: Trait, level: u8) -> Result<&str, IdentityError> {
        if !(1..=5).contains(&level) {
            return Err(IdentityError::LevelOutOfRange { trait_: t, level });
        }
        Ok(&self.cells[t.index()][level as usize - 1])
    }

    /// Renders the table back into its file format.
    pub fn to_records(&self) -> String {
        let mut s = String::new();
        for t in Trait::ALL {
            for level in 1..=5u8 {
                s.push_str(&format!("{t},{level},{}\n", self.cells[t.index()][level as usize - 1]));
            }
        }
        s
    }

    /// Every non-empty descriptor in the table.
    pub fn non_empty(&self) -> impl Iterator<Item = &str> {
        self.cells.iter().flatten().map(String::as_str).filter(|d| !d.is_empty())
    }
}

/// Natural-language descriptor for one trait level, from the built-in table.
/// The neutral level maps to the empty string.
pub fn describe_trait(t: Trait, level: u8) -> Result<&'static str, IdentityError> {
    DescriptorTable::builtin().describe(t, level)
}

/// System-prompt fragment: `You are {name}.` followed by
/// ` You are {d1}, {d2}.` when any trait is non-neutral.
pub fn persona_preamble(p: &PersonalityVector, display_name: &str) -> Result<String, IdentityError> {
    let table = DescriptorTable::builtin();
    let mut descriptors = Vec::new();
    for (t, level) in p.levels() {
        let d = table.describe(t, level)?;
        if !d.is_empty() {
            descriptors.push(d);
        }
    }
    let mut out = format!("You are {display_name}.");
    if !descriptors.is_empty() {
        out.push_str(" You are ");
        out.push_str(&descriptors.join(", "));
        out.push('.');
    }
    Ok(out)
}

/// Executable primitive categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Speak,
    Gesture,
    Posture,
    Head,
    Move,
}

impl ActionKind {
    pub const ALL: [ActionKind; 5] = [
        ActionKind::Speak,
        ActionKind::Gesture,
        ActionKind::Posture,
        ActionKind::Head,
        ActionKind::Move,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActionKind::Speak => "speak",
            ActionKind::Gesture => "gesture",
            ActionKind::Posture => "posture",
            ActionKind::Head => "head",
            ActionKind::Move => "move",
        }
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn vocab(words: &[&str]) -> BTreeSet<String> {
    words.iter().map(|w| w.to_string()).collect()
}

fn default_primitives() -> BTreeSet<ActionKind> {
    ActionKind::ALL.into_iter().collect()
}
fn default_gestures() -> BTreeSet<String> {
    vocab(&["nod", "point", "shake_head", "wave"])
}
fn default_postures() -> BTreeSet<String> {
    vocab(&["crouch", "sit", "stand"])
}
fn default_head() -> BTreeSet<String> {
    vocab(&["center", "down", "left", "right", "up"])
}
fn default_move() -> BTreeSet<String> {
    vocab(&["backward", "forward", "turn_left", "turn_right"])
}
fn default_max_utterance() -> usize {
    600
}
fn default_max_magnitude() -> f64 {
    10.0
}

/// Primitive kinds an agent may execute, with the closed parameter
/// vocabulary for each kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapabilitySet {
    #[serde(default = "default_primitives")]
    pub primitives: BTreeSet<ActionKind>,
    #[serde(default = "default_gestures")]
    pub gestures: BTreeSet<String>,
    #[serde(default = "default_postures")]
    pub postures: BTreeSet<String>,
    #[serde(default = "default_head")]
    pub head_directions: BTreeSet<String>,
    #[serde(default = "default_move")]
    pub move_directions: BTreeSet<String>,
    #[serde(default = "default_max_utterance")]
    pub max_utterance_chars: usize,
    /// Upper bound on a move step's magnitude (distance units or quarter turns).
    #[serde(default = "default_max_magnitude")]
    pub max_move_magnitude: f64,
}

impl Default for CapabilitySet {
    fn default() -> Self {
        Self {
            primitives: default_primitives(),
            gestures: default_gestures(),
            postures: default_postures(),
            head_directions: default_head(),
            move_directions: default_move(),
            max_utterance_chars: default_max_utterance(),
            max_move_magnitude: default_max_magnitude(),
        }
    }
}

impl CapabilitySet {
    /// Default vocabularies restricted to `kinds`.
    pub fn with_kinds(kinds: impl IntoIterator<Item = ActionKind>) -> Self {
        Self {
            primitives: kinds.into_iter().collect(),
            ..Self::default()
        }
    }

    pub fn allows(&self, kind: ActionKind) -> bool {
        self.primitives.contains(&kind)
    }

    pub fn vocabulary(&self, kind: ActionKind) -> Option<&BTreeSet<String>> {
        match kind {
            ActionKind::Speak => None,
            ActionKind::Gesture => Some(&self.gestures),
            ActionKind::Posture => Some(&self.postures),
            ActionKind::Head => Some(&self.head_directions),
            ActionKind::Move => Some(&self.move_directions),
        }
    }

    pub fn violations(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        if !self.allows(ActionKind::Speak) {
            v.push(Violation::new("capabilities.primitives", "Speak capability required"));
        }
        for kind in &self.primitives {
            if let Some(words) = self.vocabulary(*kind) {
                if words.is_empty() || words.iter().any(|w| w.trim().is_empty()) {
                    v.push(Violation::new(
                        format!("capabilities.{kind}"),
                        "declared kind has an empty or blank vocabulary",
                    ));
                }
            }
        }
        if self.max_utterance_chars == 0 {
            v.push(Violation::new("capabilities.max_utterance_chars", "must be positive"));
        }
        if !(self.max_move_magnitude.is_finite() && self.max_move_magnitude > 0.0) {
            v.push(Violation::new("capabilities.max_move_magnitude", "must be a positive finite number"));
        }
        v
    }
}

/// The identity bundle that distinguishes one agent from another.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentProfile {
    pub agent_id: String,
    pub display_name: String,
    #[serde(default)]
    pub personality: PersonalityVector,
    #[serde(default)]
    pub capabilities: CapabilitySet,
    /// Keys the agent's private long-term store. Defaults to the agent id.
    #[serde(default)]
    pub memory_namespace: String,
}

impl AgentProfile {
    pub fn new(agent_id: &str, display_name: &str, personality: PersonalityVector) -> Self {
        Self {
            agent_id: agent_id.to_string(),
            display_name: display_name.to_string(),
            personality,
            capabilities: CapabilitySet::default(),
            memory_namespace: agent_id.to_string(),
        }
    }

    pub fn persona(&self) -> Result<String, IdentityError> {
        persona_preamble(&self.personality, &self.display_name)
    }

    /// Fills defaults that depend on other fields.
    pub fn normalized(mut self) -> Self {
        if self.memory_namespace.is_empty() {
            self.memory_namespace = self.agent_id.clone();
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl Violation {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Checks every locally checkable invariant of a profile. Uniqueness across
/// agents is checked by [`validate_roster`].
pub fn validate_profile(profile: &AgentProfile) -> Result<(), Vec<Violation>> {
    let mut v = Vec::new();
    if profile.agent_id.trim().is_empty() {
        v.push(Violation::new("agent_id", "must not be empty"));
    }
    if profile.display_name.trim().is_empty() {
        v.push(Violation::new("display_name", "must not be empty"));
    }
    if profile.memory_namespace.trim().is_empty() {
        v.push(Violation::new("memory_namespace", "must not be empty"));
    } else if profile
        .memory_namespace
        .chars()
        .any(|c| !(c.is_ascii_alphanumeric() || c == '_' || c == '-'))
    {
        v.push(Violation::new(
            "memory_namespace",
            "only ASCII letters, digits, '_' and '-' are allowed",
        ));
    }
    for t in profile.personality.violations() {
        v.push(Violation::new(format!("personality.{t}"), "trait out of range"));
    }
    v.extend(profile.capabilities.violations());
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

/// Per-profile validation plus agent id, display name and namespace uniqueness.
pub fn validate_roster(profiles: &[AgentProfile]) -> Result<(), Vec<Violation>> {
    let mut v = Vec::new();
    if profiles.is_empty() {
        v.push(Violation::new("agents", "at least one agent is required"));
    }
    let mut ids = HashSet::new();
    let mut names = HashSet::new();
    let mut namespaces = HashSet::new();
    for (i, p) in profiles.iter().enumerate() {
        if let Err(errs) = validate_profile(p) {
            v.extend(
                errs.into_iter()
                    .map(|e| Violation::new(format!("agents[{i}].{}", e.field), e.message)),
            );
        }
        if !ids.insert(p.agent_id.as_str()) {
            v.push(Violation::new(format!("agents[{i}].agent_id"), "duplicate agent_id"));
        }
        if !names.insert(p.display_name.to_lowercase()) {
            v.push(Violation::new(format!("agents[{i}].display_name"), "duplicate display_name"));
        }
        if !namespaces.insert(p.memory_namespace.as_str()) {
            v.push(Violation::new(
                format!("agents[{i}].memory_namespace"),
                "memory_namespace shared with another agent",
            ));
        }
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchored_descriptors() {
        assert_eq!(describe_trait(Trait::Extraversion, 5).unwrap(), "extremely outgoing");
        assert_eq!(describe_trait(Trait::Openness, 3).unwrap(), "");
        assert_eq!(
            describe_trait(Trait::Conscientiousness, 2).unwrap(),
            "somewhat careless and spontaneous"
        );
    }

    #[test]
    fn out_of_range_level_is_rejected() {
        assert!(matches!(
            describe_trait(Trait::Agreeableness, 0),
            Err(IdentityError::LevelOutOfRange { level: 0, .. })
        ));
        assert!(describe_trait(Trait::Agreeableness, 6).is_err());
    }

    #[test]
    fn intensity_rows() {
        for t in Trait::ALL {
            assert_eq!(describe_trait(t, 3).unwrap(), "");
            for l in [1, 5] {
                assert!(describe_trait(t, l).unwrap().starts_with(INTENSIFIER));
            }
            for l in [2, 4] {
                assert!(describe_trait(t, l).unwrap().starts_with(SOFTENER));
            }
        }
    }

    #[test]
    fn table_round_trips_through_file_format() {
        let table = DescriptorTable::builtin();
        let reparsed = DescriptorTable::parse(&table.to_records()).unwrap();
        assert_eq!(&reparsed, table);
    }

    #[test]
    fn table_rejects_gaps_and_bad_prefixes() {
        let text = DescriptorTable::builtin().to_records();
        let missing: String = text.lines().skip(1).map(|l| format!("{l}\n")).collect();
        assert!(DescriptorTable::parse(&missing).is_err());
        let bad = text.replace("extremely outgoing", "very outgoing");
        assert!(DescriptorTable::parse(&bad).is_err());
        let dup = format!("{text}openness,1,extremely bored\n");
        assert!(DescriptorTable::parse(&dup).is_err());
    }

    #[test]
    fn preamble_shapes() {
        let neutral = persona_preamble(&PersonalityVector::NEUTRAL, "Nao-A").unwrap();
        assert_eq!(neutral, "You are Nao-A.");

        let e5 = persona_preamble(&PersonalityVector::new(3, 3, 5, 3, 3), "Nao-A").unwrap();
        assert_eq!(e5, "You are Nao-A. You are extremely outgoing.");
        assert_eq!(e5.matches("extremely outgoing").count(), 1);

        let two = persona_preamble(&PersonalityVector::new(1, 3, 3, 3, 5), "Nao-B").unwrap();
        assert_eq!(
            two,
            "You are Nao-B. You are extremely conventional and routine-bound, extremely anxious and sensitive."
        );
    }

    #[test]
    fn preamble_rejects_invalid_vector() {
        assert!(persona_preamble(&PersonalityVector::new(3, 3, 9, 3, 3), "X").is_err());
    }

    #[test]
    fn profile_validation() {
        let ok = AgentProfile::new("nao_a", "Nao-A", PersonalityVector::NEUTRAL);
        assert!(validate_profile(&ok).is_ok());

        let mut loud = ok.clone();
        loud.personality.extraversion = 6;
        let errs = validate_profile(&loud).unwrap_err();
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].message, "trait out of range");
        assert_eq!(errs[0].field, "personality.extraversion");

        let mut mute = ok.clone();
        mute.capabilities.primitives.clear();
        let errs = validate_profile(&mute).unwrap_err();
        assert!(errs.iter().any(|e| e.message == "Speak capability required"));
    }

    #[test]
    fn roster_uniqueness() {
        let a = AgentProfile::new("a", "A", PersonalityVector::NEUTRAL);
        let mut b = AgentProfile::new("a", "B", PersonalityVector::NEUTRAL);
        let errs = validate_roster(&[a.clone(), b.clone()]).unwrap_err();
        assert!(errs.iter().any(|e| e.message == "duplicate agent_id"));
        b.agent_id = "b".into();
        b.memory_namespace = "a".into();
        let errs = validate_roster(&[a.clone(), b.clone()]).unwrap_err();
        assert!(errs.iter().any(|e| e.field.ends_with("memory_namespace")));
        b.memory_namespace = "b".into();
        assert!(validate_roster(&[a, b]).is_ok());
    }

    #[test]
    fn capability_defaults_deserialize_from_partial_config() {
        let caps: CapabilitySet = serde_json::from_str(r#"{"primitives":["speak","gesture"]}"#).unwrap();
        assert!(caps.allows(ActionKind::Gesture));
        assert!(!caps.allows(ActionKind::Move));
        assert!(caps.gestures.contains("wave"));
    }
}
