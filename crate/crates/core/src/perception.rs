//! Turns one multimodal input into the textual observation that grounds
//! retrieval and planning.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use base64::Engine;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::PerceptionError;
use crate::gateway::{Gateway, ModelRequest};
use crate::identity::AgentProfile;

const GROUNDING_PROMPT: &str = "You are the perception module of a social robot. Describe the current \
interaction in one or two plain sentences: restate what the speaker said, ground any spoken references \
in the image, name the visible entities and their spatial relationships, and note non-verbal cues such \
as gaze direction or gestures.";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    Human,
    Agent(String),
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Speaker::Human => f.write_str("Human"),
            Speaker::Agent(id) => f.write_str(id),
        }
    }
}

/// Scene input: a plain description, or a handle to an image that only a
/// vision-capable provider can interpret.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenePayload {
    Description(String),
    Image(PathBuf),
}

impl ScenePayload {
    fn is_empty(&self) -> bool {
        match self {
            ScenePayload::Description(d) => d.trim().is_empty(),
            ScenePayload::Image(p) => p.as_os_str().is_empty(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultimodalInput {
    pub speech_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<ScenePayload>,
    /// Per-agent viewpoints that replace `scene` for the named agent.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub views: BTreeMap<String, ScenePayload>,
    pub speaker: Speaker,
    pub timestamp_ms: u64,
}

impl MultimodalInput {
    pub fn utterance(text: &str) -> Self {
        Self {
            speech_text: text.to_string(),
            scene: None,
            views: BTreeMap::new(),
            speaker: Speaker::Human,
            timestamp_ms: 0,
        }
    }

    pub fn with_scene(mut self, scene: ScenePayload) -> Self {
        self.scene = Some(scene);
        self
    }

    pub fn with_view(mut self, agent_id: &str, scene: ScenePayload) -> Self {
        self.views.insert(agent_id.to_string(), scene);
        self
    }

    pub fn scene_for(&self, agent_id: &str) -> Option<&ScenePayload> {
        self.views.get(agent_id).or(self.scene.as_ref()).filter(|s| !s.is_empty())
    }

    pub fn validate(&self) -> Result<(), PerceptionError> {
        let has_scene = self.scene.as_ref().is_some_and(|s| !s.is_empty()) || self.views.values().any(|s| !s.is_empty());
        if self.speech_text.trim().is_empty() && !has_scene {
            return Err(PerceptionError::InvalidArgument(
                "input has neither speech nor scene".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub text: String,
    pub source: MultimodalInput,
    pub agent_id: String,
    pub turn_index: u64,
    /// Set when a vision provider failed and the template was used instead.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degraded: bool,
}

/// Deterministic observation text:
/// `[{speaker}] said: {speech}. Scene: {scene or 'unchanged'}`.
///
/// The joining period is omitted when the utterance already ends in
/// sentence punctuation.
pub fn template_text(speaker: &Speaker, speech: &str, scene: Option<&ScenePayload>) -> String {
    let speech = speech.trim();
    let scene = match scene {
        Some(ScenePayload::Description(d)) if !d.trim().is_empty() => d.trim().to_string(),
        Some(ScenePayload::Image(p)) if !p.as_os_str().is_empty() => format!("image {}", p.display()),
        _ => "unchanged".to_string(),
    };
    if speech.is_empty() {
        return format!("[{speaker}] said nothing. Scene: {scene}");
    }
    let stop = if speech.ends_with(['.', '!', '?']) { "" } else { "." };
    format!("[{speaker}] said: {speech}{stop} Scene: {scene}")
}

/// Produces `agent`'s observation of `input` at `turn_index`.
///
/// With a vision-capable gateway and an image scene, the provider writes the
/// grounded description; any failure on that path falls back to
/// [`template_text`] and marks the observation degraded.
pub fn perceive(
    agent: &AgentProfile,
    input: &MultimodalInput,
    turn_index: u64,
    gateway: Option<&dyn Gateway>,
) -> Result<Observation, PerceptionError> {
    input.validate()?;
    let scene = input.scene_for(&agent.agent_id);
    let mut degraded = false;
    let text = match (gateway, scene) {
        (Some(g), Some(ScenePayload::Image(path))) if g.supports_vision() => {
            match ground_with_vision(g, &input.speaker, &input.speech_text, path) {
                Ok(t) => t,
                Err(reason) => {
                    warn!(agent = %agent.agent_id, %reason, "vision grounding failed, using template");
                    degraded = true;
                    template_text(&input.speaker, &input.speech_text, scene)
                }
            }
        }
        _ => template_text(&input.speaker, &input.speech_text, scene),
    };
    Ok(Observation {
        text,
        source: input.clone(),
        agent_id: agent.agent_id.clone(),
        turn_index,
        degraded,
    })
}

fn ground_with_vision(g: &dyn Gateway, speaker: &Speaker, speech: &str, image: &std::path::Path) -> Result<String, String> {
    let bytes = std::fs::read(image).map_err(|e| format!("{}: {e}", image.display()))?;
    let b64 = base64::engine::general_purpose::STANDARD.encode(bytes);
    let user = format!("[{speaker}] said: {}", speech.trim());
    let text = g
        .complete(&ModelRequest::vision(GROUNDING_PROMPT, &user, Some(b64)))
        .map_err(|e| e.to_string())?
        .into_text();
    let text = text.trim();
    if text.is_empty() {
        return Err("provider returned an empty description".into());
    }
    Ok(text.to_string())
}

/// Hands out strictly increasing turn indices.
#[derive(Debug, Default, Clone)]
pub struct TurnCounter {
    next: u64,
}

impl TurnCounter {
    pub fn starting_at(next: u64) -> Self {
        Self { next }
    }

    pub fn advance(&mut self) -> u64 {
        let t = self.next;
        self.next += 1;
        t
    }

    pub fn peek(&self) -> u64 {
        self.next
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ScriptedMock;
    use crate::identity::PersonalityVector;

    fn agent() -> AgentProfile {
        AgentProfile::new("nao_a", "Nao-A", PersonalityVector::NEUTRAL)
    }

    #[test]
    fn stub_template() {
        let o = perceive(&agent(), &MultimodalInput::utterance("Hello robots"), 0, None).unwrap();
        assert_eq!(o.text, "[Human] said: Hello robots. Scene: unchanged");
        assert!(!o.degraded);
    }

    #[test]
    fn empty_input_is_rejected() {
        let e = perceive(&agent(), &MultimodalInput::utterance("  "), 0, None).unwrap_err();
        assert!(matches!(e, PerceptionError::InvalidArgument(_)));
    }

    #[test]
    fn speech_and_scene_are_both_present() {
        let input = MultimodalInput::utterance("Hello robots")
            .with_scene(ScenePayload::Description("user waves at the left robot".into()));
        let o = perceive(&agent(), &input, 1, None).unwrap();
        let expected = "[Human] said: Hello robots. Scene: user waves at the left robot";
        assert_eq!(o.text.len(), expected.len());
        for (a, b) in o.text.chars().zip(expected.chars()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn terminal_punctuation_is_not_doubled() {
        assert_eq!(
            template_text(&Speaker::Human, "What do you think?", None),
            "[Human] said: What do you think? Scene: unchanged"
        );
        assert_eq!(
            template_text(&Speaker::Human, "", Some(&ScenePayload::Description("a cat".into()))),
            "[Human] said nothing. Scene: a cat"
        );
    }

    #[test]
    fn scene_only_input_is_valid() {
        let input = MultimodalInput::utterance("").with_scene(ScenePayload::Description("door opens".into()));
        assert!(perceive(&agent(), &input, 0, None).is_ok());
    }

    #[test]
    fn per_agent_views_override_the_shared_scene() {
        let input = MultimodalInput::utterance("Look")
            .with_scene(ScenePayload::Description("a table".into()))
            .with_view("nao_a", ScenePayload::Description("a red cup on the table".into()));
        let a = perceive(&agent(), &input, 0, None).unwrap();
        let b = perceive(&AgentProfile::new("nao_b", "Nao-B", PersonalityVector::NEUTRAL), &input, 0, None).unwrap();
        assert!(a.text.ends_with("a red cup on the table"));
        assert!(b.text.ends_with("a table"));
    }

    #[test]
    fn vision_path_and_degraded_fallback() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("frame.jpg");
        std::fs::write(&img, b"\xff\xd8fake").unwrap();
        let mock = ScriptedMock::parse(
            r#"{"kind":"vision","match":{"contains":"said"},"respond":"The human points at the red ball on the left."}
{"kind":"any","match":{"always":true},"respond":""}"#,
        )
        .unwrap();
        let input = MultimodalInput::utterance("What is that?").with_scene(ScenePayload::Image(img));
        let o = perceive(&agent(), &input, 0, Some(&mock)).unwrap();
        assert_eq!(o.text, "The human points at the red ball on the left.");

        let missing = MultimodalInput::utterance("What is that?").with_scene(ScenePayload::Image(dir.path().join("nope.jpg")));
        let o = perceive(&agent(), &missing, 0, Some(&mock)).unwrap();
        assert!(o.degraded);
        assert!(o.text.starts_with("[Human] said: What is that? Scene: image "));
    }

    #[test]
    fn turn_counter_is_strictly_increasing() {
        let mut c = TurnCounter::default();
        let a = c.advance();
        let b = c.advance();
        assert!(b > a);
        assert_eq!(c.peek(), 2);
    }
}
