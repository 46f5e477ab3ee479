//! Length-prefixed JSON frames exchanged with a robot backend.
//!
//! A frame is a 4-byte big-endian payload length followed by that many
//! bytes of UTF-8 JSON. Payloads carry a `type` of `POLICY_EXECUTE`,
//! `EVENT_ACK` or `OBSERVATION_FRAME`.

use std::io::{ErrorKind, Read, Write};

use serde_json::{json, Map, Value};

use crate::error::ProtocolError;
use crate::planner::{ActionPolicy, ActionStep};

pub const MAX_FRAME_BYTES: usize = 1 << 20;
const HEADER: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub enum WireMessage {
    PolicyExecute(ActionPolicy),
    EventAck { event_id: String, status: String },
    ObservationFrame { speech_text: String, image_b64: Option<String> },
}

impl WireMessage {
    pub fn to_value(&self) -> Value {
        match self {
            WireMessage::PolicyExecute(p) => json!({
                "type": "POLICY_EXECUTE",
                "agent_id": p.agent_id,
                "turn_index": p.turn_index,
                "steps": p.steps,
            }),
            WireMessage::EventAck { event_id, status } => json!({
                "type": "EVENT_ACK",
                "event_id": event_id,
                "status": status,
            }),
            WireMessage::ObservationFrame { speech_text, image_b64 } => {
                let mut v = json!({"type": "OBSERVATION_FRAME", "speech_text": speech_text});
                if let Some(img) = image_b64 {
                    v["image_b64"] = json!(img);
                }
                v
            }
        }
    }

    pub fn from_value(v: &Value) -> Result<Self, ProtocolError> {
        let obj = v.as_object().ok_or_else(|| malformed("$", "payload is not an object"))?;
        match str_field(obj, "type")? {
            "POLICY_EXECUTE" => {
                let agent_id = str_field(obj, "agent_id")?.to_string();
                let turn_index = obj
                    .get("turn_index")
                    .and_then(Value::as_u64)
                    .ok_or_else(|| malformed("turn_index", "expected a non-negative integer"))?;
                let raw = obj
                    .get("steps")
                    .and_then(Value::as_array)
                    .ok_or_else(|| malformed("steps", "expected an array"))?;
                let steps = raw
                    .iter()
                    .enumerate()
                    .map(|(i, s)| parse_step(i, s))
                    .collect::<Result<Vec<_>, _>>()?;
                let policy = ActionPolicy::new(&agent_id, turn_index, steps)
                    .map_err(|e| malformed("steps", e.to_string()))?;
                Ok(WireMessage::PolicyExecute(policy))
            }
            "EVENT_ACK" => Ok(WireMessage::EventAck {
                event_id: str_field(obj, "event_id")?.to_string(),
                status: str_field(obj, "status")?.to_string(),
            }),
            "OBSERVATION_FRAME" => Ok(WireMessage::ObservationFrame {
                speech_text: str_field(obj, "speech_text")?.to_string(),
                image_b64: match obj.get("image_b64") {
                    None | Some(Value::Null) => None,
                    Some(Value::String(s)) => Some(s.clone()),
                    Some(_) => return Err(malformed("image_b64", "expected a string")),
                },
            }),
            other => Err(malformed("type", format!("unknown message type {other:?}"))),
        }
    }
}

fn malformed(field: &str, message: impl Into<String>) -> ProtocolError {
    ProtocolError::Malformed {
        field: field.to_string(),
        message: message.into(),
    }
}

fn str_field<'a>(obj: &'a Map<String, Value>, key: &str) -> Result<&'a str, ProtocolError> {
    obj.get(key)
        .and_then(Value::as_str)
        .ok_or_else(|| malformed(key, "expected a string"))
}

fn parse_step(i: usize, v: &Value) -> Result<ActionStep, ProtocolError> {
    let at = |f: &str| format!("steps[{i}].{f}");
    let obj = v.as_object().ok_or_else(|| malformed(&format!("steps[{i}]"), "expected an object"))?;
    let kind = obj
        .get("kind")
        .and_then(Value::as_str)
        .ok_or_else(|| malformed(&at("kind"), "expected a string"))?;
    let params = obj
        .get("params")
        .and_then(Value::as_object)
        .ok_or_else(|| malformed(&at("params"), "expected an object"))?;
    let text = |key: &str| -> Result<String, ProtocolError> {
        params
            .get(key)
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| malformed(&at(&format!("params.{key}")), "expected a string"))
    };
    Ok(match kind {
        "speak" => ActionStep::Speak { text: text("text")? },
        "gesture" => ActionStep::Gesture { name: text("name")? },
        "posture" => ActionStep::Posture { name: text("name")? },
        "head" => ActionStep::Head {
            direction: text("direction")?,
        },
        "move" => ActionStep::Move {
            direction: text("direction")?,
            magnitude: params
                .get("magnitude")
                .and_then(Value::as_f64)
                .ok_or_else(|| malformed(&at("params.magnitude"), "expected a number"))?,
        },
        other => return Err(malformed(&at("kind"), format!("unknown action kind {other:?}"))),
    })
}

/// Encodes `msg` as one frame.
pub fn encode(msg: &WireMessage) -> Result<Vec<u8>, ProtocolError> {
    let payload = serde_json::to_vec(&msg.to_value()).map_err(|e| malformed("$", e.to_string()))?;
    if payload.len() > MAX_FRAME_BYTES {
        return Err(ProtocolError::FrameTooLarge {
            declared: payload.len(),
            max: MAX_FRAME_BYTES,
        });
    }
    let mut frame = Vec::with_capacity(HEADER + payload.len());
    frame.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    frame.extend_from_slice(&payload);
    Ok(frame)
}

/// Decodes exactly one complete frame.
pub fn decode(frame: &[u8]) -> Result<WireMessage, ProtocolError> {
    if frame.len() < HEADER {
        return Err(ProtocolError::Truncated {
            expected: HEADER,
            actual: frame.len(),
        });
    }
    let declared = u32::from_be_bytes(frame[..HEADER].try_into().expect("4-byte header")) as usize;
    if declared > MAX_FRAME_BYTES {
        return Err(ProtocolError::FrameTooLarge {
            declared,
            max: MAX_FRAME_BYTES,
        });
    }
    let body = &frame[HEADER..];
    if body.len() < declared {
        return Err(ProtocolError::Truncated {
            expected: declared,
            actual: body.len(),
        });
    }
    if body.len() > declared {
        return Err(malformed("$", format!("{} trailing bytes after payload", body.len() - declared)));
    }
    decode_payload(body)
}

fn decode_payload(body: &[u8]) -> Result<WireMessage, ProtocolError> {
    let text = std::str::from_utf8(body).map_err(|e| malformed("$", format!("invalid UTF-8: {e}")))?;
    let v: Value = serde_json::from_str(text).map_err(|e| malformed("$", e.to_string()))?;
    WireMessage::from_value(&v)
}

pub fn serialize_policy(policy: &ActionPolicy) -> Result<Vec<u8>, ProtocolError> {
    encode(&WireMessage::PolicyExecute(policy.clone()))
}

pub fn deserialize_policy(frame: &[u8]) -> Result<ActionPolicy, ProtocolError> {
    match decode(frame)? {
        WireMessage::PolicyExecute(p) => Ok(p),
        _ => Err(malformed("type", "expected POLICY_EXECUTE")),
    }
}

pub fn write_message(w: &mut impl Write, msg: &WireMessage) -> Result<(), ProtocolError> {
    w.write_all(&encode(msg)?)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame from a stream. `Ok(None)` on a clean end of stream
/// between frames.
pub fn read_message(r: &mut impl Read) -> Result<Option<WireMessage>, ProtocolError> {
    let mut header = [0u8; HEADER];
    let got = read_full(r, &mut header)?;
    if got == 0 {
        return Ok(None);
    }
    if got < HEADER {
        return Err(ProtocolError::Truncated {
            expected: HEADER,
            actual: got,
        });
    }
    let declared = u32::from_be_bytes(header) as usize;
    if declared > MAX_FRAME_BYTES {
        return Err(ProtocolError::FrameTooLarge {
            declared,
            max: MAX_FRAME_BYTES,
        });
    }
    let mut body = vec![0u8; declared];
    let got = read_full(r, &mut body)?;
    if got < declared {
        return Err(ProtocolError::Truncated {
            expected: declared,
            actual: got,
        });
    }
    decode_payload(&body).map(Some)
}

fn read_full(r: &mut impl Read, buf: &mut [u8]) -> Result<usize, ProtocolError> {
    let mut n = 0;
    while n < buf.len() {
        match r.read(&mut buf[n..]) {
            Ok(0) => break,
            Ok(k) => n += k,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(n)
}
