//! JSON messages exchanged with the operator console, one per WebSocket text frame.
//! The byte-level schema is in docs/protocol.md.

use cathtwin_core::copilot::{ControlAxis, ControlMode, Event, EventKind, Phase, SessionState, SessionTerminal};
use cathtwin_core::probmap::SpeedScale;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    Cmd {
        v: u32,
        axis: ControlAxis,
        velocity_fraction: f64,
        #[serde(default)]
        seq: Option<u64>,
    },
    Mode {
        v: u32,
        mode: ControlMode,
    },
    Phase {
        v: u32,
        phase: Phase,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMessage {
    pub v: u32,
    pub t: f64,
    /// translation, rotation, sheath, bending, core, jaw
    pub joints: [f64; 6],
    /// tip position then unit tip axis
    pub tip: [f64; 6],
    pub phase: Phase,
    pub mode: ControlMode,
    pub scales: SpeedScale,
    pub terminal: SessionTerminal,
    pub in_intervention: bool,
    /// `seq` of the last command applied on this tick.
    pub ack: Option<u64>,
}

impl StateMessage {
    pub fn from_state(s: &SessionState, ack: Option<u64>) -> Self {
        let p = s.tip.position;
        let a = s.tip.axis;
        Self {
            v: PROTOCOL_VERSION,
            t: s.t,
            joints: s.joints.to_array(),
            tip: [p.x, p.y, p.z, a.x, a.y, a.z],
            phase: s.phase,
            mode: s.mode,
            scales: s.scales,
            terminal: s.terminal,
            in_intervention: s.in_intervention,
            ack,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    Malformed,
    UnsupportedVersion,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    State(StateMessage),
    Event {
        v: u32,
        t: f64,
        kind: EventKind,
        payload: Value,
    },
    Error {
        v: u32,
        code: ErrorCode,
        message: String,
        seq: Option<u64>,
    },
}

impl ServerMessage {
    pub fn event(e: &Event) -> Self {
        ServerMessage::Event {
            v: PROTOCOL_VERSION,
            t: e.t,
            kind: e.kind,
            payload: e.payload.clone(),
        }
    }

    pub fn error(code: ErrorCode, message: impl Into<String>, seq: Option<u64>) -> Self {
        ServerMessage::Error {
            v: PROTOCOL_VERSION,
            code,
            message: message.into(),
            seq,
        }
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string(self).expect("serializable")
    }
}

/// Parse a client frame. The version is checked before the body so that a newer client
/// gets a version error rather than a schema error.
pub fn parse_client(text: &str) -> Result<ClientMessage, ServerMessage> {
    let value: Value = serde_json::from_str(text).map_err(|e| ServerMessage::error(ErrorCode::Malformed, e.to_string(), None))?;
    let seq = value.get("seq").and_then(Value::as_u64);
    match value.get("v").and_then(Value::as_u64) {
        Some(v) if v == PROTOCOL_VERSION as u64 => {}
        Some(v) => {
            return Err(ServerMessage::error(
                ErrorCode::UnsupportedVersion,
                format!("protocol version {v} is not supported (server speaks {PROTOCOL_VERSION})"),
                seq,
            ))
        }
        None => return Err(ServerMessage::error(ErrorCode::Malformed, "missing integer field `v`", seq)),
    }
    serde_json::from_value(value).map_err(|e| ServerMessage::error(ErrorCode::Malformed, e.to_string(), seq))
}
