//! Wire protocol between the runtime and a teleop client.
//!
//! Each message is one JSON object in one WebSocket text frame, tagged by
//! its `type` field. Field order on the wire follows declaration order here
//! and is documented in `docs/protocol.md`.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Idle,
    Teach,
    Repeat,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Idle => "idle",
            Mode::Teach => "teach",
            Mode::Repeat => "repeat",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "lowercase")]
pub enum TeachAction {
    Start,
    Stop,
    Save { name: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum WireMessage {
    /// Teleop command `(ux, uy, upsi)`; saturated to ±1 on receipt.
    Command { u: [f64; 3] },
    StateUpdate {
        t: f64,
        mode: Mode,
        pose: [f64; 3],
        mu: [f64; 6],
        #[serde(rename = "diagSigma")]
        diag_sigma: [f64; 6],
    },
    TeachControl(TeachAction),
    ModeSwitch {
        mode: Mode,
        /// Trajectory to repeat; defaults to the last one saved.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        trajectory: Option<String>,
    },
    Ack { code: String, text: String },
    Error { code: String, text: String },
}

impl WireMessage {
    pub fn ack(code: &str, text: impl Into<String>) -> Self {
        Self::Ack {
            code: code.into(),
            text: text.into(),
        }
    }

    pub fn error(code: &str, text: impl Into<String>) -> Self {
        Self::Error {
            code: code.into(),
            text: text.into(),
        }
    }

    pub fn encode(&self) -> String {
        serde_json::to_string(self).expect("wire messages always serialize")
    }

    pub fn decode(s: &str) -> Result<Self, String> {
        let msg: Self = serde_json::from_str(s).map_err(|e| e.to_string())?;
        if let Self::Command { u } = &msg {
            if !u.iter().all(|v| v.is_finite()) {
                return Err("command components must be finite".into());
            }
        }
        Ok(msg)
    }
}

/// Error codes carried by `Error` replies.
pub mod codes {
    pub const MALFORMED: &str = "malformed";
    pub const NOT_RECORDING: &str = "not_recording";
    pub const WRONG_MODE: &str = "wrong_mode";
    pub const ALREADY_RECORDING: &str = "already_recording";
    pub const NOTHING_TO_SAVE: &str = "nothing_to_save";
    pub const INVALID_NAME: &str = "invalid_name";
    pub const UNKNOWN_TRAJECTORY: &str = "unknown_trajectory";
    pub const TRACKING_DIVERGED: &str = "tracking_diverged";
    pub const UNEXPECTED: &str = "unexpected_message";
    pub const OVERLOADED: &str = "overloaded";
    pub const BUSY: &str = "busy";
    pub const IO: &str = "io";
}
