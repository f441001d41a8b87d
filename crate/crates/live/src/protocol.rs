//! JSON messages exchanged over `/session/{id}`. Every message carries a
//! `type` field; see `docs/protocol.md` for the full schema.

use serde::{Deserialize, Serialize};
use tamer_core::env::Pos;
use tamer_core::observer::Polarity;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Paused,
    Finished,
}

/// Client to server.
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Feedback(WireFeedback),
    Control(ControlCommand),
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
pub struct WireFeedback {
    /// Must be exactly 1 or -1; anything else is rejected.
    pub polarity: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_timestamp: Option<f64>,
}

impl WireFeedback {
    pub fn polarity(&self) -> Result<Polarity, WireError> {
        match self.polarity.as_i64() {
            Some(1) => Ok(Polarity::Positive),
            Some(-1) => Ok(Polarity::Negative),
            _ => Err(WireError::new(
                ErrorCode::InvalidPolarity,
                format!("polarity must be 1 or -1, got {}", self.polarity),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum ControlCommand {
    Start,
    Pause,
    Reset {
        #[serde(default)]
        keep_networks: bool,
    },
    SetSpeed {
        tick_ms: u64,
    },
}

impl ControlCommand {
    pub fn name(&self) -> &'static str {
        match self {
            ControlCommand::Start => "start",
            ControlCommand::Pause => "pause",
            ControlCommand::Reset { .. } => "reset",
            ControlCommand::SetSpeed { .. } => "set_speed",
        }
    }
}

/// Server to client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Snapshot(WireSnapshot),
    Ack(Ack),
    Error(WireError),
}

impl ServerMessage {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages always serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "ack_for", rename_all = "snake_case")]
pub enum Ack {
    Feedback(FeedbackAck),
    Control(ControlAck),
}

/// Reply to an accepted feedback: the (episode, step) it will be credited at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackAck {
    pub ticket: u64,
    pub polarity: i8,
    pub episode: u64,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlAck {
    pub command: String,
    pub status: RunStatus,
    pub tick_ms: u64,
}

/// A feedback consumed during a tick, with the number of (state, action)
/// pairs it was credited to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreditedFeedback {
    pub ticket: u64,
    pub episode: u64,
    pub step: u64,
    pub credited: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireSnapshot {
    pub session: String,
    /// Gapless per session, starting at 0.
    pub seq: u64,
    pub status: RunStatus,
    pub episode: u64,
    /// Index within the episode of the step just taken.
    pub step: u64,
    pub global_step: u64,
    /// Rows top to bottom; `#` wall, `.` open.
    pub grid: Vec<String>,
    pub agent: Pos,
    pub goal: Pos,
    pub last_action: Option<String>,
    pub last_reward: f64,
    pub cumulative_return: f64,
    pub episode_done: bool,
    pub alpha_h: f64,
    pub epsilon: f64,
    pub acks: Vec<CreditedFeedback>,
    /// Size of the agent's feedback memory.
    pub h_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    MalformedMessage,
    InvalidPolarity,
    UnknownCommand,
    InvalidArgument,
    SessionUnavailable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireError {
    pub code: ErrorCode,
    pub message: String,
}

impl WireError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        WireError {
            code,
            message: message.into(),
        }
    }
}

/// Parses one client frame, mapping failures to the error reply to send.
pub fn parse_client_message(text: &str) -> Result<ClientMessage, WireError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| WireError::new(ErrorCode::MalformedMessage, e.to_string()))?;
    let kind = value.get("type").and_then(|t| t.as_str()).unwrap_or_default();
    if kind == "control" {
        let command = value.get("command").and_then(|c| c.as_str()).unwrap_or_default();
        if !["start", "pause", "reset", "set_speed"].contains(&command) {
            return Err(WireError::new(
                ErrorCode::UnknownCommand,
                format!("unknown control command '{command}'"),
            ));
        }
    }
    serde_json::from_value(value).map_err(|e| WireError::new(ErrorCode::MalformedMessage, e.to_string()))
}

pub fn action_name(action: usize) -> &'static str {
    match action {
        0 => "north",
        1 => "east",
        2 => "south",
        3 => "west",
        4 => "pickup",
        5 => "drop",
        _ => "unknown",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn parses_feedback() {
        let msg = parse_client_message(r#"{"type":"feedback","polarity":1,"client_timestamp":12.5}"#).unwrap();
        let ClientMessage::Feedback(f) = msg else { panic!() };
        assert_eq!(f.polarity().unwrap(), Polarity::Positive);
        let msg = parse_client_message(r#"{"type":"feedback","polarity":-1}"#).unwrap();
        let ClientMessage::Feedback(f) = msg else { panic!() };
        assert_eq!(f.polarity().unwrap(), Polarity::Negative);
    }

    #[test]
    fn rejects_bad_polarity() {
        for bad in [json!(0), json!(2), json!(1.0), json!("1"), json!(null), json!(-1.5)] {
            let f = WireFeedback {
                polarity: bad,
                client_timestamp: None,
            };
            assert_eq!(f.polarity().unwrap_err().code, ErrorCode::InvalidPolarity);
        }
    }

    #[test]
    fn parses_controls() {
        let cases = [
            (r#"{"type":"control","command":"start"}"#, ControlCommand::Start),
            (r#"{"type":"control","command":"pause"}"#, ControlCommand::Pause),
            (
                r#"{"type":"control","command":"reset","keep_networks":true}"#,
                ControlCommand::Reset { keep_networks: true },
            ),
            (r#"{"type":"control","command":"reset"}"#, ControlCommand::Reset { keep_networks: false }),
            (
                r#"{"type":"control","command":"set_speed","tick_ms":250}"#,
                ControlCommand::SetSpeed { tick_ms: 250 },
            ),
        ];
        for (text, want) in cases {
            assert_eq!(parse_client_message(text).unwrap(), ClientMessage::Control(want));
        }
    }

    #[test]
    fn classifies_errors() {
        let code = |t: &str| parse_client_message(t).unwrap_err().code;
        assert_eq!(code(r#"{"type":"control","command":"jump"}"#), ErrorCode::UnknownCommand);
        assert_eq!(code(r#"{"type":"control"}"#), ErrorCode::UnknownCommand);
        assert_eq!(code("not json"), ErrorCode::MalformedMessage);
        assert_eq!(code(r#"{"type":"teleport"}"#), ErrorCode::MalformedMessage);
        assert_eq!(code(r#"{"type":"control","command":"set_speed"}"#), ErrorCode::MalformedMessage);
    }

    #[test]
    fn server_messages_are_tagged() {
        let ack = ServerMessage::Ack(Ack::Feedback(FeedbackAck {
            ticket: 3,
            polarity: -1,
            episode: 2,
            step: 7,
        }));
        assert_eq!(
            serde_json::to_value(&ack).unwrap(),
            json!({"type":"ack","ack_for":"feedback","ticket":3,"polarity":-1,"episode":2,"step":7})
        );
        let err = ServerMessage::Error(WireError::new(ErrorCode::InvalidPolarity, "no"));
        assert_eq!(
            serde_json::to_value(&err).unwrap(),
            json!({"type":"error","code":"invalid_polarity","message":"no"})
        );
        let ctl = ServerMessage::Ack(Ack::Control(ControlAck {
            command: "pause".into(),
            status: RunStatus::Paused,
            tick_ms: 500,
        }));
        let text = ctl.to_json();
        assert_eq!(serde_json::from_str::<ServerMessage>(&text).unwrap(), ctl);
    }
}
