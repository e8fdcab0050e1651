//! JSON wire protocol between the guidance service and its clients.
//!
//! Messages are single JSON objects tagged by `type`, one per line.
//!
//! Client to server:
//! - `{"type":"frame","session_id","frame_index","timestamp_ms","image_b64"}`
//!   where `image_b64` is a base64 8-bit grayscale PNG. The first frame of an
//!   unseen `session_id` opens a live session.
//! - `{"type":"open_playback","sweep_path"}` replays a recorded sweep.
//! - `{"type":"close","session_id"?}` closes one session, or the connection.
//!
//! Server to client: `result`, `error`, `session` (a session was opened) and
//! `end` (a playback finished).

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::cascade::GuidanceFrameResult;
use crate::error::Error;
use crate::frame::{decode_png, encode_png, Frame};
use crate::landmarks::LandmarkPrediction;
use crate::rubric::PoseCategory;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    Frame {
        session_id: String,
        frame_index: u64,
        #[serde(default)]
        timestamp_ms: f64,
        image_b64: String,
    },
    OpenPlayback {
        sweep_path: String,
    },
    Close {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        session_id: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireLandmark {
    pub id: String,
    pub x: f64,
    pub y: f64,
    pub radius: f64,
    pub visible: bool,
}

impl From<&LandmarkPrediction> for WireLandmark {
    fn from(p: &LandmarkPrediction) -> Self {
        Self {
            id: p.id.name(),
            x: p.x,
            y: p.y,
            radius: p.radius,
            visible: p.visible,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireLvef {
    pub value: f64,
    pub frame_range: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultMessage {
    pub session_id: String,
    pub frame_index: u64,
    pub category: PoseCategory,
    pub score: f64,
    pub latency_ms: f64,
    pub dropped_count: usize,
    pub landmarks: Vec<WireLandmark>,
    pub lvef: Option<WireLvef>,
    /// Ground-truth label, present for playback of labeled sweeps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<PoseCategory>,
}

impl ResultMessage {
    pub fn from_result(session_id: &str, result: &GuidanceFrameResult) -> Self {
        Self {
            session_id: session_id.to_string(),
            frame_index: result.frame_index as u64,
            category: result.category,
            score: result.score.value(),
            latency_ms: result.latency_ms,
            dropped_count: result.dropped_count,
            landmarks: result.landmarks.iter().map(WireLandmark::from).collect(),
            lvef: result.lvef.as_ref().map(|e| WireLvef {
                value: e.value,
                frame_range: e.frame_range,
            }),
            truth: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    MalformedMessage,
    OutOfOrder,
    SessionNotFound,
    BadImage,
    ShapeMismatch,
    PlaybackFailed,
    Internal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionSource {
    Live,
    Playback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Result(ResultMessage),
    Error {
        code: ErrorCode,
        detail: String,
    },
    Session {
        session_id: String,
        source: SessionSource,
    },
    End {
        session_id: String,
        frames: usize,
    },
}

impl ServerMessage {
    pub fn error(code: ErrorCode, detail: impl Into<String>) -> Self {
        ServerMessage::Error {
            code,
            detail: detail.into(),
        }
    }

    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("server messages always serialize");
        s.push('\n');
        s
    }
}

/// A rejected message with the error code to report.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolError {
    pub code: ErrorCode,
    pub detail: String,
}

impl ProtocolError {
    pub fn new(code: ErrorCode, detail: impl Into<String>) -> Self {
        Self {
            code,
            detail: detail.into(),
        }
    }

    pub fn into_message(self) -> ServerMessage {
        ServerMessage::Error {
            code: self.code,
            detail: self.detail,
        }
    }
}

pub fn parse_client_message(line: &str) -> Result<ClientMessage, ProtocolError> {
    serde_json::from_str(line.trim())
        .map_err(|e| ProtocolError::new(ErrorCode::MalformedMessage, e.to_string()))
}

pub fn parse_server_message(line: &str) -> Result<ServerMessage, Error> {
    serde_json::from_str(line.trim()).map_err(|e| Error::Parse(format!("server message: {e}")))
}

/// Decode an `image_b64` payload into a frame.
pub fn decode_frame_payload(image_b64: &str) -> Result<Frame, ProtocolError> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(image_b64.trim())
        .map_err(|e| ProtocolError::new(ErrorCode::BadImage, format!("base64: {e}")))?;
    decode_png(&bytes).map_err(|e| ProtocolError::new(ErrorCode::BadImage, e.to_string()))
}

pub fn encode_frame_payload(frame: &Frame) -> String {
    let png = encode_png(frame).expect("in-memory PNG encoding");
    base64::engine::general_purpose::STANDARD.encode(png)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_message_round_trip() {
        let frame = Frame::from_fn(8, 8, |x, y| ((x + y) % 2) as f32);
        let msg = ClientMessage::Frame {
            session_id: "s".into(),
            frame_index: 3,
            timestamp_ms: 12.5,
            image_b64: encode_frame_payload(&frame),
        };
        let line = serde_json::to_string(&msg).unwrap();
        assert!(line.contains(r#""type":"frame""#));
        let back = parse_client_message(&line).unwrap();
        assert_eq!(back, msg);
        if let ClientMessage::Frame { image_b64, .. } = back {
            assert_eq!(decode_frame_payload(&image_b64).unwrap(), frame);
        }
    }

    #[test]
    fn malformed_messages() {
        for bad in ["", "{}", r#"{"type":"frame"}"#, r#"{"type":"dance"}"#, "[1,2]", "nul"] {
            let err = parse_client_message(bad).unwrap_err();
            assert_eq!(err.code, ErrorCode::MalformedMessage, "{bad}");
        }
        assert_eq!(decode_frame_payload("!!!").unwrap_err().code, ErrorCode::BadImage);
        assert_eq!(decode_frame_payload("aGVsbG8=").unwrap_err().code, ErrorCode::BadImage);
    }

    #[test]
    fn close_variants() {
        assert_eq!(
            parse_client_message(r#"{"type":"close"}"#).unwrap(),
            ClientMessage::Close { session_id: None }
        );
        assert_eq!(
            parse_client_message(r#"{"type":"open_playback","sweep_path":"a.json"}"#).unwrap(),
            ClientMessage::OpenPlayback { sweep_path: "a.json".into() }
        );
    }

    #[test]
    fn server_message_shapes() {
        let err = ServerMessage::error(ErrorCode::OutOfOrder, "frame 2 after 5");
        let line = err.to_line();
        assert!(line.ends_with('\n'));
        assert!(line.contains(r#""type":"error""#));
        assert!(line.contains(r#""code":"out_of_order""#));
        assert_eq!(parse_server_message(&line).unwrap(), err);

        let result = ServerMessage::Result(ResultMessage {
            session_id: "s".into(),
            frame_index: 0,
            category: PoseCategory::Yellow,
            score: -0.5,
            latency_ms: 3.0,
            dropped_count: 0,
            landmarks: vec![],
            lvef: None,
            truth: None,
        });
        let json = serde_json::to_value(&result).unwrap();
        assert_eq!(json["type"], "result");
        assert_eq!(json["category"], "yellow");
        assert!(json["lvef"].is_null());
        assert!(json.get("truth").is_none());
    }
}
