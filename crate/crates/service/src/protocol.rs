//! Wire format: JSON text messages for control, stats and events; binary
//! messages carrying a fixed 32-byte frame header followed by the payload.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use oxyfield::pipeline::{Command, OverlayMode, PipelineEvent, StageTimings, StreamStats, Warning};
use oxyfield::reflect::RegionOfInterest;

use crate::error::{Result, ServiceError};

pub const FRAME_MAGIC: [u8; 4] = *b"OXF1";
pub const FRAME_HEADER_VERSION: u16 = 1;
pub const FRAME_HEADER_LEN: usize = 32;
pub const STREAM_PATH: &str = "/stream";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoding {
    Png = 0,
    Rgba = 1,
}

impl Encoding {
    pub fn code(self) -> u16 {
        self as u16
    }

    pub fn from_code(code: u16) -> Option<Self> {
        match code {
            0 => Some(Encoding::Png),
            1 => Some(Encoding::Rgba),
            _ => None,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "png" => Some(Encoding::Png),
            "rgba" | "raw" => Some(Encoding::Rgba),
            _ => None,
        }
    }
}

/// Little-endian header in front of every binary frame payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameHeader {
    pub version: u16,
    pub encoding: Encoding,
    pub frame_id: u64,
    pub width: u32,
    pub height: u32,
    pub payload_len: u32,
}

impl FrameHeader {
    pub fn new(encoding: Encoding, frame_id: u64, width: u32, height: u32, payload_len: u32) -> Self {
        Self {
            version: FRAME_HEADER_VERSION,
            encoding,
            frame_id,
            width,
            height,
            payload_len,
        }
    }

    pub fn encode(&self) -> [u8; FRAME_HEADER_LEN] {
        let mut b = [0u8; FRAME_HEADER_LEN];
        b[0..4].copy_from_slice(&FRAME_MAGIC);
        b[4..6].copy_from_slice(&self.version.to_le_bytes());
        b[6..8].copy_from_slice(&self.encoding.code().to_le_bytes());
        b[8..16].copy_from_slice(&self.frame_id.to_le_bytes());
        b[16..20].copy_from_slice(&self.width.to_le_bytes());
        b[20..24].copy_from_slice(&self.height.to_le_bytes());
        b[24..28].copy_from_slice(&self.payload_len.to_le_bytes());
        // 28..32 reserved, zero
        b
    }

    /// Parse a header and check the message length against it.
    pub fn decode(msg: &[u8]) -> Result<(Self, &[u8])> {
        if msg.len() < FRAME_HEADER_LEN {
            return Err(ServiceError::Framing(format!(
                "binary message of {} bytes is shorter than the {FRAME_HEADER_LEN}-byte header",
                msg.len()
            )));
        }
        if msg[0..4] != FRAME_MAGIC {
            return Err(ServiceError::Framing(format!("bad magic {:?}", &msg[0..4])));
        }
        let u16_at = |i: usize| u16::from_le_bytes([msg[i], msg[i + 1]]);
        let u32_at = |i: usize| u32::from_le_bytes(msg[i..i + 4].try_into().expect("4 bytes"));
        let version = u16_at(4);
        if version != FRAME_HEADER_VERSION {
            return Err(ServiceError::Framing(format!("unsupported header version {version}")));
        }
        let encoding = Encoding::from_code(u16_at(6))
            .ok_or_else(|| ServiceError::Framing(format!("unknown encoding {}", u16_at(6))))?;
        let h = FrameHeader {
            version,
            encoding,
            frame_id: u64::from_le_bytes(msg[8..16].try_into().expect("8 bytes")),
            width: u32_at(16),
            height: u32_at(20),
            payload_len: u32_at(24),
        };
        let payload = &msg[FRAME_HEADER_LEN..];
        if payload.len() != h.payload_len as usize {
            return Err(ServiceError::Framing(format!(
                "payload length {} does not match header {}",
                payload.len(),
                h.payload_len
            )));
        }
        if h.encoding == Encoding::Rgba && u64::from(h.payload_len) != 4 * u64::from(h.width) * u64::from(h.height) {
            return Err(ServiceError::Framing("rgba payload does not match dimensions".into()));
        }
        Ok((h, payload))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RectMsg {
    pub x: i64,
    pub y: i64,
    pub width: i64,
    pub height: i64,
}

/// Operator steering request; `id` correlates the Ack or Nack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlMessage {
    pub id: u64,
    #[serde(flatten)]
    pub body: ControlBody,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ControlBody {
    SetRoi { rect: RectMsg },
    SetWorkingDistance { cm: f64 },
    SetThreshold { rad: f64 },
    SetColormap { name: String, alpha: f64 },
    SetOverlayMode { mode: String },
    Pause,
    Resume,
    /// Scenario (phantom) name or recording directory.
    SelectSource { source: String },
    RequestStats,
}

/// What a connection must do with a parsed control message.
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Pipeline(Command),
    SelectSource(String),
    RequestStats,
}

impl ControlBody {
    /// Shape-level validation; value ranges are checked by the pipeline.
    pub fn action(&self) -> std::result::Result<Action, String> {
        Ok(match self {
            ControlBody::SetRoi { rect } => {
                let conv = |v: i64, name: &str| {
                    usize::try_from(v).map_err(|_| format!("roi out of bounds: negative {name}"))
                };
                Action::Pipeline(Command::SetRoi {
                    roi: RegionOfInterest::new(
                        conv(rect.x, "x")?,
                        conv(rect.y, "y")?,
                        conv(rect.width, "width")?,
                        conv(rect.height, "height")?,
                    ),
                })
            }
            ControlBody::SetWorkingDistance { cm } => Action::Pipeline(Command::SetWorkingDistance { cm: *cm }),
            ControlBody::SetThreshold { rad } => Action::Pipeline(Command::SetThreshold { rad: *rad }),
            ControlBody::SetColormap { name, alpha } => Action::Pipeline(Command::SetColormap {
                name: name.clone(),
                alpha: *alpha,
            }),
            ControlBody::SetOverlayMode { mode } => Action::Pipeline(Command::SetOverlayMode {
                mode: OverlayMode::by_name(mode).map_err(|e| e.to_string())?,
            }),
            ControlBody::Pause => Action::Pipeline(Command::Pause),
            ControlBody::Resume => Action::Pipeline(Command::Resume),
            ControlBody::SelectSource { source } => Action::SelectSource(source.clone()),
            ControlBody::RequestStats => Action::RequestStats,
        })
    }
}

/// Parse a text message. On failure returns the id if one could be read,
/// so the Nack can still be correlated.
pub fn parse_control(text: &str) -> std::result::Result<ControlMessage, (Option<u64>, String)> {
    let v: Value = serde_json::from_str(text).map_err(|e| (None, format!("malformed message: {e}")))?;
    let id = v.get("id").and_then(Value::as_u64);
    if id.is_none() {
        return Err((None, "malformed message: missing numeric id".into()));
    }
    serde_json::from_value(v).map_err(|e| (id, format!("malformed message: {e}")))
}

/// Summary sent as text just before each binary frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub frame_id: u64,
    pub width: u32,
    pub height: u32,
    pub encoding: Encoding,
    pub overlay_mode: OverlayMode,
    pub calibrated: bool,
    pub warnings: Vec<Warning>,
    pub timings: StageTimings,
    pub histogram: Vec<u32>,
    pub so2_mean: Option<f64>,
    pub tissue_pixels: usize,
    pub config_generation: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StreamMessage {
    Hello { path: String, encoding: Encoding },
    Frame(FrameMeta),
    Stats { stats: StreamStats },
    Ack { id: u64, frame_id: u64 },
    Nack { id: Option<u64>, reason: String },
    Event { event: PipelineEvent },
}

impl StreamMessage {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("stream message serializes")
    }
}
