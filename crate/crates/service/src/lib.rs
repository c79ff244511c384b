//! Live WebSocket streaming of processed frames to viewers, with operator
//! control messages applied at frame boundaries.

pub mod error;
pub mod hub;
pub mod protocol;
pub mod server;

pub use error::{Result, ServiceError};
pub use hub::{Hub, Mailbox, Published};
pub use protocol::{
    parse_control, Action, ControlBody, ControlMessage, Encoding, FrameHeader, FrameMeta, RectMsg, StreamMessage,
    FRAME_HEADER_LEN, FRAME_HEADER_VERSION, FRAME_MAGIC, STREAM_PATH,
};
pub use server::{serve, LiveService, ServiceHandle, ServiceOptions, SourceResolver};
