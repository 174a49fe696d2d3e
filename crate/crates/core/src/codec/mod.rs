//! MQTT 3.1.1 wire codec for the packet subset used by the broker and client.
//!
//! Decoding is incremental: `decode_packet` returns `Ok(None)` until a whole
//! frame is buffered and never consumes a partial frame.

mod packet;
mod topic;
mod varint;

pub use packet::{
    decode_packet, encode_packet, encode_packet_into, encoded_len, Connack, Connect,
    ConnectReturnCode, ControlPacket, PacketType, Publish, Suback, Subscribe, MAX_PAYLOAD,
    PROTOCOL_LEVEL, SUBACK_FAILURE,
};
pub use topic::{validate_topic, TopicFilter, TopicKind, TopicName, TopicViolation};
pub use varint::{decode_remaining_length, encode_remaining_length, MAX_REMAINING_LENGTH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("remaining length {0} exceeds the 4-byte varint range")]
    OutOfRange(u64),
    #[error("malformed packet: {0}")]
    Malformed(&'static str),
    #[error("invalid packet: {0}")]
    InvalidPacket(&'static str),
    #[error("invalid topic: {0}")]
    Topic(#[from] TopicViolation),
    #[error("unsupported protocol level {0}")]
    UnsupportedProtocolLevel(u8),
    #[error("unsupported feature: {0}")]
    Unsupported(&'static str),
    #[error("payload of {0} bytes exceeds the {MAX_PAYLOAD}-byte limit")]
    PayloadTooLarge(usize),
}

/// MQTT delivery guarantee.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(try_from = "u8", into = "u8")]
pub enum QosLevel {
    #[default]
    AtMostOnce = 0,
    AtLeastOnce = 1,
    ExactlyOnce = 2,
}

impl QosLevel {
    pub fn from_u8(v: u8) -> Result<Self, CodecError> {
        match v {
            0 => Ok(QosLevel::AtMostOnce),
            1 => Ok(QosLevel::AtLeastOnce),
            2 => Ok(QosLevel::ExactlyOnce),
            _ => Err(CodecError::Malformed("qos level out of range")),
        }
    }

    pub fn as_u8(self) -> u8 {
        self as u8
    }
}

impl TryFrom<u8> for QosLevel {
    type Error = CodecError;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        QosLevel::from_u8(v)
    }
}

impl From<QosLevel> for u8 {
    fn from(q: QosLevel) -> u8 {
        q as u8
    }
}

impl std::fmt::Display for QosLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", *self as u8)
    }
}
