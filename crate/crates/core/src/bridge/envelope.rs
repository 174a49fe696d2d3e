//! Wire wrapper for bridged messages.
//!
//! ```text
//! "EVB1" | flags u8 | [sample_id u64 | n u16 | n * (probe_id u16, t_ns u64, clock u8)] | payload
//! ```
//! All integers are big-endian. The tracing block is present iff flag bit 0 is set.

use bytes::{BufMut, Bytes, BytesMut};
use thiserror::Error;

use crate::trace::{Probe, TracingBlock};

pub const MAGIC: &[u8; 4] = b"EVB1";
pub const HEADER_LEN: usize = 5;
const FLAG_TRACING: u8 = 0x01;
const PROBE_LEN: usize = 11;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EnvelopeError {
    #[error("bad envelope magic")]
    BadMagic,
    #[error("truncated envelope")]
    TruncatedEnvelope,
    #[error("truncated bus message")]
    TruncatedMessage,
    #[error("type tag is not UTF-8")]
    BadTypeTag,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub tracing: Option<TracingBlock>,
    pub payload: Bytes,
}

pub fn encoded_len(tracing: Option<&TracingBlock>, payload_len: usize) -> usize {
    HEADER_LEN + tracing.map_or(0, |t| 10 + PROBE_LEN * t.probes.len()) + payload_len
}

pub fn encode_envelope(payload: &[u8], tracing: Option<&TracingBlock>) -> Bytes {
    let mut out = BytesMut::with_capacity(encoded_len(tracing, payload.len()));
    put_header(&mut out, tracing);
    out.put_slice(payload);
    out.freeze()
}

/// Envelope around a serialized bus message, built with a single copy of `value`.
pub fn encode_message_envelope(
    type_tag: &str,
    value: &[u8],
    tracing: Option<&TracingBlock>,
) -> Bytes {
    let tag = tag_bytes(type_tag);
    let mut out = BytesMut::with_capacity(encoded_len(tracing, 1 + tag.len() + value.len()));
    put_header(&mut out, tracing);
    out.put_u8(tag.len() as u8);
    out.put_slice(tag);
    out.put_slice(value);
    out.freeze()
}

fn put_header(out: &mut BytesMut, tracing: Option<&TracingBlock>) {
    out.put_slice(MAGIC);
    match tracing {
        Some(t) => {
            out.put_u8(FLAG_TRACING);
            out.put_u64(t.sample_id);
            out.put_u16(t.probes.len() as u16);
            for p in &t.probes {
                out.put_u16(p.probe_id);
                out.put_u64(p.t_ns);
                out.put_u8(p.clock_id);
            }
        }
        None => out.put_u8(0),
    }
}

fn tag_bytes(type_tag: &str) -> &[u8] {
    &type_tag.as_bytes()[..type_tag.len().min(255)]
}

/// Splits an envelope without copying the payload.
pub fn decode_envelope(buf: &Bytes) -> Result<Envelope, EnvelopeError> {
    let n = buf.len().min(4);
    if buf[..n] != MAGIC[..n] {
        return Err(EnvelopeError::BadMagic);
    }
    if buf.len() < HEADER_LEN {
        return Err(EnvelopeError::TruncatedEnvelope);
    }
    let flags = buf[4];
    let mut pos = HEADER_LEN;
    let tracing = if flags & FLAG_TRACING != 0 {
        let head = buf
            .get(pos..pos + 10)
            .ok_or(EnvelopeError::TruncatedEnvelope)?;
        let sample_id = u64::from_be_bytes(head[..8].try_into().unwrap());
        let n = u16::from_be_bytes([head[8], head[9]]) as usize;
        pos += 10;
        let body = buf
            .get(pos..pos + n * PROBE_LEN)
            .ok_or(EnvelopeError::TruncatedEnvelope)?;
        let probes = body
            .chunks_exact(PROBE_LEN)
            .map(|c| Probe {
                probe_id: u16::from_be_bytes([c[0], c[1]]),
                t_ns: u64::from_be_bytes(c[2..10].try_into().unwrap()),
                clock_id: c[10],
            })
            .collect();
        pos += n * PROBE_LEN;
        Some(TracingBlock { sample_id, probes })
    } else {
        None
    };
    Ok(Envelope {
        tracing,
        payload: buf.slice(pos..),
    })
}

/// Serialized bus message: `tag_len u8 | tag | value`.
pub fn encode_bus_payload(type_tag: &str, value: &[u8]) -> Bytes {
    let tag = tag_bytes(type_tag);
    let mut out = BytesMut::with_capacity(1 + tag.len() + value.len());
    out.put_u8(tag.len() as u8);
    out.put_slice(tag);
    out.put_slice(value);
    out.freeze()
}

pub fn decode_bus_payload(buf: &Bytes) -> Result<(String, Bytes), EnvelopeError> {
    let n = *buf.first().ok_or(EnvelopeError::TruncatedMessage)? as usize;
    let tag = buf.get(1..1 + n).ok_or(EnvelopeError::TruncatedMessage)?;
    let tag = std::str::from_utf8(tag)
        .map_err(|_| EnvelopeError::BadTypeTag)?
        .to_owned();
    Ok((tag, buf.slice(1 + n..)))
}
