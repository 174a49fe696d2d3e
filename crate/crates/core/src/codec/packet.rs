use bytes::{BufMut, Bytes, BytesMut};

use super::topic::{TopicFilter, TopicName};
use super::varint::{decode_remaining_length, write_remaining_length};
use super::{CodecError, QosLevel};

/// Largest application payload accepted on encode or decode (16 MiB).
pub const MAX_PAYLOAD: usize = 16 * 1024 * 1024;
/// MQTT 3.1.1.
pub const PROTOCOL_LEVEL: u8 = 4;
/// SUBACK return code for a refused subscription.
pub const SUBACK_FAILURE: u8 = 0x80;

// Frames larger than this cannot hold a legal payload plus the largest topic.
const MAX_FRAME_BODY: u32 = (MAX_PAYLOAD + 2 + u16::MAX as usize + 2) as u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PacketType {
    Connect = 1,
    Connack = 2,
    Publish = 3,
    Puback = 4,
    Pubrec = 5,
    Pubrel = 6,
    Pubcomp = 7,
    Subscribe = 8,
    Suback = 9,
    Unsubscribe = 10,
    Unsuback = 11,
    Pingreq = 12,
    Pingresp = 13,
    Disconnect = 14,
}

impl PacketType {
    pub fn name(self) -> &'static str {
        match self {
            PacketType::Connect => "CONNECT",
            PacketType::Connack => "CONNACK",
            PacketType::Publish => "PUBLISH",
            PacketType::Puback => "PUBACK",
            PacketType::Pubrec => "PUBREC",
            PacketType::Pubrel => "PUBREL",
            PacketType::Pubcomp => "PUBCOMP",
            PacketType::Subscribe => "SUBSCRIBE",
            PacketType::Suback => "SUBACK",
            PacketType::Unsubscribe => "UNSUBSCRIBE",
            PacketType::Unsuback => "UNSUBACK",
            PacketType::Pingreq => "PINGREQ",
            PacketType::Pingresp => "PINGRESP",
            PacketType::Disconnect => "DISCONNECT",
        }
    }
}

/// CONNACK return codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConnectReturnCode {
    Accepted = 0,
    UnacceptableProtocolVersion = 1,
    IdentifierRejected = 2,
    ServerUnavailable = 3,
    BadUsernameOrPassword = 4,
    NotAuthorized = 5,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Connect {
    pub client_id: String,
    pub username: Option<String>,
    pub password: Option<Bytes>,
    pub keep_alive: u16,
    pub clean_session: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Connack {
    pub session_present: bool,
    pub return_code: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Publish {
    pub topic: TopicName,
    pub packet_id: Option<u16>,
    pub qos: QosLevel,
    pub dup: bool,
    pub retain: bool,
    pub payload: Bytes,
}

impl Publish {
    /// A QoS 0 publish.
    pub fn at_most_once(topic: TopicName, payload: impl Into<Bytes>) -> Self {
        Publish {
            topic,
            packet_id: None,
            qos: QosLevel::AtMostOnce,
            dup: false,
            retain: false,
            payload: payload.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subscribe {
    pub packet_id: u16,
    pub entries: Vec<(TopicFilter, QosLevel)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Suback {
    pub packet_id: u16,
    pub granted: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ControlPacket {
    Connect(Connect),
    Connack(Connack),
    Publish(Publish),
    Puback(u16),
    Pubrec(u16),
    Pubrel(u16),
    Pubcomp(u16),
    Subscribe(Subscribe),
    Suback(Suback),
    Pingreq,
    Pingresp,
    Disconnect,
}

impl ControlPacket {
    pub fn packet_type(&self) -> PacketType {
        match self {
            ControlPacket::Connect(_) => PacketType::Connect,
            ControlPacket::Connack(_) => PacketType::Connack,
            ControlPacket::Publish(_) => PacketType::Publish,
            ControlPacket::Puback(_) => PacketType::Puback,
            ControlPacket::Pubrec(_) => PacketType::Pubrec,
            ControlPacket::Pubrel(_) => PacketType::Pubrel,
            ControlPacket::Pubcomp(_) => PacketType::Pubcomp,
            ControlPacket::Subscribe(_) => PacketType::Subscribe,
            ControlPacket::Suback(_) => PacketType::Suback,
            ControlPacket::Pingreq => PacketType::Pingreq,
            ControlPacket::Pingresp => PacketType::Pingresp,
            ControlPacket::Disconnect => PacketType::Disconnect,
        }
    }

    fn validate(&self) -> Result<(), CodecError> {
        match self {
            ControlPacket::Connect(c) => {
                if c.password.is_some() && c.username.is_none() {
                    return Err(CodecError::InvalidPacket("password without username"));
                }
            }
            ControlPacket::Connack(c) => {
                if c.return_code > 5 {
                    return Err(CodecError::InvalidPacket("unknown connack return code"));
                }
                if c.session_present && c.return_code != 0 {
                    return Err(CodecError::InvalidPacket(
                        "session present on refused connect",
                    ));
                }
            }
            ControlPacket::Publish(p) => {
                match (p.qos, p.packet_id) {
                    (QosLevel::AtMostOnce, Some(_)) => {
                        return Err(CodecError::InvalidPacket("qos 0 publish with packet id"))
                    }
                    (QosLevel::AtMostOnce, None) if p.dup => {
                        return Err(CodecError::InvalidPacket("qos 0 publish with dup flag"))
                    }
                    (QosLevel::AtLeastOnce | QosLevel::ExactlyOnce, None | Some(0)) => {
                        return Err(CodecError::InvalidPacket(
                            "qos>0 publish needs nonzero packet id",
                        ))
                    }
                    _ => {}
                }
                if p.payload.len() > MAX_PAYLOAD {
                    return Err(CodecError::PayloadTooLarge(p.payload.len()));
                }
            }
            ControlPacket::Puback(id)
            | ControlPacket::Pubrec(id)
            | ControlPacket::Pubrel(id)
            | ControlPacket::Pubcomp(id) => {
                if *id == 0 {
                    return Err(CodecError::InvalidPacket("packet id 0"));
                }
            }
            ControlPacket::Subscribe(s) => {
                if s.packet_id == 0 {
                    return Err(CodecError::InvalidPacket("packet id 0"));
                }
                if s.entries.is_empty() {
                    return Err(CodecError::InvalidPacket("subscribe without entries"));
                }
            }
            ControlPacket::Suback(s) => {
                if s.packet_id == 0 {
                    return Err(CodecError::InvalidPacket("packet id 0"));
                }
                if s.granted.iter().any(|&g| g > 2 && g != SUBACK_FAILURE) {
                    return Err(CodecError::InvalidPacket("invalid suback return code"));
                }
            }
            ControlPacket::Pingreq | ControlPacket::Pingresp | ControlPacket::Disconnect => {}
        }
        Ok(())
    }
}

fn put_str(out: &mut BytesMut, s: &str) {
    out.put_u16(s.len() as u16);
    out.put_slice(s.as_bytes());
}

fn put_bin(out: &mut BytesMut, b: &[u8]) {
    out.put_u16(b.len() as u16);
    out.put_slice(b);
}

fn check_str_len(s: &str) -> Result<(), CodecError> {
    if s.len() > u16::MAX as usize {
        return Err(CodecError::InvalidPacket("string longer than 65535 bytes"));
    }
    Ok(())
}

/// Size of the encoded frame for `p`, computed without encoding it.
pub fn encoded_len(p: &ControlPacket) -> usize {
    let rem = match p {
        ControlPacket::Connect(c) => {
            10 + 2
                + c.client_id.len()
                + c.username.as_ref().map_or(0, |u| 2 + u.len())
                + c.password.as_ref().map_or(0, |pw| 2 + pw.len())
        }
        ControlPacket::Connack(_) => 2,
        ControlPacket::Publish(pb) => {
            2 + pb.topic.as_str().len()
                + if pb.packet_id.is_some() { 2 } else { 0 }
                + pb.payload.len()
        }
        ControlPacket::Puback(_)
        | ControlPacket::Pubrec(_)
        | ControlPacket::Pubrel(_)
        | ControlPacket::Pubcomp(_) => 2,
        ControlPacket::Subscribe(s) => {
            2 + s
                .entries
                .iter()
                .map(|(f, _)| 3 + f.as_str().len())
                .sum::<usize>()
        }
        ControlPacket::Suback(s) => 2 + s.granted.len(),
        ControlPacket::Pingreq | ControlPacket::Pingresp | ControlPacket::Disconnect => 0,
    };
    let len_bytes = match rem {
        0..=127 => 1,
        128..=16_383 => 2,
        16_384..=2_097_151 => 3,
        _ => 4,
    };
    1 + len_bytes + rem
}

/// Encodes a packet into a fresh buffer.
pub fn encode_packet(p: &ControlPacket) -> Result<Bytes, CodecError> {
    let mut out = BytesMut::new();
    encode_packet_into(p, &mut out)?;
    Ok(out.freeze())
}

/// Appends the encoded frame for `p` to `out`.
pub fn encode_packet_into(p: &ControlPacket, out: &mut BytesMut) -> Result<(), CodecError> {
    p.validate()?;
    let mut body = BytesMut::new();
    let flags: u8 = match p {
        ControlPacket::Connect(c) => {
            check_str_len(&c.client_id)?;
            put_str(&mut body, "MQTT");
            body.put_u8(PROTOCOL_LEVEL);
            let mut cf = 0u8;
            if c.username.is_some() {
                cf |= 0x80;
            }
            if c.password.is_some() {
                cf |= 0x40;
            }
            if c.clean_session {
                cf |= 0x02;
            }
            body.put_u8(cf);
            body.put_u16(c.keep_alive);
            put_str(&mut body, &c.client_id);
            if let Some(u) = &c.username {
                check_str_len(u)?;
                put_str(&mut body, u);
            }
            if let Some(pw) = &c.password {
                if pw.len() > u16::MAX as usize {
                    return Err(CodecError::InvalidPacket(
                        "password longer than 65535 bytes",
                    ));
                }
                put_bin(&mut body, pw);
            }
            0
        }
        ControlPacket::Connack(c) => {
            body.put_u8(c.session_present as u8);
            body.put_u8(c.return_code);
            0
        }
        ControlPacket::Publish(pb) => {
            body.reserve(2 + pb.topic.as_str().len() + 2 + pb.payload.len());
            put_str(&mut body, pb.topic.as_str());
            if let Some(id) = pb.packet_id {
                body.put_u16(id);
            }
            body.put_slice(&pb.payload);
            ((pb.dup as u8) << 3) | (pb.qos.as_u8() << 1) | pb.retain as u8
        }
        ControlPacket::Puback(id) | ControlPacket::Pubrec(id) | ControlPacket::Pubcomp(id) => {
            body.put_u16(*id);
            0
        }
        ControlPacket::Pubrel(id) => {
            body.put_u16(*id);
            0b0010
        }
        ControlPacket::Subscribe(s) => {
            body.put_u16(s.packet_id);
            for (filter, qos) in &s.entries {
                put_str(&mut body, filter.as_str());
                body.put_u8(qos.as_u8());
            }
            0b0010
        }
        ControlPacket::Suback(s) => {
            body.put_u16(s.packet_id);
            body.put_slice(&s.granted);
            0
        }
        ControlPacket::Pingreq | ControlPacket::Pingresp | ControlPacket::Disconnect => 0,
    };
    let mut header = Vec::with_capacity(5);
    header.push(((p.packet_type() as u8) << 4) | flags);
    write_remaining_length(body.len() as u32, &mut header)?;
    out.reserve(header.len() + body.len());
    out.put_slice(&header);
    out.put_slice(&body);
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn u8(&mut self) -> Result<u8, CodecError> {
        let b = *self
            .buf
            .get(self.pos)
            .ok_or(CodecError::Malformed("packet shorter than its fields"))?;
        self.pos += 1;
        Ok(b)
    }

    fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_be_bytes([self.u8()?, self.u8()?]))
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(CodecError::Malformed("packet shorter than its fields"));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn bin(&mut self) -> Result<&'a [u8], CodecError> {
        let n = self.u16()? as usize;
        self.bytes(n)
    }

    fn string(&mut self) -> Result<&'a str, CodecError> {
        let raw = self.bin()?;
        let s =
            std::str::from_utf8(raw).map_err(|_| CodecError::Malformed("invalid UTF-8 string"))?;
        if s.contains('\0') {
            return Err(CodecError::Malformed("string contains U+0000"));
        }
        Ok(s)
    }

    fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }

    fn done(&self) -> Result<(), CodecError> {
        if self.pos != self.buf.len() {
            return Err(CodecError::Malformed("trailing bytes after packet fields"));
        }
        Ok(())
    }

    fn nonzero_id(&mut self) -> Result<u16, CodecError> {
        match self.u16()? {
            0 => Err(CodecError::Malformed("packet id 0")),
            id => Ok(id),
        }
    }
}

/// Decodes one frame from the start of `buf`.
///
/// `Ok(None)` means more bytes are needed; a frame is only consumed once it is
/// completely buffered.
pub fn decode_packet(buf: &[u8]) -> Result<Option<(ControlPacket, usize)>, CodecError> {
    let Some(&first) = buf.first() else {
        return Ok(None);
    };
    let kind = first >> 4;
    let flags = first & 0x0F;
    let expected_flags = match kind {
        0 | 15 => return Err(CodecError::Malformed("reserved packet type")),
        3 => None,
        6 | 8 | 10 => Some(0b0010),
        _ => Some(0),
    };
    if let Some(f) = expected_flags {
        if flags != f {
            return Err(CodecError::Malformed("invalid fixed header flags"));
        }
    }
    let Some((remaining, len_bytes)) = decode_remaining_length(&buf[1..])? else {
        return Ok(None);
    };
    if remaining > MAX_FRAME_BODY {
        return Err(CodecError::PayloadTooLarge(remaining as usize));
    }
    let header_len = 1 + len_bytes;
    let total = header_len + remaining as usize;
    if buf.len() < total {
        return Ok(None);
    }
    let mut r = Reader {
        buf: &buf[header_len..total],
        pos: 0,
    };
    let packet = match kind {
        1 => ControlPacket::Connect(decode_connect(&mut r)?),
        2 => {
            let ack_flags = r.u8()?;
            if ack_flags & 0xFE != 0 {
                return Err(CodecError::Malformed("reserved connack flags"));
            }
            let return_code = r.u8()?;
            if return_code > 5 {
                return Err(CodecError::Malformed("unknown connack return code"));
            }
            if ack_flags == 1 && return_code != 0 {
                return Err(CodecError::Malformed("session present on refused connect"));
            }
            ControlPacket::Connack(Connack {
                session_present: ack_flags == 1,
                return_code,
            })
        }
        3 => {
            let qos = QosLevel::from_u8((flags >> 1) & 0b11)?;
            let dup = flags & 0b1000 != 0;
            if dup && qos == QosLevel::AtMostOnce {
                return Err(CodecError::Malformed("dup flag on qos 0 publish"));
            }
            let topic = TopicName::new(r.string()?).map_err(CodecError::Topic)?;
            let packet_id = match qos {
                QosLevel::AtMostOnce => None,
                _ => Some(r.nonzero_id()?),
            };
            let payload = r.rest();
            if payload.len() > MAX_PAYLOAD {
                return Err(CodecError::PayloadTooLarge(payload.len()));
            }
            ControlPacket::Publish(Publish {
                topic,
                packet_id,
                qos,
                dup,
                retain: flags & 1 != 0,
                payload: Bytes::copy_from_slice(payload),
            })
        }
        4 => ControlPacket::Puback(r.nonzero_id()?),
        5 => ControlPacket::Pubrec(r.nonzero_id()?),
        6 => ControlPacket::Pubrel(r.nonzero_id()?),
        7 => ControlPacket::Pubcomp(r.nonzero_id()?),
        8 => {
            let packet_id = r.nonzero_id()?;
            let mut entries = Vec::new();
            while r.pos < r.buf.len() {
                let filter = TopicFilter::new(r.string()?).map_err(CodecError::Topic)?;
                let opts = r.u8()?;
                if opts & 0xFC != 0 {
                    return Err(CodecError::Malformed("reserved subscription option bits"));
                }
                entries.push((filter, QosLevel::from_u8(opts)?));
            }
            if entries.is_empty() {
                return Err(CodecError::Malformed("subscribe without entries"));
            }
            ControlPacket::Subscribe(Subscribe { packet_id, entries })
        }
        9 => {
            let packet_id = r.nonzero_id()?;
            let granted = r.rest().to_vec();
            if granted.iter().any(|&g| g > 2 && g != SUBACK_FAILURE) {
                return Err(CodecError::Malformed("invalid suback return code"));
            }
            ControlPacket::Suback(Suback { packet_id, granted })
        }
        10 | 11 => return Err(CodecError::Unsupported("unsubscribe")),
        12 => ControlPacket::Pingreq,
        13 => ControlPacket::Pingresp,
        14 => ControlPacket::Disconnect,
        _ => unreachable!("packet type nibble checked above"),
    };
    r.done()?;
    Ok(Some((packet, total)))
}

fn decode_connect(r: &mut Reader<'_>) -> Result<Connect, CodecError> {
    let name = r.string()?;
    if name != "MQTT" {
        return Err(CodecError::Malformed("protocol name is not MQTT"));
    }
    let level = r.u8()?;
    if level != PROTOCOL_LEVEL {
        return Err(CodecError::UnsupportedProtocolLevel(level));
    }
    let cf = r.u8()?;
    if cf & 0x01 != 0 {
        return Err(CodecError::Malformed("reserved connect flag set"));
    }
    if cf & 0x04 != 0 {
        return Err(CodecError::Unsupported("will message"));
    }
    if cf & 0x38 != 0 {
        return Err(CodecError::Malformed("will qos/retain without will flag"));
    }
    let has_user = cf & 0x80 != 0;
    let has_pass = cf & 0x40 != 0;
    if has_pass && !has_user {
        return Err(CodecError::Malformed("password flag without username flag"));
    }
    let keep_alive = r.u16()?;
    let client_id = r.string()?.to_owned();
    let username = if has_user {
        Some(r.string()?.to_owned())
    } else {
        None
    };
    let password = if has_pass {
        Some(Bytes::copy_from_slice(r.bin()?))
    } else {
        None
    };
    Ok(Connect {
        client_id,
        username,
        password,
        keep_alive,
        clean_session: cf & 0x02 != 0,
    })
}
