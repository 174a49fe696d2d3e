use super::CodecError;

/// Largest value representable in the 4-byte remaining-length field.
pub const MAX_REMAINING_LENGTH: u32 = 268_435_455;

/// Encodes `n` as a base-128 varint (least significant group first).
pub fn encode_remaining_length(n: u32) -> Result<Vec<u8>, CodecError> {
    let mut out = Vec::with_capacity(4);
    write_remaining_length(n, &mut out)?;
    Ok(out)
}

pub(crate) fn write_remaining_length(mut n: u32, out: &mut Vec<u8>) -> Result<(), CodecError> {
    if n > MAX_REMAINING_LENGTH {
        return Err(CodecError::OutOfRange(n as u64));
    }
    loop {
        let mut byte = (n % 128) as u8;
        n /= 128;
        if n > 0 {
            byte |= 0x80;
        }
        out.push(byte);
        if n == 0 {
            return Ok(());
        }
    }
}

/// Decodes a remaining-length varint from the start of `buf`.
///
/// Returns `Ok(None)` when the buffer ends while the continuation bit is still set.
pub fn decode_remaining_length(buf: &[u8]) -> Result<Option<(u32, usize)>, CodecError> {
    let mut value: u32 = 0;
    let mut multiplier: u32 = 1;
    for (i, &byte) in buf.iter().enumerate() {
        value += (byte & 0x7F) as u32 * multiplier;
        if byte & 0x80 == 0 {
            return Ok(Some((value, i + 1)));
        }
        if i == 3 {
            return Err(CodecError::Malformed(
                "remaining length longer than 4 bytes",
            ));
        }
        multiplier *= 128;
    }
    Ok(None)
}
