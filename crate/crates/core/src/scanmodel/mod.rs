//! Lidar data model: packet-based compact scans, expanded Cartesian clouds,
//! conversion between them, packet downsampling and a stand-in detector.
//!
//! Wire layouts are little-endian:
//!
//! ```text
//! compact : stamp u64 | frame_id_len u32 | frame_id | n_packets u32 | n_packets x 1206 B
//! expanded: stamp u64 | frame_id_len u32 | frame_id | n_points  u32 | n_points  x 22 B
//! ```

mod detect;
mod expand;
mod file;
mod generate;

pub use detect::{cluster, detect, DetectedObject, DetectorConfig, ObjectList};
pub use expand::{expand, Calibration, ExpandedCloud, Point, POINT_SIZE};
pub use file::{
    load_scan, read_scan_file, save_scan, write_scan_file, SCAN_FILE_MAGIC, SCAN_FILE_VERSION,
};
pub use generate::{
    downsample, generate_scan, reference_scan, REFERENCE_PACKETS, REFERENCE_VALID_RETURNS,
};

use thiserror::Error;

pub const PACKET_SIZE: usize = 1206;
pub const BLOCKS_PER_PACKET: usize = 12;
pub const LASERS: usize = 32;
pub const RETURNS_PER_PACKET: usize = BLOCKS_PER_PACKET * LASERS;
/// Fixed part of every serialized scan or cloud: stamp, frame-id length and element count.
pub const MESSAGE_HEADER_SIZE: usize = 16;
/// Distance unit of a raw return, in meters.
pub const DISTANCE_UNIT_M: f64 = 0.002;

const BLOCK_SIZE: usize = 100;
const BLOCK_FLAG: u16 = 0xEEFF;
// strongest-return mode, VLP-32C product id
const FACTORY_BYTES: [u8; 2] = [0x37, 0x28];

pub const COMPACT_TYPE_TAG: &str = "scan/compact";
pub const EXPANDED_TYPE_TAG: &str = "scan/expanded";
pub const OBJECTS_TYPE_TAG: &str = "objects";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScanError {
    #[error("buffer truncated: needed {needed} bytes, had {had}")]
    Truncated { needed: usize, had: usize },
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("invalid packet {index}: {reason}")]
    InvalidPacket { index: usize, reason: &'static str },
    #[error("frame id is not UTF-8")]
    FrameId,
    #[error("trailing bytes after message")]
    Trailing,
    #[error("io: {0}")]
    Io(String),
}

/// One 1206-byte sensor packet.
#[derive(Clone, PartialEq, Eq)]
pub struct Packet(Box<[u8; PACKET_SIZE]>);

impl std::fmt::Debug for Packet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Packet")
            .field("first_azimuth", &self.block_azimuth(0))
            .field("timestamp_us", &self.timestamp_us())
            .finish()
    }
}

impl Packet {
    pub fn from_bytes(bytes: &[u8], index: usize) -> Result<Self, ScanError> {
        let arr: [u8; PACKET_SIZE] = bytes.try_into().map_err(|_| ScanError::InvalidPacket {
            index,
            reason: "wrong length",
        })?;
        let p = Packet(Box::new(arr));
        for b in 0..BLOCKS_PER_PACKET {
            if p.block_flag(b) != BLOCK_FLAG {
                return Err(ScanError::InvalidPacket {
                    index,
                    reason: "bad block flag",
                });
            }
            if p.block_azimuth(b) >= 36_000 {
                return Err(ScanError::InvalidPacket {
                    index,
                    reason: "azimuth out of range",
                });
            }
        }
        Ok(p)
    }

    pub(crate) fn build(
        azimuths: &[u16; BLOCKS_PER_PACKET],
        returns: &[[(u16, u8); LASERS]],
        timestamp_us: u32,
    ) -> Self {
        let mut data = Box::new([0u8; PACKET_SIZE]);
        for (b, az) in azimuths.iter().enumerate() {
            let base = b * BLOCK_SIZE;
            data[base..base + 2].copy_from_slice(&BLOCK_FLAG.to_le_bytes());
            data[base + 2..base + 4].copy_from_slice(&az.to_le_bytes());
            for (ch, (dist, intensity)) in returns[b].iter().enumerate() {
                let off = base + 4 + ch * 3;
                data[off..off + 2].copy_from_slice(&dist.to_le_bytes());
                data[off + 2] = *intensity;
            }
        }
        let tail = BLOCKS_PER_PACKET * BLOCK_SIZE;
        data[tail..tail + 4].copy_from_slice(&timestamp_us.to_le_bytes());
        data[tail + 4..].copy_from_slice(&FACTORY_BYTES);
        Packet(data)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0[..]
    }

    fn block_flag(&self, block: usize) -> u16 {
        let o = block * BLOCK_SIZE;
        u16::from_le_bytes([self.0[o], self.0[o + 1]])
    }

    /// Block azimuth in hundredths of a degree.
    pub fn block_azimuth(&self, block: usize) -> u16 {
        let o = block * BLOCK_SIZE + 2;
        u16::from_le_bytes([self.0[o], self.0[o + 1]])
    }

    /// Raw distance of one return in 2 mm units; 0 marks an invalid return.
    pub fn distance_raw(&self, block: usize, laser: usize) -> u16 {
        let o = block * BLOCK_SIZE + 4 + laser * 3;
        u16::from_le_bytes([self.0[o], self.0[o + 1]])
    }

    pub fn intensity(&self, block: usize, laser: usize) -> u8 {
        self.0[block * BLOCK_SIZE + 4 + laser * 3 + 2]
    }

    pub fn timestamp_us(&self) -> u32 {
        let o = BLOCKS_PER_PACKET * BLOCK_SIZE;
        u32::from_le_bytes(self.0[o..o + 4].try_into().unwrap())
    }

    pub fn valid_returns(&self) -> usize {
        (0..BLOCKS_PER_PACKET)
            .map(|b| (0..LASERS).filter(|&l| self.distance_raw(b, l) > 0).count())
            .sum()
    }
}

/// A full sweep in packet form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompactScan {
    pub stamp: u64,
    pub frame_id: String,
    pub packets: Vec<Packet>,
}

impl CompactScan {
    pub fn serialized_len(&self) -> usize {
        MESSAGE_HEADER_SIZE + self.frame_id.len() + PACKET_SIZE * self.packets.len()
    }

    pub fn valid_returns(&self) -> usize {
        self.packets.iter().map(Packet::valid_returns).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.serialized_len());
        self.write_to(&mut out);
        out
    }

    pub(crate) fn write_to(&self, out: &mut Vec<u8>) {
        write_header(out, self.stamp, &self.frame_id, self.packets.len());
        for p in &self.packets {
            out.extend_from_slice(p.as_bytes());
        }
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, ScanError> {
        let (scan, used) = Self::read_from(buf)?;
        if used != buf.len() {
            return Err(ScanError::Trailing);
        }
        Ok(scan)
    }

    pub(crate) fn read_from(buf: &[u8]) -> Result<(Self, usize), ScanError> {
        let (stamp, frame_id, count, mut pos) = read_header(buf)?;
        let needed = pos + count * PACKET_SIZE;
        if buf.len() < needed {
            return Err(ScanError::Truncated {
                needed,
                had: buf.len(),
            });
        }
        let mut packets = Vec::with_capacity(count);
        for i in 0..count {
            packets.push(Packet::from_bytes(&buf[pos..pos + PACKET_SIZE], i)?);
            pos += PACKET_SIZE;
        }
        Ok((
            CompactScan {
                stamp,
                frame_id,
                packets,
            },
            pos,
        ))
    }
}

pub(crate) fn write_header(out: &mut Vec<u8>, stamp: u64, frame_id: &str, count: usize) {
    out.extend_from_slice(&stamp.to_le_bytes());
    out.extend_from_slice(&(frame_id.len() as u32).to_le_bytes());
    out.extend_from_slice(frame_id.as_bytes());
    out.extend_from_slice(&(count as u32).to_le_bytes());
}

pub(crate) fn read_header(buf: &[u8]) -> Result<(u64, String, usize, usize), ScanError> {
    let need = |n: usize| {
        if buf.len() < n {
            Err(ScanError::Truncated {
                needed: n,
                had: buf.len(),
            })
        } else {
            Ok(())
        }
    };
    need(12)?;
    let stamp = u64::from_le_bytes(buf[0..8].try_into().unwrap());
    let fid_len = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    need(12 + fid_len + 4)?;
    let frame_id = std::str::from_utf8(&buf[12..12 + fid_len])
        .map_err(|_| ScanError::FrameId)?
        .to_owned();
    let p = 12 + fid_len;
    let count = u32::from_le_bytes(buf[p..p + 4].try_into().unwrap()) as usize;
    Ok((stamp, frame_id, count, p + 4))
}
