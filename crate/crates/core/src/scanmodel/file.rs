use std::io::{Read, Write};
use std::path::Path;

use super::{CompactScan, ScanError};

pub const SCAN_FILE_MAGIC: &[u8; 4] = b"CSCN";
pub const SCAN_FILE_VERSION: u8 = 1;

/// Writes `magic | version | stamp | frame_id | n_packets | packets`.
pub fn write_scan_file<W: Write>(scan: &CompactScan, mut w: W) -> Result<(), ScanError> {
    let mut buf = Vec::with_capacity(5 + scan.serialized_len());
    buf.extend_from_slice(SCAN_FILE_MAGIC);
    buf.push(SCAN_FILE_VERSION);
    scan.write_to(&mut buf);
    w.write_all(&buf).map_err(|e| ScanError::Io(e.to_string()))
}

pub fn read_scan_file<R: Read>(mut r: R) -> Result<CompactScan, ScanError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)
        .map_err(|e| ScanError::Io(e.to_string()))?;
    if buf.len() < 5 {
        return Err(ScanError::Truncated {
            needed: 5,
            had: buf.len(),
        });
    }
    if &buf[..4] != SCAN_FILE_MAGIC {
        return Err(ScanError::BadMagic);
    }
    if buf[4] != SCAN_FILE_VERSION {
        return Err(ScanError::UnsupportedVersion(buf[4]));
    }
    CompactScan::from_bytes(&buf[5..])
}

pub fn save_scan(scan: &CompactScan, path: impl AsRef<Path>) -> Result<(), ScanError> {
    let f = std::fs::File::create(path).map_err(|e| ScanError::Io(e.to_string()))?;
    write_scan_file(scan, std::io::BufWriter::new(f))
}

pub fn load_scan(path: impl AsRef<Path>) -> Result<CompactScan, ScanError> {
    let f = std::fs::File::open(path).map_err(|e| ScanError::Io(e.to_string()))?;
    read_scan_file(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scanmodel::{generate_scan, reference_scan};

    #[test]
    fn file_round_trip() {
        let mut scan = reference_scan();
        scan.frame_id = "velodyne".into();
        scan.stamp = 1_650_000_000_000_000_000;
        let mut bytes = Vec::new();
        write_scan_file(&scan, &mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"CSCN");
        assert_eq!(bytes.len(), 5 + 16 + 8 + 150 * 1206);
        assert_eq!(read_scan_file(&bytes[..]).unwrap(), scan);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.cscn");
        save_scan(&generate_scan(2, 0.5, 1), &path).unwrap();
        assert_eq!(load_scan(&path).unwrap(), generate_scan(2, 0.5, 1));
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = Vec::new();
        write_scan_file(&generate_scan(1, 0.5, 1), &mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(read_scan_file(&bad[..]), Err(ScanError::BadMagic));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert_eq!(
            read_scan_file(&bad[..]),
            Err(ScanError::UnsupportedVersion(9))
        );
        assert!(matches!(
            read_scan_file(&bytes[..bytes.len() - 1]),
            Err(ScanError::Truncated { .. })
        ));
        let mut bad = bytes;
        bad[5 + 16] = 0; // first block flag
        assert!(matches!(
            read_scan_file(&bad[..]),
            Err(ScanError::InvalidPacket { .. })
        ));
    }
}
