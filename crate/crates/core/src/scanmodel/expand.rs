use super::{
    read_header, write_header, CompactScan, ScanError, BLOCKS_PER_PACKET, DISTANCE_UNIT_M, LASERS,
    MESSAGE_HEADER_SIZE,
};

/// Serialized size of one expanded point.
pub const POINT_SIZE: usize = 22;

/// Per-ring elevation angles, ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub elevation_deg: [f64; LASERS],
}

impl Calibration {
    /// VLP-32C-style vertical layout.
    pub fn vlp32c() -> Self {
        Calibration {
            elevation_deg: [
                -25.0, -15.639, -11.31, -8.843, -7.254, -6.148, -5.333, -4.667, -4.0, -3.667,
                -3.333, -3.0, -2.667, -2.333, -2.0, -1.667, -1.333, -1.0, -0.667, -0.333, 0.0,
                0.333, 0.667, 1.0, 1.333, 1.667, 2.333, 3.333, 4.667, 7.0, 10.333, 15.0,
            ],
        }
    }

    pub fn is_valid(&self) -> bool {
        self.elevation_deg.windows(2).all(|w| w[0] < w[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
    pub ring: u16,
    pub time_offset: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedCloud {
    pub stamp: u64,
    pub frame_id: String,
    pub points: Vec<Point>,
}

impl ExpandedCloud {
    pub fn serialized_len(&self) -> usize {
        MESSAGE_HEADER_SIZE + self.frame_id.len() + POINT_SIZE * self.points.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.serialized_len());
        write_header(&mut out, self.stamp, &self.frame_id, self.points.len());
        for p in &self.points {
            out.extend_from_slice(&p.x.to_le_bytes());
            out.extend_from_slice(&p.y.to_le_bytes());
            out.extend_from_slice(&p.z.to_le_bytes());
            out.extend_from_slice(&p.intensity.to_le_bytes());
            out.extend_from_slice(&p.ring.to_le_bytes());
            out.extend_from_slice(&p.time_offset.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, ScanError> {
        let (stamp, frame_id, count, pos) = read_header(buf)?;
        let needed = pos + count * POINT_SIZE;
        if buf.len() != needed {
            return Err(if buf.len() < needed {
                ScanError::Truncated {
                    needed,
                    had: buf.len(),
                }
            } else {
                ScanError::Trailing
            });
        }
        let f = |o: usize| f32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
        let points = (0..count)
            .map(|i| {
                let o = pos + i * POINT_SIZE;
                Point {
                    x: f(o),
                    y: f(o + 4),
                    z: f(o + 8),
                    intensity: f(o + 12),
                    ring: u16::from_le_bytes([buf[o + 16], buf[o + 17]]),
                    time_offset: f(o + 18),
                }
            })
            .collect();
        Ok(ExpandedCloud {
            stamp,
            frame_id,
            points,
        })
    }
}

const BLOCK_DURATION_S: f64 = 55.296e-6;

/// Converts every valid return of `scan` into a Cartesian point.
pub fn expand(scan: &CompactScan, calib: &Calibration) -> ExpandedCloud {
    let (sin_el, cos_el): (Vec<f64>, Vec<f64>) = calib
        .elevation_deg
        .iter()
        .map(|e| e.to_radians().sin_cos())
        .unzip();
    let t0 = scan.packets.first().map_or(0, |p| p.timestamp_us());
    let mut points = Vec::with_capacity(scan.valid_returns());
    for packet in &scan.packets {
        let packet_offset = packet.timestamp_us().wrapping_sub(t0) as f64 * 1e-6;
        for b in 0..BLOCKS_PER_PACKET {
            let (sin_az, cos_az) = (packet.block_azimuth(b) as f64 * 0.01)
                .to_radians()
                .sin_cos();
            let time_offset = (packet_offset + b as f64 * BLOCK_DURATION_S) as f32;
            for l in 0..LASERS {
                let raw = packet.distance_raw(b, l);
                if raw == 0 {
                    continue;
                }
                let r = raw as f64 * DISTANCE_UNIT_M;
                let horizontal = r * cos_el[l];
                points.push(Point {
                    x: (horizontal * sin_az) as f32,
                    y: (horizontal * cos_az) as f32,
                    z: (r * sin_el[l]) as f32,
                    intensity: packet.intensity(b, l) as f32,
                    ring: l as u16,
                    time_offset,
                });
            }
        }
    }
    ExpandedCloud {
        stamp: scan.stamp,
        frame_id: scan.frame_id.clone(),
        points,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scanmodel::{generate_scan, reference_scan, Packet};

    /// Walks the raw bytes directly, without the packet accessors.
    fn brute_force_valid(scan: &CompactScan) -> usize {
        let mut n = 0;
        for p in &scan.packets {
            let bytes = p.as_bytes();
            for b in 0..12 {
                for l in 0..32 {
                    let o = b * 100 + 4 + l * 3;
                    if bytes[o] != 0 || bytes[o + 1] != 0 {
                        n += 1;
                    }
                }
            }
        }
        n
    }

    #[test]
    fn reference_expansion_size() {
        let scan = reference_scan();
        let cloud = expand(&scan, &Calibration::vlp32c());
        assert_eq!(cloud.points.len(), 49_016);
        assert_eq!(cloud.points.len(), brute_force_valid(&scan));
        assert_eq!(cloud.to_bytes().len(), 22 * 49_016 + 16);
        let ratio = cloud.serialized_len() as f64 / scan.serialized_len() as f64;
        assert!((5.8..=6.2).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn count_matches_walker_for_random_scans() {
        for seed in 0..5 {
            let scan = generate_scan(7 + seed as usize, 0.1 * seed as f64 + 0.3, seed);
            let cloud = expand(&scan, &Calibration::vlp32c());
            assert_eq!(cloud.points.len(), brute_force_valid(&scan));
        }
    }

    fn single_return(azimuth: u16, laser: usize, raw: u16) -> CompactScan {
        let mut returns = [[(0u16, 0u8); 32]; 12];
        returns[0][laser] = (raw, 9);
        let p = Packet::build(&[azimuth; 12], &returns, 0);
        CompactScan {
            stamp: 1,
            frame_id: "lidar".into(),
            packets: vec![p],
        }
    }

    #[test]
    fn axis_case() {
        let calib = Calibration::vlp32c();
        let ring0 = calib.elevation_deg.iter().position(|&e| e == 0.0).unwrap();
        // r = 1 m is 500 raw units, azimuth 90 degrees
        let cloud = expand(&single_return(9000, ring0, 500), &calib);
        assert_eq!(cloud.points.len(), 1);
        let p = cloud.points[0];
        assert!(
            (p.x - 1.0).abs() < 1e-6 && p.y.abs() < 1e-6 && p.z.abs() < 1e-6,
            "{p:?}"
        );
        assert_eq!(p.ring as usize, ring0);
        assert_eq!(p.intensity, 9.0);
    }

    #[test]
    fn zero_distance_omitted() {
        let cloud = expand(&single_return(100, 3, 0), &Calibration::vlp32c());
        assert!(cloud.points.is_empty());
    }

    #[test]
    fn bytes_round_trip() {
        let cloud = expand(&generate_scan(3, 0.5, 8), &Calibration::vlp32c());
        assert_eq!(ExpandedCloud::from_bytes(&cloud.to_bytes()).unwrap(), cloud);
    }

    #[test]
    fn calibration_is_ascending() {
        assert!(Calibration::vlp32c().is_valid());
    }
}
