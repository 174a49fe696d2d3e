use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    Calibration, CompactScan, Packet, BLOCKS_PER_PACKET, DISTANCE_UNIT_M, LASERS,
    RETURNS_PER_PACKET,
};

/// Packet count of the reference sweep (0.18 MB at 1206 bytes per packet).
pub const REFERENCE_PACKETS: usize = 150;
/// Valid returns in the reference sweep.
pub const REFERENCE_VALID_RETURNS: usize = 49_016;

// Firing sequence duration of one block, in microseconds.
const BLOCK_DURATION_US: f64 = 55.296;
const SENSOR_HEIGHT_M: f64 = 1.8;
const MAX_RANGE_M: f64 = 120.0;

/// Boxes standing on the ground: (azimuth center deg, half width deg, range m, height m).
const SCENE_OBJECTS: [(f64, f64, f64, f64); 5] = [
    (20.0, 6.0, 12.0, 1.5),
    (95.0, 4.0, 18.0, 1.6),
    (170.0, 8.0, 9.0, 1.4),
    (250.0, 3.0, 25.0, 2.8),
    (315.0, 5.0, 15.0, 1.5),
];

fn scene_range(azimuth_deg: f64, elevation_deg: f64) -> f64 {
    let tan_el = elevation_deg.to_radians().tan();
    let ground = if elevation_deg < 0.0 {
        (SENSOR_HEIGHT_M / -tan_el).min(MAX_RANGE_M)
    } else {
        MAX_RANGE_M
    };
    let mut best = ground;
    for &(center, half_width, range, height) in &SCENE_OBJECTS {
        let mut d = (azimuth_deg - center).abs() % 360.0;
        if d > 180.0 {
            d = 360.0 - d;
        }
        if d > half_width {
            continue;
        }
        let z = range * tan_el;
        if z >= -SENSOR_HEIGHT_M && z <= height - SENSOR_HEIGHT_M && range < best {
            best = range;
        }
    }
    if best >= MAX_RANGE_M && elevation_deg >= 0.0 {
        // far background wall
        return 60.0 + 10.0 * (azimuth_deg.to_radians() * 3.0).sin();
    }
    best / elevation_deg.to_radians().cos()
}

/// Generates a deterministic synthetic sweep of `n_packets` packets.
///
/// Exactly `round(valid_fraction * n_packets * 384)` returns carry a nonzero
/// distance; the rest are zero (no echo).
pub fn generate_scan(n_packets: usize, valid_fraction: f64, seed: u64) -> CompactScan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = n_packets * RETURNS_PER_PACKET;
    let valid = ((valid_fraction.clamp(0.0, 1.0) * total as f64).round() as usize).min(total);
    let mut is_valid = vec![false; total];
    for i in index::sample(&mut rng, total, valid).iter() {
        is_valid[i] = true;
    }
    let calib = Calibration::vlp32c();
    let blocks_total = (n_packets * BLOCKS_PER_PACKET).max(1);
    let mut packets = Vec::with_capacity(n_packets);
    for p in 0..n_packets {
        let mut azimuths = [0u16; BLOCKS_PER_PACKET];
        let mut returns = [[(0u16, 0u8); LASERS]; BLOCKS_PER_PACKET];
        for b in 0..BLOCKS_PER_PACKET {
            let g = p * BLOCKS_PER_PACKET + b;
            let az = ((g as u64 * 36_000) / blocks_total as u64) as u16;
            azimuths[b] = az;
            for (l, ret) in returns[b].iter_mut().enumerate() {
                let idx = g * LASERS + l;
                let noise: f64 = rng.random_range(-0.02..0.02);
                let intensity: u8 = rng.random_range(1..=255);
                if !is_valid[idx] {
                    continue;
                }
                let r = scene_range(az as f64 / 100.0, calib.elevation_deg[l]) + noise;
                let raw = (r / DISTANCE_UNIT_M).round().clamp(1.0, u16::MAX as f64) as u16;
                *ret = (raw, intensity);
            }
        }
        let ts = (p as f64 * BLOCKS_PER_PACKET as f64 * BLOCK_DURATION_US) as u32;
        packets.push(Packet::build(&azimuths, &returns, ts));
    }
    CompactScan {
        stamp: 0,
        frame_id: String::new(),
        packets,
    }
}

/// The fixed reference sweep used by every benchmark: 150 packets, 49016 valid returns.
pub fn reference_scan() -> CompactScan {
    let fraction = REFERENCE_VALID_RETURNS as f64 / (REFERENCE_PACKETS * RETURNS_PER_PACKET) as f64;
    generate_scan(REFERENCE_PACKETS, fraction, 0x5EED)
}

/// Keeps `floor(ratio * n_packets)` packets drawn uniformly without replacement,
/// preserving their original order.
pub fn downsample(scan: &CompactScan, ratio: f64, seed: u64) -> CompactScan {
    let n = scan.packets.len();
    let keep = ((ratio.clamp(0.0, 1.0) * n as f64).floor() as usize).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = index::sample(&mut rng, n, keep).into_vec();
    chosen.sort_unstable();
    CompactScan {
        stamp: scan.stamp,
        frame_id: scan.frame_id.clone(),
        packets: chosen
            .into_iter()
            .map(|i| scan.packets[i].clone())
            .collect(),
    }
}
