use std::collections::{BTreeMap, VecDeque};
use std::time::{Duration, Instant};

use super::{ExpandedCloud, ScanError};

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    /// Edge length of the XY grid cells, meters.
    pub cell_m: f32,
    pub min_cluster_size: usize,
    /// Points at or below this height are treated as ground and ignored.
    pub ground_z: f32,
    /// Minimum wall-clock duration of one `detect` call, spent busy-waiting.
    pub compute_delay: Duration,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            cell_m: 0.5,
            min_cluster_size: 20,
            ground_z: -1.6,
            compute_delay: Duration::from_micros(43_400),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectedObject {
    pub center: [f32; 3],
    pub extent: [f32; 3],
    pub point_count: u32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ObjectList {
    pub stamp: u64,
    pub objects: Vec<DetectedObject>,
}

const OBJECT_SIZE: usize = 28;

impl ObjectList {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + OBJECT_SIZE * self.objects.len());
        out.extend_from_slice(&self.stamp.to_le_bytes());
        out.extend_from_slice(&(self.objects.len() as u32).to_le_bytes());
        for o in &self.objects {
            for v in o.center.iter().chain(o.extent.iter()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&o.point_count.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, ScanError> {
        if buf.len() < 12 {
            return Err(ScanError::Truncated {
                needed: 12,
                had: buf.len(),
            });
        }
        let stamp = u64::from_le_bytes(buf[..8].try_into().unwrap());
        let n = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
        let needed = 12 + n * OBJECT_SIZE;
        if buf.len() != needed {
            return Err(ScanError::Truncated {
                needed,
                had: buf.len(),
            });
        }
        let f = |o: usize| f32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
        let objects = (0..n)
            .map(|i| {
                let o = 12 + i * OBJECT_SIZE;
                DetectedObject {
                    center: [f(o), f(o + 4), f(o + 8)],
                    extent: [f(o + 12), f(o + 16), f(o + 20)],
                    point_count: u32::from_le_bytes(buf[o + 24..o + 28].try_into().unwrap()),
                }
            })
            .collect();
        Ok(ObjectList { stamp, objects })
    }
}

/// Grid clustering: non-ground points are binned into XY cells, 4-connected
/// occupied cells form one cluster, small clusters are dropped.
pub fn cluster(cloud: &ExpandedCloud, cfg: &DetectorConfig) -> ObjectList {
    let mut cells: BTreeMap<(i32, i32), Vec<usize>> = BTreeMap::new();
    for (i, p) in cloud.points.iter().enumerate() {
        if p.z <= cfg.ground_z {
            continue;
        }
        let key = (
            (p.x / cfg.cell_m).floor() as i32,
            (p.y / cfg.cell_m).floor() as i32,
        );
        cells.entry(key).or_default().push(i);
    }

    let mut objects = Vec::new();
    let mut seen: BTreeMap<(i32, i32), ()> = BTreeMap::new();
    for &start in cells.keys() {
        if seen.contains_key(&start) {
            continue;
        }
        seen.insert(start, ());
        let mut members = Vec::new();
        let mut queue = VecDeque::from([start]);
        while let Some(c) = queue.pop_front() {
            members.extend_from_slice(&cells[&c]);
            for n in [
                (c.0 + 1, c.1),
                (c.0 - 1, c.1),
                (c.0, c.1 + 1),
                (c.0, c.1 - 1),
            ] {
                if cells.contains_key(&n) && !seen.contains_key(&n) {
                    seen.insert(n, ());
                    queue.push_back(n);
                }
            }
        }
        if members.len() < cfg.min_cluster_size {
            continue;
        }
        let mut lo = [f32::INFINITY; 3];
        let mut hi = [f32::NEG_INFINITY; 3];
        for &i in &members {
            let p = &cloud.points[i];
            for (k, v) in [p.x, p.y, p.z].into_iter().enumerate() {
                lo[k] = lo[k].min(v);
                hi[k] = hi[k].max(v);
            }
        }
        objects.push(DetectedObject {
            center: [0, 1, 2].map(|k| (lo[k] + hi[k]) / 2.0),
            extent: [0, 1, 2].map(|k| (hi[k] - lo[k]).max(1e-3)),
            point_count: members.len() as u32,
        });
    }
    ObjectList {
        stamp: cloud.stamp,
        objects,
    }
}

/// Runs [`cluster`] and then waits until `cfg.compute_delay` has elapsed since
/// the call started. The last stretch is a spin so the deadline is held to
/// well under a millisecond.
pub fn detect(cloud: &ExpandedCloud, cfg: &DetectorConfig) -> ObjectList {
    let start = Instant::now();
    let objects = cluster(cloud, cfg);
    busy_wait_until(start + cfg.compute_delay);
    objects
}

const SPIN_WINDOW: Duration = Duration::from_millis(1);

pub(crate) fn busy_wait_until(deadline: Instant) {
    let now = Instant::now();
    if deadline > now + SPIN_WINDOW {
        std::thread::sleep(deadline - now - SPIN_WINDOW);
    }
    while Instant::now() < deadline {
        std::hint::spin_loop();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scanmodel::{expand, reference_scan, Calibration, Point};

    fn blob(cx: f32, cy: f32, n: usize, seed: u32) -> Vec<Point> {
        (0..n)
            .map(|i| {
                let k = (i as u32).wrapping_mul(2_654_435_761).wrapping_add(seed);
                let dx = (k % 1000) as f32 / 1000.0 - 0.5;
                let dy = ((k / 1000) % 1000) as f32 / 1000.0 - 0.5;
                Point {
                    x: cx + dx,
                    y: cy + dy,
                    z: 0.0,
                    intensity: 1.0,
                    ring: 0,
                    time_offset: 0.0,
                }
            })
            .collect()
    }

    /// Union-find over points: two points are linked when their cells coincide
    /// or are 4-neighbours.
    fn brute_force_components(points: &[Point], cell: f32, min: usize) -> usize {
        let key = |p: &Point| ((p.x / cell).floor() as i32, (p.y / cell).floor() as i32);
        let mut parent: Vec<usize> = (0..points.len()).collect();
        fn find(p: &mut Vec<usize>, i: usize) -> usize {
            if p[i] != i {
                let r = find(p, p[i]);
                p[i] = r;
            }
            p[i]
        }
        for i in 0..points.len() {
            for j in i + 1..points.len() {
                let (a, b) = (key(&points[i]), key(&points[j]));
                if (a.0 - b.0).abs() + (a.1 - b.1).abs() <= 1 {
                    let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                    parent[ri] = rj;
                }
            }
        }
        let mut sizes = std::collections::HashMap::new();
        for i in 0..points.len() {
            *sizes.entry(find(&mut parent, i)).or_insert(0usize) += 1;
        }
        sizes.values().filter(|&&s| s >= min).count()
    }

    fn cfg() -> DetectorConfig {
        DetectorConfig {
            compute_delay: Duration::ZERO,
            ..DetectorConfig::default()
        }
    }

    #[test]
    fn two_blobs() {
        let mut points = blob(5.0, 5.0, 100, 1);
        points.extend(blob(-8.0, 3.0, 100, 2));
        let cloud = ExpandedCloud {
            stamp: 4,
            frame_id: String::new(),
            points,
        };
        let list = cluster(&cloud, &cfg());
        assert_eq!(
            list.objects.len(),
            brute_force_components(&cloud.points, 0.5, 20)
        );
        assert_eq!(list.objects.len(), 2);
        assert!(list.objects.iter().all(|o| o.point_count == 100));
        assert!(list
            .objects
            .iter()
            .all(|o| o.extent.iter().all(|&e| e > 0.0)));
    }

    #[test]
    fn empty_cloud_still_waits() {
        let cloud = ExpandedCloud {
            stamp: 0,
            frame_id: String::new(),
            points: vec![],
        };
        let cfg = DetectorConfig {
            compute_delay: Duration::from_millis(5),
            ..DetectorConfig::default()
        };
        let start = Instant::now();
        assert!(detect(&cloud, &cfg).objects.is_empty());
        assert!(start.elapsed() >= Duration::from_millis(5));
    }

    #[test]
    fn deterministic_on_reference() {
        let cloud = expand(&reference_scan(), &Calibration::vlp32c());
        let a = cluster(&cloud, &cfg());
        let b = cluster(&cloud, &cfg());
        assert_eq!(a, b);
        assert!(!a.objects.is_empty());
        assert_eq!(ObjectList::from_bytes(&a.to_bytes()).unwrap(), a);
    }
}
