//! Per-link network emulation: delay, Gaussian jitter, bandwidth cap and loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{ControlPacket, QosLevel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShaperConfig {
    pub one_way_delay_ms: f64,
    pub jitter_stddev_ms: f64,
    /// Bytes per second; 0 disables the cap.
    pub bandwidth_cap: f64,
    pub drop_probability: f64,
    pub seed: u64,
}

impl Default for ShaperConfig {
    fn default() -> Self {
        ShaperConfig {
            one_way_delay_ms: 0.0,
            jitter_stddev_ms: 0.0,
            bandwidth_cap: 0.0,
            drop_probability: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ShaperError {
    #[error("delay must be finite and >= 0, got {0}")]
    Delay(f64),
    #[error("jitter must be finite and >= 0, got {0}")]
    Jitter(f64),
    #[error("bandwidth cap must be finite and >= 0, got {0}")]
    Bandwidth(f64),
    #[error("drop probability must lie in [0, 1], got {0}")]
    DropProbability(f64),
}

impl ShaperConfig {
    pub fn delay(ms: f64) -> Self {
        ShaperConfig {
            one_way_delay_ms: ms,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), ShaperError> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.one_way_delay_ms) {
            return Err(ShaperError::Delay(self.one_way_delay_ms));
        }
        if !ok(self.jitter_stddev_ms) {
            return Err(ShaperError::Jitter(self.jitter_stddev_ms));
        }
        if !ok(self.bandwidth_cap) {
            return Err(ShaperError::Bandwidth(self.bandwidth_cap));
        }
        if !(0.0..=1.0).contains(&self.drop_probability) {
            return Err(ShaperError::DropProbability(self.drop_probability));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.one_way_delay_ms == 0.0
            && self.jitter_stddev_ms == 0.0
            && self.bandwidth_cap == 0.0
            && self.drop_probability == 0.0
    }
}

/// What a frame is, as far as the shaper cares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameKind {
    /// QoS 0 application message; the only droppable kind.
    Publish0,
    /// QoS 1/2 application message.
    Publish,
    Control,
}

impl FrameKind {
    pub fn of(p: &ControlPacket) -> Self {
        match p {
            ControlPacket::Publish(p) if p.qos == QosLevel::AtMostOnce => FrameKind::Publish0,
            ControlPacket::Publish(_) => FrameKind::Publish,
            _ => FrameKind::Control,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeDecision {
    Deliver(u64),
    Drop,
}

/// One direction of a link. FIFO: delivery times never decrease.
///
/// Application frames and control frames draw jitter from separate streams,
/// so runs that differ only in acknowledgement traffic see the same jitter
/// on their data frames.
#[derive(Debug, Clone)]
pub struct Shaper {
    cfg: ShaperConfig,
    data_rng: ChaCha8Rng,
    ctrl_rng: ChaCha8Rng,
    loss_rng: ChaCha8Rng,
    jitter: Option<Normal<f64>>,
    busy_until: u64,
    last_delivery: u64,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

impl Shaper {
    /// `lane` separates the random streams of several shapers sharing one seed.
    pub fn new(cfg: ShaperConfig, lane: u64) -> Result<Self, ShaperError> {
        cfg.validate()?;
        let jitter =
            (cfg.jitter_stddev_ms > 0.0).then(|| Normal::new(0.0, cfg.jitter_stddev_ms).unwrap());
        Ok(Shaper {
            data_rng: stream(cfg.seed, lane * 3),
            ctrl_rng: stream(cfg.seed, lane * 3 + 1),
            loss_rng: stream(cfg.seed, lane * 3 + 2),
            jitter,
            cfg,
            busy_until: 0,
            last_delivery: 0,
        })
    }

    pub fn config(&self) -> &ShaperConfig {
        &self.cfg
    }

    /// Schedules a `len`-byte frame handed to the link at `now` (ns).
    pub fn shape(&mut self, len: usize, kind: FrameKind, now: u64) -> ShapeDecision {
        let start = now.max(self.busy_until);
        let tx = if self.cfg.bandwidth_cap > 0.0 {
            (len as f64 * 1e9 / self.cfg.bandwidth_cap).round() as u64
        } else {
            0
        };
        self.busy_until = start + tx;
        if kind == FrameKind::Publish0
            && self.cfg.drop_probability > 0.0
            && self.loss_rng.random::<f64>() < self.cfg.drop_probability
        {
            return ShapeDecision::Drop;
        }
        let mut delay_ms = self.cfg.one_way_delay_ms;
        if let Some(n) = &self.jitter {
            let rng = if kind == FrameKind::Control {
                &mut self.ctrl_rng
            } else {
                &mut self.data_rng
            };
            delay_ms = (delay_ms + n.sample(rng)).max(0.0);
        }
        let at = (self.busy_until + (delay_ms * 1e6).round() as u64).max(self.last_delivery);
        self.last_delivery = at;
        ShapeDecision::Deliver(at)
    }
}

/// Both directions of a client's link to the broker.
#[derive(Debug, Clone)]
pub struct LinkShaper {
    /// client -> broker
    pub up: Shaper,
    /// broker -> client
    pub down: Shaper,
}

impl LinkShaper {
    pub fn new(cfg: ShaperConfig) -> Result<Self, ShaperError> {
        Ok(LinkShaper {
            up: Shaper::new(cfg.clone(), 0)?,
            down: Shaper::new(cfg, 1)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MS: u64 = 1_000_000;

    #[test]
    fn pure_delay() {
        let mut s = Shaper::new(ShaperConfig::delay(19.0), 0).unwrap();
        assert_eq!(
            s.shape(100, FrameKind::Publish0, 5 * MS),
            ShapeDecision::Deliver(24 * MS)
        );
        assert_eq!(
            s.shape(1_000_000, FrameKind::Control, 6 * MS),
            ShapeDecision::Deliver(25 * MS)
        );
    }

    #[test]
    fn serialization_time() {
        let mut s = Shaper::new(
            ShaperConfig {
                bandwidth_cap: 1e7,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        assert_eq!(
            s.shape(1_000_000, FrameKind::Publish, 0),
            ShapeDecision::Deliver(100 * MS)
        );
        // queued behind the first frame
        assert_eq!(
            s.shape(1_000_000, FrameKind::Publish, 50 * MS),
            ShapeDecision::Deliver(200 * MS)
        );
    }

    #[test]
    fn certain_drop_only_hits_qos0() {
        let mut s = Shaper::new(
            ShaperConfig {
                drop_probability: 1.0,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        assert_eq!(s.shape(10, FrameKind::Publish0, 0), ShapeDecision::Drop);
        assert_eq!(
            s.shape(10, FrameKind::Publish, 0),
            ShapeDecision::Deliver(0)
        );
        assert_eq!(
            s.shape(10, FrameKind::Control, 0),
            ShapeDecision::Deliver(0)
        );
    }

    #[test]
    fn invalid_configs() {
        assert!(Shaper::new(ShaperConfig::delay(-1.0), 0).is_err());
        assert!(Shaper::new(
            ShaperConfig {
                drop_probability: 1.5,
                ..Default::default()
            },
            0
        )
        .is_err());
        assert!(Shaper::new(
            ShaperConfig {
                bandwidth_cap: f64::NAN,
                ..Default::default()
            },
            0
        )
        .is_err());
    }

    #[test]
    fn jitter_statistics() {
        let cfg = ShaperConfig {
            one_way_delay_ms: 19.0,
            jitter_stddev_ms: 1.0,
            seed: 3,
            ..Default::default()
        };
        let mut s = Shaper::new(cfg, 0).unwrap();
        let n = 20_000;
        let d: Vec<f64> = (0..n)
            .map(|i| {
                let now = i as u64 * 100 * MS;
                match s.shape(10, FrameKind::Publish0, now) {
                    ShapeDecision::Deliver(t) => (t - now) as f64 / 1e6,
                    ShapeDecision::Drop => unreachable!(),
                }
            })
            .collect();
        let mean = d.iter().sum::<f64>() / n as f64;
        let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 19.0).abs() < 0.05, "{mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn control_frames_do_not_perturb_data_jitter() {
        let cfg = ShaperConfig {
            one_way_delay_ms: 10.0,
            jitter_stddev_ms: 2.0,
            seed: 11,
            ..Default::default()
        };
        let mut a = Shaper::new(cfg.clone(), 0).unwrap();
        let mut b = Shaper::new(cfg, 0).unwrap();
        for i in 0..100u64 {
            let now = i * 1000 * MS;
            b.shape(2, FrameKind::Control, now);
            assert_eq!(
                a.shape(50, FrameKind::Publish0, now + 500 * MS),
                b.shape(50, FrameKind::Publish, now + 500 * MS)
            );
        }
    }

    fn arb_cfg() -> impl Strategy<Value = ShaperConfig> {
        (
            0.0..50.0f64,
            0.0..10.0f64,
            prop_oneof![Just(0.0), 1e5..1e8f64],
            0.0..1.0f64,
            any::<u64>(),
        )
            .prop_map(|(d, j, c, p, seed)| ShaperConfig {
                one_way_delay_ms: d,
                jitter_stddev_ms: j,
                bandwidth_cap: c,
                drop_probability: p,
                seed,
            })
    }

    fn arb_frames() -> impl Strategy<Value = Vec<(u64, usize, u8)>> {
        prop::collection::vec((0..5_000_000u64, 2..200_000usize, 0..3u8), 1..200)
    }

    fn kind(k: u8) -> FrameKind {
        [FrameKind::Publish0, FrameKind::Publish, FrameKind::Control][k as usize]
    }

    proptest! {
        #[test]
        fn fifo(cfg in arb_cfg(), frames in arb_frames()) {
            let mut s = Shaper::new(cfg, 0).unwrap();
            let mut now = 0;
            let mut last = 0;
            for (gap, len, k) in frames {
                now += gap;
                if let ShapeDecision::Deliver(t) = s.shape(len, kind(k), now) {
                    prop_assert!(t >= last);
                    prop_assert!(t >= now);
                    last = t;
                }
            }
        }

        #[test]
        fn seeded_determinism(cfg in arb_cfg(), frames in arb_frames()) {
            let run = |cfg: ShaperConfig| {
                let mut s = Shaper::new(cfg, 0).unwrap();
                let mut now = 0;
                frames.iter().map(|&(gap, len, k)| { now += gap; s.shape(len, kind(k), now) }).collect::<Vec<_>>()
            };
            prop_assert_eq!(run(cfg.clone()), run(cfg));
        }
    }

    #[test]
    fn loss_rate_within_three_sigma() {
        for (p, seed) in [(0.05, 1u64), (0.2, 2), (0.5, 3), (0.9, 4)] {
            let n = 5000;
            let mut s = Shaper::new(
                ShaperConfig {
                    drop_probability: p,
                    seed,
                    ..Default::default()
                },
                0,
            )
            .unwrap();
            let delivered = (0..n)
                .filter(|&i| {
                    matches!(
                        s.shape(100, FrameKind::Publish0, i * MS),
                        ShapeDecision::Deliver(_)
                    )
                })
                .count();
            let frac = delivered as f64 / n as f64;
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            assert!((frac - (1.0 - p)).abs() <= 3.0 * sigma, "p={p} frac={frac}");
        }
    }
}
