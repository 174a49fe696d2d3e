//! Sample tracing: probe timestamps carried along a sample's path, and the
//! per-host clocks they are taken from.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

/// Identifies the host clock a timestamp was read from. Timestamps with
/// different clock ids are never subtracted from each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClockId(pub u8);

impl ClockId {
    pub const VEHICLE: ClockId = ClockId(1);
    pub const CLOUD: ClockId = ClockId(2);
}

/// Probe points along the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u16)]
pub enum ProbeKind {
    Source = 1,
    BridgeIn = 2,
    BridgeOut = 3,
    BridgeAck = 4,
    DetectIn = 5,
    DetectOut = 6,
    Sink = 7,
}

impl ProbeKind {
    pub fn from_u16(v: u16) -> Option<Self> {
        Some(match v {
            1 => ProbeKind::Source,
            2 => ProbeKind::BridgeIn,
            3 => ProbeKind::BridgeOut,
            4 => ProbeKind::BridgeAck,
            5 => ProbeKind::DetectIn,
            6 => ProbeKind::DetectOut,
            7 => ProbeKind::Sink,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Probe {
    pub probe_id: u16,
    pub t_ns: u64,
    pub clock_id: u8,
}

impl Probe {
    pub fn new(kind: ProbeKind, t_ns: u64, clock: ClockId) -> Self {
        Probe {
            probe_id: kind as u16,
            t_ns,
            clock_id: clock.0,
        }
    }

    pub fn kind(&self) -> Option<ProbeKind> {
        ProbeKind::from_u16(self.probe_id)
    }

    pub fn clock(&self) -> ClockId {
        ClockId(self.clock_id)
    }
}

/// Append-only probe list for one sample.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TracingBlock {
    pub sample_id: u64,
    pub probes: Vec<Probe>,
}

impl TracingBlock {
    pub fn new(sample_id: u64) -> Self {
        TracingBlock {
            sample_id,
            probes: Vec::new(),
        }
    }

    pub fn push(&mut self, kind: ProbeKind, t_ns: u64, clock: ClockId) {
        self.probes.push(Probe::new(kind, t_ns, clock));
    }

    pub fn with(mut self, kind: ProbeKind, t_ns: u64, clock: ClockId) -> Self {
        self.push(kind, t_ns, clock);
        self
    }
}

/// A host's timestamp source.
pub trait Clock: Send + Sync {
    fn id(&self) -> ClockId;
    fn now_ns(&self) -> u64;
}

/// Monotonic wall-time clock, optionally shifted by a constant offset to stand
/// in for an unsynchronized remote host.
#[derive(Debug, Clone)]
pub struct HostClock {
    id: ClockId,
    origin: Instant,
    offset_ns: u64,
}

impl HostClock {
    pub fn new(id: ClockId, origin: Instant, offset_ns: u64) -> Self {
        HostClock {
            id,
            origin,
            offset_ns,
        }
    }
}

impl Clock for HostClock {
    fn id(&self) -> ClockId {
        self.id
    }

    fn now_ns(&self) -> u64 {
        self.origin.elapsed().as_nanos() as u64 + self.offset_ns
    }
}

/// Virtual clock shared by all components of a simulation.
#[derive(Debug, Clone, Default)]
pub struct VirtualTime(Arc<AtomicU64>);

impl VirtualTime {
    pub fn now_ns(&self) -> u64 {
        self.0.load(Ordering::Acquire)
    }

    pub fn advance_to(&self, t: u64) {
        let prev = self.0.swap(t, Ordering::AcqRel);
        debug_assert!(prev <= t, "virtual time moved backwards: {prev} -> {t}");
    }
}

/// A host view of [`VirtualTime`] with its own id and offset.
#[derive(Debug, Clone)]
pub struct SimClock {
    id: ClockId,
    time: VirtualTime,
    offset_ns: u64,
}

impl SimClock {
    pub fn new(id: ClockId, time: VirtualTime, offset_ns: u64) -> Self {
        SimClock {
            id,
            time,
            offset_ns,
        }
    }
}

impl Clock for SimClock {
    fn id(&self) -> ClockId {
        self.id
    }

    fn now_ns(&self) -> u64 {
        self.time.now_ns() + self.offset_ns
    }
}
