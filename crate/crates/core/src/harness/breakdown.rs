//! Per-sample latency decomposition from probe records.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{ProbeKind, TracingBlock};

/// One stage visit of a sample: entry and exit time on one host clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub sample_id: u64,
    pub probe_id: u16,
    pub t_in: u64,
    pub t_out: u64,
    pub clock_id: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    /// Source, detector and sink on the vehicle.
    InVehicle,
    /// Vehicle and cloud joined by two bridges and the broker.
    #[default]
    Bridged,
    /// Vehicle bridge to broker and straight back.
    CommOnly,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BreakdownError {
    #[error("sample {sample_id}: missing probe ({detail})")]
    MissingProbe { sample_id: u64, detail: String },
    #[error("sample {sample_id}: partial {partial} would subtract across clocks")]
    ClockViolation {
        sample_id: u64,
        partial: &'static str,
    },
    #[error("sample {sample_id}: record exits before it enters")]
    InvalidRecord { sample_id: u64 },
}

/// Named partial latencies of one sample, in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub sample_id: u64,
    pub veh_prop_to_iface: f64,
    pub veh_iface: f64,
    pub comm_up: f64,
    pub cloud_iface_in: f64,
    pub cloud_prop_to_det: f64,
    pub detection: f64,
    pub cloud_prop_to_iface: f64,
    pub cloud_iface_out: f64,
    pub comm_down: f64,
    pub veh_iface_in: f64,
    pub veh_prop_to_sink: f64,
    pub total: f64,
}

pub const PARTIALS: [&str; 11] = [
    "veh_prop_to_iface",
    "veh_iface",
    "comm_up",
    "cloud_iface_in",
    "cloud_prop_to_det",
    "detection",
    "cloud_prop_to_iface",
    "cloud_iface_out",
    "comm_down",
    "veh_iface_in",
    "veh_prop_to_sink",
];

impl LatencyBreakdown {
    pub fn partials(&self) -> [f64; 11] {
        [
            self.veh_prop_to_iface,
            self.veh_iface,
            self.comm_up,
            self.cloud_iface_in,
            self.cloud_prop_to_det,
            self.detection,
            self.cloud_prop_to_iface,
            self.cloud_iface_out,
            self.comm_down,
            self.veh_iface_in,
            self.veh_prop_to_sink,
        ]
    }

    pub fn from_partials(sample_id: u64, p: [f64; 11], total: f64) -> Self {
        LatencyBreakdown {
            sample_id,
            veh_prop_to_iface: p[0],
            veh_iface: p[1],
            comm_up: p[2],
            cloud_iface_in: p[3],
            cloud_prop_to_det: p[4],
            detection: p[5],
            cloud_prop_to_iface: p[6],
            cloud_iface_out: p[7],
            comm_down: p[8],
            veh_iface_in: p[9],
            veh_prop_to_sink: p[10],
            total,
        }
    }

    pub fn partial_sum(&self) -> f64 {
        self.partials().iter().sum()
    }

    pub fn interfaces(&self) -> f64 {
        self.veh_iface + self.cloud_iface_in + self.cloud_iface_out + self.veh_iface_in
    }

    pub fn comm(&self) -> f64 {
        self.comm_up + self.comm_down
    }
}

/// Turns a sample's point probes into stage records. Consecutive in/out
/// pairs on one clock form one record; `ack` replaces the exit time of the
/// first bridge record (publish completion on the vehicle).
pub fn records_from_trace(trace: &TracingBlock, ack: Option<u64>) -> Vec<ProbeRecord> {
    let mut out: Vec<ProbeRecord> = Vec::new();
    let mut open: Option<ProbeRecord> = None;
    for p in &trace.probes {
        let rec = |t_out| ProbeRecord {
            sample_id: trace.sample_id,
            probe_id: p.probe_id,
            t_in: p.t_ns,
            t_out,
            clock_id: p.clock_id,
        };
        match p.kind() {
            Some(ProbeKind::BridgeIn) | Some(ProbeKind::DetectIn) => {
                if let Some(o) = open.take() {
                    out.push(o);
                }
                open = Some(rec(p.t_ns));
            }
            Some(ProbeKind::BridgeOut) | Some(ProbeKind::DetectOut) => match open.take() {
                Some(mut o) if o.clock_id == p.clock_id && pairs(o.probe_id, p.probe_id) => {
                    o.t_out = p.t_ns;
                    out.push(o);
                }
                other => {
                    out.extend(other);
                    out.push(rec(p.t_ns));
                }
            },
            _ => {
                if let Some(o) = open.take() {
                    out.push(o);
                }
                out.push(rec(p.t_ns));
            }
        }
    }
    out.extend(open);
    if let Some(t) = ack {
        if let Some(r) = out
            .iter_mut()
            .find(|r| r.probe_id == ProbeKind::BridgeIn as u16)
        {
            r.t_out = r.t_out.max(t);
        }
    }
    out
}

fn pairs(in_id: u16, out_id: u16) -> bool {
    (in_id == ProbeKind::BridgeIn as u16 && out_id == ProbeKind::BridgeOut as u16)
        || (in_id == ProbeKind::DetectIn as u16 && out_id == ProbeKind::DetectOut as u16)
}

const SRC: u16 = ProbeKind::Source as u16;
const BRG: u16 = ProbeKind::BridgeIn as u16;
const DET: u16 = ProbeKind::DetectIn as u16;
const SNK: u16 = ProbeKind::Sink as u16;

impl Topology {
    /// Expected stage sequence and which records must share a clock with record 0.
    fn pattern(self) -> &'static [(u16, bool)] {
        match self {
            Topology::Bridged => &[
                (SRC, true),
                (BRG, true),
                (BRG, false),
                (DET, false),
                (BRG, false),
                (BRG, true),
                (SNK, true),
            ],
            Topology::InVehicle => &[(SRC, true), (DET, true), (SNK, true)],
            Topology::CommOnly => &[(SRC, true), (BRG, true), (BRG, true), (SNK, true)],
        }
    }
}

fn diff(a: u64, b: u64) -> i64 {
    a as i64 - b as i64
}

fn ms(ns: i64) -> f64 {
    ns as f64 / 1e6
}

/// Decomposes one sample. Every partial is a same-clock difference; the
/// communication share is what remains of the total and is split evenly.
pub fn assemble_breakdown(
    records: &[ProbeRecord],
    topology: Topology,
) -> Result<LatencyBreakdown, BreakdownError> {
    let sample_id = records.first().map_or(0, |r| r.sample_id);
    let pattern = topology.pattern();
    let missing = |detail: String| BreakdownError::MissingProbe { sample_id, detail };
    if records.len() != pattern.len() {
        return Err(missing(format!(
            "expected {} stage records, got {}",
            pattern.len(),
            records.len()
        )));
    }
    for (i, (r, &(kind, _))) in records.iter().zip(pattern).enumerate() {
        if r.sample_id != sample_id {
            return Err(missing(format!(
                "record {i} belongs to sample {}",
                r.sample_id
            )));
        }
        if r.probe_id != kind {
            return Err(missing(format!(
                "record {i} is probe {} where {} was expected",
                r.probe_id, kind
            )));
        }
        if r.t_out < r.t_in {
            return Err(BreakdownError::InvalidRecord { sample_id });
        }
    }
    let home = records[0].clock_id;
    let r = records;
    // same clock as the neighbour it is subtracted from
    let same = |a: usize, b: usize, partial: &'static str| {
        if r[a].clock_id == r[b].clock_id {
            Ok(())
        } else {
            Err(BreakdownError::ClockViolation { sample_id, partial })
        }
    };
    for (i, &(_, on_home)) in pattern.iter().enumerate() {
        if on_home && r[i].clock_id != home {
            return Err(BreakdownError::ClockViolation {
                sample_id,
                partial: "total",
            });
        }
    }
    let last = r.len() - 1;
    let total = diff(r[last].t_in, r[0].t_out);
    let mut p = [0i64; 11];
    match topology {
        Topology::Bridged => {
            same(1, 0, "veh_prop_to_iface")?;
            same(3, 2, "cloud_prop_to_det")?;
            same(4, 3, "cloud_prop_to_iface")?;
            same(6, 5, "veh_prop_to_sink")?;
            p[0] = diff(r[1].t_in, r[0].t_out);
            p[1] = diff(r[1].t_out, r[1].t_in);
            p[3] = diff(r[2].t_out, r[2].t_in);
            p[4] = diff(r[3].t_in, r[2].t_out);
            p[5] = diff(r[3].t_out, r[3].t_in);
            p[6] = diff(r[4].t_in, r[3].t_out);
            p[7] = diff(r[4].t_out, r[4].t_in);
            p[9] = diff(r[5].t_out, r[5].t_in);
            p[10] = diff(r[6].t_in, r[5].t_out);
        }
        Topology::InVehicle => {
            p[4] = diff(r[1].t_in, r[0].t_out);
            p[5] = diff(r[1].t_out, r[1].t_in);
            p[10] = diff(r[2].t_in, r[1].t_out);
        }
        Topology::CommOnly => {
            p[0] = diff(r[1].t_in, r[0].t_out);
            p[1] = diff(r[1].t_out, r[1].t_in);
            p[9] = diff(r[2].t_out, r[2].t_in);
            p[10] = diff(r[3].t_in, r[2].t_out);
        }
    }
    if topology != Topology::InVehicle {
        let comm = total - p.iter().sum::<i64>();
        p[2] = comm / 2;
        p[8] = comm - comm / 2;
    }
    Ok(LatencyBreakdown::from_partials(
        sample_id,
        p.map(ms),
        ms(total),
    ))
}
