//! Scenario configuration, presets and dotted-key overrides.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::breakdown::Topology;
use super::ScenarioError;
use crate::bridge::{BridgeConfig, BridgeRule, BrokerEndpoint, DEFAULT_QUEUE_SIZE};
use crate::broker::{Qos2Routing, ShaperConfig};
use crate::client::Qos2Release;
use crate::codec::QosLevel;
use crate::scanmodel::DetectorConfig;

/// Client id of the vehicle bridge; the broker shapes this link.
pub const VEHICLE_ID: &str = "vehicle";
pub const CLOUD_ID: &str = "cloud";
pub const POINTS_BUS: &str = "/points";
pub const POINTS_MQTT: &str = "points";
pub const OBJECTS_BUS: &str = "/objects";
pub const OBJECTS_MQTT: &str = "objects";
pub const ECHO_BUS: &str = "/points_echo";

/// Link used for the emulated 5G path: a fixed base delay plus a bandwidth
/// cap, so large uplink frames take longer than small acknowledgements.
pub fn cellular_link() -> ShaperConfig {
    ShaperConfig {
        one_way_delay_ms: 13.6,
        jitter_stddev_ms: 1.0,
        bandwidth_cap: 16.76e6,
        drop_probability: 0.0,
        seed: 7,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Single-threaded discrete-event run on virtual time.
    #[default]
    Sim,
    /// Real threads, sockets and clocks in one process.
    Live,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanFormat {
    #[default]
    Compact,
    Expanded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSettings {
    pub compute_delay_ms: f64,
    /// Forward the input unchanged instead of converting and clustering.
    pub loop_through: bool,
    pub cell_m: f32,
    pub min_cluster_size: usize,
}

impl Default for DetectorSettings {
    fn default() -> Self {
        let d = DetectorConfig::default();
        DetectorSettings {
            compute_delay_ms: 43.4,
            loop_through: false,
            cell_m: d.cell_m,
            min_cluster_size: d.min_cluster_size,
        }
    }
}

impl DetectorSettings {
    pub fn detector_config(&self) -> DetectorConfig {
        DetectorConfig {
            cell_m: self.cell_m,
            min_cluster_size: self.min_cluster_size,
            compute_delay: Duration::from_secs_f64(self.compute_delay_ms / 1e3),
            ..DetectorConfig::default()
        }
    }
}

/// Service times of the simulated pipeline stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimCosts {
    /// Intra-host bus hand-off.
    pub bus_hop_us: f64,
    pub bridge_base_us: f64,
    pub bridge_ns_per_byte: f64,
    /// Compact to expanded conversion.
    pub conversion_ns_per_point: f64,
    /// Broker work per received packet.
    pub broker_us_per_packet: f64,
    /// Client work per transmitted packet.
    pub client_tx_us: f64,
    /// One-way delay between the broker and the co-located cloud bridge.
    pub cloud_link_delay_ms: f64,
}

impl Default for SimCosts {
    fn default() -> Self {
        SimCosts {
            bus_hop_us: 100.0,
            bridge_base_us: 40.0,
            bridge_ns_per_byte: 1.5,
            conversion_ns_per_point: 67.0,
            broker_us_per_packet: 20.0,
            client_tx_us: 15.0,
            cloud_link_delay_ms: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub topology: Topology,
    pub mode: RunMode,
    pub rate_hz: f64,
    pub sample_count: usize,
    pub qos: QosLevel,
    pub tls: bool,
    pub auth: bool,
    pub format: ScanFormat,
    pub size_ratio: f64,
    /// Applied to the vehicle's broker link.
    pub shaper: ShaperConfig,
    pub detector: DetectorSettings,
    pub single_sample_mode: bool,
    /// Constant added to every cloud timestamp.
    pub cloud_clock_offset_ms: f64,
    pub qos2_routing: Qos2Routing,
    pub qos2_release: Qos2Release,
    pub keep_alive_s: u16,
    pub seed: u64,
    /// Fraction of samples allowed to miss probes before the run aborts.
    pub max_missing_fraction: f64,
    pub cost: SimCosts,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            name: "custom".into(),
            topology: Topology::Bridged,
            mode: RunMode::Sim,
            rate_hz: 10.0,
            sample_count: 600,
            qos: QosLevel::AtMostOnce,
            tls: false,
            auth: false,
            format: ScanFormat::Compact,
            size_ratio: 1.0,
            shaper: cellular_link(),
            detector: DetectorSettings::default(),
            single_sample_mode: false,
            cloud_clock_offset_ms: 0.0,
            qos2_routing: Qos2Routing::OnPubrel,
            qos2_release: Qos2Release::OnPubrel,
            keep_alive_s: 30,
            seed: 1,
            max_missing_fraction: 0.01,
            cost: SimCosts::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Config(m));
        if !(self.rate_hz.is_finite() && self.rate_hz > 0.0) {
            return bad(format!("rate_hz must be > 0, got {}", self.rate_hz));
        }
        if self.sample_count == 0 {
            return bad("sample_count must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.size_ratio) {
            return bad(format!(
                "size_ratio must lie in [0, 1], got {}",
                self.size_ratio
            ));
        }
        if !(0.0..=1.0).contains(&self.max_missing_fraction) {
            return bad(format!(
                "max_missing_fraction must lie in [0, 1], got {}",
                self.max_missing_fraction
            ));
        }
        if !(self.cloud_clock_offset_ms.is_finite() && self.cloud_clock_offset_ms >= 0.0) {
            return bad("cloud_clock_offset_ms must be finite and >= 0".into());
        }
        if !(self.detector.compute_delay_ms.is_finite() && self.detector.compute_delay_ms >= 0.0) {
            return bad("detector.compute_delay_ms must be finite and >= 0".into());
        }
        if self.detector.min_cluster_size == 0
            || !(self.detector.cell_m.is_finite() && self.detector.cell_m > 0.0)
        {
            return bad("detector.cell_m and detector.min_cluster_size must be positive".into());
        }
        if self.keep_alive_s == 0 {
            return bad("keep_alive_s must be >= 1".into());
        }
        self.shaper
            .validate()
            .map_err(|e| ScenarioError::Config(format!("shaper: {e}")))?;
        let c = &self.cost;
        let costs = [
            c.bus_hop_us,
            c.bridge_base_us,
            c.bridge_ns_per_byte,
            c.conversion_ns_per_point,
            c.broker_us_per_packet,
            c.client_tx_us,
            c.cloud_link_delay_ms,
        ];
        if costs.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("cost entries must be finite and >= 0".into());
        }
        if self.mode == RunMode::Sim && (self.tls || self.auth) {
            return bad("tls and auth are only available in live mode".into());
        }
        if self.tls && !self.auth {
            return bad("the TLS listener requires auth".into());
        }
        Ok(())
    }

    /// Sets every seed, as `BENCH_SEED` does.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.shaper.seed = seed;
    }

    pub fn period_ns(&self) -> u64 {
        (1e9 / self.rate_hz).round() as u64
    }

    pub fn cloud_offset_ns(&self) -> u64 {
        (self.cloud_clock_offset_ms * 1e6).round() as u64
    }

    fn endpoint(&self, host: &str, port: u16) -> BrokerEndpoint {
        BrokerEndpoint {
            host: host.into(),
            port,
            user: self.auth.then(|| BENCH_USER.to_string()),
            pass: self.auth.then(|| BENCH_PASS.to_string()),
            tls: self.tls,
            ca_cert: None,
        }
    }

    fn rule(&self, source: &str, target: &str) -> BridgeRule {
        BridgeRule {
            source_topic: source.into(),
            target_topic: target.into(),
            qos: self.qos,
            inject_tracing: true,
        }
    }

    /// Bridge configuration of the vehicle host.
    pub fn vehicle_bridge(&self, host: &str, port: u16) -> BridgeConfig {
        let (bus2mqtt, mqtt2bus) = match self.topology {
            Topology::CommOnly => (
                vec![self.rule(POINTS_BUS, POINTS_MQTT)],
                vec![self.rule(POINTS_MQTT, ECHO_BUS)],
            ),
            _ => (
                vec![self.rule(POINTS_BUS, POINTS_MQTT)],
                vec![self.rule(OBJECTS_MQTT, OBJECTS_BUS)],
            ),
        };
        BridgeConfig {
            broker: self.endpoint(host, port),
            client_id: VEHICLE_ID.into(),
            bus2mqtt,
            mqtt2bus,
            single_sample: self.single_sample_mode,
            queue_size: DEFAULT_QUEUE_SIZE,
        }
    }

    /// Bridge configuration of the cloud host.
    pub fn cloud_bridge(&self, host: &str, port: u16) -> BridgeConfig {
        BridgeConfig {
            broker: self.endpoint(host, port),
            client_id: CLOUD_ID.into(),
            bus2mqtt: vec![self.rule(OBJECTS_BUS, OBJECTS_MQTT)],
            mqtt2bus: vec![self.rule(POINTS_MQTT, POINTS_BUS)],
            single_sample: self.single_sample_mode,
            queue_size: DEFAULT_QUEUE_SIZE,
        }
    }

    /// Topic the sink listens on.
    pub fn sink_topic(&self) -> &'static str {
        match self.topology {
            Topology::CommOnly => ECHO_BUS,
            _ => OBJECTS_BUS,
        }
    }
}

pub const BENCH_USER: &str = "admin";
pub const BENCH_PASS: &str = "password";

/// How a preset is executed.
#[derive(Debug, Clone, PartialEq)]
pub enum PresetPlan {
    Single(ScenarioConfig),
    /// Several labelled runs whose reports are compared.
    Series(Vec<(String, ScenarioConfig)>),
    Throughput {
        base: ScenarioConfig,
        rates: Vec<f64>,
        window_s: f64,
    },
}

pub const PRESETS: [&str; 9] = [
    "paper-bridged",
    "in-vehicle",
    "comm-only",
    "qos-sweep",
    "size-sweep",
    "format-compare",
    "tls-compare",
    "throughput-sweep",
    "loopback",
];

pub const THROUGHPUT_RATES: [f64; 15] = [
    20.0, 30.0, 40.0, 45.0, 50.0, 52.0, 53.0, 54.0, 55.0, 56.0, 57.0, 58.0, 60.0, 62.0, 64.0,
];

fn named(name: &str, cfg: ScenarioConfig) -> ScenarioConfig {
    ScenarioConfig {
        name: name.into(),
        ..cfg
    }
}

pub fn preset(name: &str) -> Result<PresetPlan, ScenarioError> {
    let base = ScenarioConfig::default();
    let plan = match name {
        "paper-bridged" => PresetPlan::Single(named(
            name,
            ScenarioConfig {
                mode: RunMode::Live,
                ..base
            },
        )),
        "in-vehicle" => PresetPlan::Single(named(
            name,
            ScenarioConfig {
                topology: Topology::InVehicle,
                shaper: ShaperConfig::default(),
                detector: DetectorSettings {
                    compute_delay_ms: 72.2,
                    ..Default::default()
                },
                ..base
            },
        )),
        "comm-only" => PresetPlan::Series(
            [("size-0", 0.0), ("size-100", 1.0)]
                .into_iter()
                .map(|(label, r)| {
                    (
                        label.to_string(),
                        named(
                            &format!("{name}/{label}"),
                            ScenarioConfig {
                                topology: Topology::CommOnly,
                                size_ratio: r,
                                ..base.clone()
                            },
                        ),
                    )
                })
                .collect(),
        ),
        "qos-sweep" => PresetPlan::Series(
            [
                QosLevel::AtMostOnce,
                QosLevel::AtLeastOnce,
                QosLevel::ExactlyOnce,
            ]
            .into_iter()
            .map(|q| {
                let label = format!("qos-{q}");
                (
                    label.clone(),
                    named(
                        &format!("{name}/{label}"),
                        ScenarioConfig {
                            qos: q,
                            ..base.clone()
                        },
                    ),
                )
            })
            .collect(),
        ),
        "size-sweep" => PresetPlan::Series(
            [0.0, 0.25, 0.5, 0.75, 1.0]
                .into_iter()
                .map(|r| {
                    let label = format!("size-{}", (r * 100.0) as u32);
                    let shaper = ShaperConfig {
                        bandwidth_cap: 1e7,
                        ..cellular_link()
                    };
                    (
                        label.clone(),
                        named(
                            &format!("{name}/{label}"),
                            ScenarioConfig {
                                size_ratio: r,
                                shaper,
                                ..base.clone()
                            },
                        ),
                    )
                })
                .collect(),
        ),
        "format-compare" => PresetPlan::Series(
            [
                ("compact", ScanFormat::Compact),
                ("expanded", ScanFormat::Expanded),
            ]
            .into_iter()
            .map(|(label, f)| {
                (
                    label.to_string(),
                    named(
                        &format!("{name}/{label}"),
                        ScenarioConfig {
                            format: f,
                            ..base.clone()
                        },
                    ),
                )
            })
            .collect(),
        ),
        "tls-compare" => {
            let plain = ScenarioConfig {
                mode: RunMode::Live,
                rate_hz: 20.0,
                sample_count: 200,
                shaper: ShaperConfig::default(),
                detector: DetectorSettings {
                    loop_through: true,
                    compute_delay_ms: 0.0,
                    ..Default::default()
                },
                ..base
            };
            let secure = ScenarioConfig {
                tls: true,
                auth: true,
                ..plain.clone()
            };
            PresetPlan::Series(vec![
                ("plain".into(), named(&format!("{name}/plain"), plain)),
                ("tls".into(), named(&format!("{name}/tls"), secure)),
            ])
        }
        "throughput-sweep" => PresetPlan::Throughput {
            base: named(
                name,
                ScenarioConfig {
                    shaper: ShaperConfig {
                        bandwidth_cap: 1e7,
                        ..cellular_link()
                    },
                    detector: DetectorSettings {
                        loop_through: true,
                        compute_delay_ms: 0.0,
                        ..Default::default()
                    },
                    single_sample_mode: true,
                    ..base
                },
            ),
            rates: THROUGHPUT_RATES.to_vec(),
            window_s: 20.0,
        },
        "loopback" => PresetPlan::Single(named(
            name,
            ScenarioConfig {
                mode: RunMode::Live,
                rate_hz: 20.0,
                shaper: ShaperConfig::default(),
                detector: DetectorSettings {
                    compute_delay_ms: 10.0,
                    ..Default::default()
                },
                ..base
            },
        )),
        other => return Err(ScenarioError::UnknownPreset(other.into())),
    };
    Ok(plan)
}

/// Applies `key=value` with a dotted key path, e.g. `shaper.one_way_delay_ms=19`.
/// The value is read as JSON when it parses, otherwise as a string.
pub fn apply_override(
    cfg: &ScenarioConfig,
    assignment: &str,
) -> Result<ScenarioConfig, ScenarioError> {
    let err = |reason: String| ScenarioError::Override {
        assignment: assignment.into(),
        reason,
    };
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| err("expected key=value".into()))?;
    let value: Value =
        serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().into()));
    let mut doc = serde_json::to_value(cfg).map_err(|e| err(e.to_string()))?;
    let mut slot = &mut doc;
    for part in key.trim().split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| err(format!("unknown key `{part}`")))?;
    }
    *slot = value;
    let out: ScenarioConfig = serde_json::from_value(doc).map_err(|e| err(e.to_string()))?;
    out.validate()?;
    Ok(out)
}

impl PresetPlan {
    /// Applies a config edit to every run of the plan.
    pub fn map_configs(
        self,
        mut f: impl FnMut(ScenarioConfig) -> Result<ScenarioConfig, ScenarioError>,
    ) -> Result<Self, ScenarioError> {
        Ok(match self {
            PresetPlan::Single(c) => PresetPlan::Single(f(c)?),
            PresetPlan::Series(runs) => PresetPlan::Series(
                runs.into_iter()
                    .map(|(l, c)| Ok((l, f(c)?)))
                    .collect::<Result<_, ScenarioError>>()?,
            ),
            PresetPlan::Throughput {
                base,
                rates,
                window_s,
            } => PresetPlan::Throughput {
                base: f(base)?,
                rates,
                window_s,
            },
        })
    }

    pub fn configs(&self) -> Vec<&ScenarioConfig> {
        match self {
            PresetPlan::Single(c) => vec![c],
            PresetPlan::Series(runs) => runs.iter().map(|(_, c)| c).collect(),
            PresetPlan::Throughput { base, .. } => vec![base],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_resolves_to_a_valid_config() {
        for name in PRESETS {
            let plan = preset(name).unwrap();
            for cfg in plan.configs() {
                cfg.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
            }
        }
        assert!(matches!(
            preset("nope"),
            Err(ScenarioError::UnknownPreset(_))
        ));
    }

    #[test]
    fn mean_one_way_of_cellular_link_is_19ms() {
        // full-size uplink frame and a small downlink frame
        let l = cellular_link();
        let up = l.one_way_delay_ms + 181_080.0 / l.bandwidth_cap * 1e3;
        let down = l.one_way_delay_ms + 200.0 / l.bandwidth_cap * 1e3;
        assert!(((up + down) / 2.0 - 19.0).abs() < 0.1, "{up} {down}");
    }

    #[test]
    fn overrides() {
        let cfg = ScenarioConfig::default();
        let c = apply_override(&cfg, "shaper.one_way_delay_ms=19").unwrap();
        assert_eq!(c.shaper.one_way_delay_ms, 19.0);
        let c = apply_override(&c, "qos=2").unwrap();
        assert_eq!(c.qos, QosLevel::ExactlyOnce);
        let c = apply_override(&c, "topology=comm_only").unwrap();
        assert_eq!(c.topology, Topology::CommOnly);
        assert!(apply_override(&c, "nope=1").is_err());
        assert!(apply_override(&c, "qos=3").is_err());
        assert!(apply_override(&c, "rate_hz=0").is_err());
        assert!(apply_override(&c, "rate_hz").is_err());
    }

    #[test]
    fn bridge_configs_follow_topology() {
        let cfg = ScenarioConfig {
            topology: Topology::CommOnly,
            ..Default::default()
        };
        let v = cfg.vehicle_bridge("localhost", 1883);
        assert_eq!(v.mqtt2bus[0].target_topic, ECHO_BUS);
        assert_eq!(cfg.sink_topic(), ECHO_BUS);
        let c = ScenarioConfig::default().cloud_bridge("localhost", 1883);
        assert_eq!(c.mqtt2bus[0].source_topic, POINTS_MQTT);
        assert_eq!(c.bus2mqtt[0].target_topic, OBJECTS_MQTT);
    }
}
