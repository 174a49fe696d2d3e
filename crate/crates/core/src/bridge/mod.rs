//! Bus/MQTT bridge: topic mapping, tracing envelopes and boundary timestamps.
//!
//! The functions here do no I/O. A driver feeds them bus messages or MQTT
//! payloads and performs the returned publish actions.

mod config;
mod envelope;
mod node;

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use bytes::Bytes;
use serde::Serialize;

use crate::bus::BusMessage;
use crate::codec::{QosLevel, TopicName};
use crate::trace::{Clock, ProbeKind, TracingBlock};

pub use config::*;
pub use envelope::*;
pub use node::*;

/// Type tag used on the bus for messages that arrive without an envelope.
pub const RAW_TYPE_TAG: &str = "raw";

#[derive(Debug, Default)]
pub struct BridgeCounters {
    pub msgs_in: AtomicU64,
    pub msgs_out: AtomicU64,
    pub drops: AtomicU64,
    pub decode_errors: AtomicU64,
    pub reconnects: AtomicU64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BridgeStatus {
    pub client_id: String,
    pub msgs_in: u64,
    pub msgs_out: u64,
    pub drops: u64,
    pub decode_errors: u64,
    pub reconnects: u64,
}

/// Publish-completion timestamps of traced samples, keyed by sample id.
/// Kept on the publishing host only.
#[derive(Debug, Clone, Default)]
pub struct AckLog(Arc<Mutex<HashMap<u64, u64>>>);

impl AckLog {
    pub fn record(&self, sample_id: u64, t_ns: u64) {
        self.0.lock().unwrap().insert(sample_id, t_ns);
    }

    pub fn get(&self, sample_id: u64) -> Option<u64> {
        self.0.lock().unwrap().get(&sample_id).copied()
    }

    pub fn len(&self) -> usize {
        self.0.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A message accepted by the bridge but not yet handed on.
#[derive(Debug, Clone)]
pub struct InFlight {
    pub trace: Option<TracingBlock>,
    pub type_tag: String,
    pub value: Bytes,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutboundPublish {
    pub topic: TopicName,
    pub qos: QosLevel,
    pub payload: Bytes,
    /// Set when a tracing block travelled with the message.
    pub sample_id: Option<u64>,
}

pub struct Bridge {
    config: BridgeConfig,
    clock: Arc<dyn Clock>,
    counters: Arc<BridgeCounters>,
    acks: AckLog,
}

impl Bridge {
    pub fn new(config: BridgeConfig, clock: Arc<dyn Clock>) -> Self {
        Bridge {
            config,
            clock,
            counters: Arc::default(),
            acks: AckLog::default(),
        }
    }

    pub fn config(&self) -> &BridgeConfig {
        &self.config
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn counters(&self) -> &Arc<BridgeCounters> {
        &self.counters
    }

    pub fn ack_log(&self) -> &AckLog {
        &self.acks
    }

    pub fn status(&self) -> BridgeStatus {
        let c = &self.counters;
        BridgeStatus {
            client_id: self.config.client_id.clone(),
            msgs_in: c.msgs_in.load(Ordering::Relaxed),
            msgs_out: c.msgs_out.load(Ordering::Relaxed),
            drops: c.drops.load(Ordering::Relaxed),
            decode_errors: c.decode_errors.load(Ordering::Relaxed),
            reconnects: c.reconnects.load(Ordering::Relaxed),
        }
    }

    fn stamp(&self, trace: &mut Option<TracingBlock>, kind: ProbeKind) {
        if let Some(t) = trace {
            t.push(kind, self.clock.now_ns(), self.clock.id());
        }
    }

    /// Accepts a bus message for `rule` and stamps `bridge_in`.
    pub fn bus_ingress(&self, rule: &BridgeRule, msg: &BusMessage) -> InFlight {
        self.counters.msgs_in.fetch_add(1, Ordering::Relaxed);
        let mut trace = if rule.inject_tracing {
            Some(
                msg.trace
                    .clone()
                    .unwrap_or_else(|| TracingBlock::new(msg.id.0)),
            )
        } else {
            None
        };
        self.stamp(&mut trace, ProbeKind::BridgeIn);
        InFlight {
            trace,
            type_tag: msg.type_tag.clone(),
            value: msg.payload.clone(),
        }
    }

    /// Stamps `bridge_out` and builds the MQTT publish. Call immediately before publishing.
    pub fn bus_egress(&self, rule: &BridgeRule, mut f: InFlight) -> OutboundPublish {
        let topic = TopicName::new(rule.target_topic.as_str()).expect("validated at config time");
        self.counters.msgs_out.fetch_add(1, Ordering::Relaxed);
        if !rule.inject_tracing {
            return OutboundPublish {
                topic,
                qos: rule.qos,
                payload: f.value,
                sample_id: None,
            };
        }
        self.stamp(&mut f.trace, ProbeKind::BridgeOut);
        let payload = encode_message_envelope(&f.type_tag, &f.value, f.trace.as_ref());
        OutboundPublish {
            topic,
            qos: rule.qos,
            payload,
            sample_id: f.trace.map(|t| t.sample_id),
        }
    }

    pub fn bridge_bus_to_mqtt(&self, rule: &BridgeRule, msg: &BusMessage) -> OutboundPublish {
        let f = self.bus_ingress(rule, msg);
        self.bus_egress(rule, f)
    }

    /// Records `bridge_ack` for a completed QoS>=1 publish.
    pub fn publish_completed(&self, publish: &OutboundPublish) {
        if let (Some(id), true) = (publish.sample_id, publish.qos > QosLevel::AtMostOnce) {
            self.acks.record(id, self.clock.now_ns());
        }
    }

    /// Decodes an MQTT payload for `rule` and stamps `bridge_in`. Malformed
    /// envelopes are counted and dropped.
    pub fn mqtt_ingress(&self, rule: &BridgeRule, payload: &Bytes) -> Option<InFlight> {
        self.counters.msgs_in.fetch_add(1, Ordering::Relaxed);
        if !rule.inject_tracing {
            return Some(InFlight {
                trace: None,
                type_tag: RAW_TYPE_TAG.into(),
                value: payload.clone(),
            });
        }
        let decoded = decode_envelope(payload).and_then(|env| {
            let (tag, value) = decode_bus_payload(&env.payload)?;
            Ok((env.tracing, tag, value))
        });
        match decoded {
            Ok((mut trace, type_tag, value)) => {
                self.stamp(&mut trace, ProbeKind::BridgeIn);
                Some(InFlight {
                    trace,
                    type_tag,
                    value,
                })
            }
            Err(e) => {
                tracing::debug!(error = %e, topic = %rule.source_topic, "dropping undecodable payload");
                self.counters.decode_errors.fetch_add(1, Ordering::Relaxed);
                None
            }
        }
    }

    /// Stamps `bridge_out` and builds the bus message for `rule.target_topic`.
    pub fn mqtt_egress(&self, rule: &BridgeRule, mut f: InFlight) -> BusMessage {
        self.stamp(&mut f.trace, ProbeKind::BridgeOut);
        self.counters.msgs_out.fetch_add(1, Ordering::Relaxed);
        let mut msg = BusMessage::new(rule.target_topic.clone(), f.type_tag, f.value);
        msg.trace = f.trace;
        msg
    }

    pub fn bridge_mqtt_to_bus(&self, rule: &BridgeRule, payload: &Bytes) -> Option<BusMessage> {
        self.mqtt_ingress(rule, payload)
            .map(|f| self.mqtt_egress(rule, f))
    }

    pub fn rule_for(&self, dir: Direction, source: &str) -> Option<&BridgeRule> {
        self.config
            .rules(dir)
            .iter()
            .find(|r| r.source_topic == source)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bus::LocalBus;
    use crate::trace::{ClockId, SimClock, VirtualTime};

    fn cfg(qos: u8, tracing: bool) -> BridgeConfig {
        let text = format!(
            "broker: {{host: h}}\nclient: {{id: vehicle}}\nbridge:\n  ros2mqtt:\n    - {{ros_topic: /ping, mqtt_topic: ping, qos: {qos}, inject_tracing: {tracing}}}\n  mqtt2ros:\n    - {{mqtt_topic: pong, ros_topic: /pong, inject_tracing: {tracing}}}\n"
        );
        parse_config(&text).unwrap()
    }

    fn pair(qos: u8, tracing: bool) -> (Bridge, Bridge, VirtualTime) {
        let time = VirtualTime::default();
        let v = Bridge::new(
            cfg(qos, tracing),
            Arc::new(SimClock::new(ClockId::VEHICLE, time.clone(), 0)),
        );
        let c = Bridge::new(
            cfg(qos, tracing),
            Arc::new(SimClock::new(ClockId::CLOUD, time.clone(), 5_000)),
        );
        (v, c, time)
    }

    #[test]
    fn ping_gets_two_probes() {
        let (v, _, time) = pair(0, true);
        let rule = v.config().bus2mqtt[0].clone();
        let msg = BusMessage::new("/ping", "std/String", Bytes::from_static(b"hello"))
            .with_trace(TracingBlock::new(7).with(ProbeKind::Source, 0, ClockId::VEHICLE));
        time.advance_to(100);
        let f = v.bus_ingress(&rule, &msg);
        time.advance_to(250);
        let out = v.bus_egress(&rule, f);
        assert_eq!(out.topic.as_str(), "ping");
        assert_eq!(out.sample_id, Some(7));
        let env = decode_envelope(&out.payload).unwrap();
        let probes = env.tracing.unwrap().probes;
        assert_eq!(probes.len(), 3);
        assert_eq!(
            (probes[1].kind(), probes[1].t_ns),
            (Some(ProbeKind::BridgeIn), 100)
        );
        assert_eq!(
            (probes[2].kind(), probes[2].t_ns),
            (Some(ProbeKind::BridgeOut), 250)
        );
        v.publish_completed(&out);
        assert!(v.ack_log().is_empty());
    }

    #[test]
    fn qos1_records_ack() {
        let (v, _, time) = pair(1, true);
        let rule = v.config().bus2mqtt[0].clone();
        let out = v.bridge_bus_to_mqtt(
            &rule,
            &BusMessage::new("/ping", "t", Bytes::from_static(b"x")),
        );
        time.advance_to(9_000);
        v.publish_completed(&out);
        assert_eq!(v.ack_log().get(out.sample_id.unwrap()), Some(9_000));
    }

    #[test]
    fn pong_path_byte_identical() {
        let (v, c, _) = pair(0, true);
        let body: Vec<u8> = (0..=255).collect();
        let msg = BusMessage::new("/ping", "custom/Type", body.clone());
        let up = v.bridge_bus_to_mqtt(&v.config().bus2mqtt[0], &msg);
        let rule = BridgeRule {
            source_topic: "ping".into(),
            target_topic: "/pong".into(),
            qos: QosLevel::AtMostOnce,
            inject_tracing: true,
        };
        let down = c.bridge_mqtt_to_bus(&rule, &up.payload).unwrap();
        assert_eq!(down.topic, "/pong");
        assert_eq!(down.type_tag, "custom/Type");
        assert_eq!(&down.payload[..], &body[..]);
        let probes = &down.trace.as_ref().unwrap().probes;
        assert_eq!(probes.len(), 4);
        assert!(probes[2..].iter().all(|p| p.clock() == ClockId::CLOUD));
    }

    #[test]
    fn passthrough_has_no_header() {
        let (v, c, _) = pair(0, false);
        let msg = BusMessage::new("/ping", "t", Bytes::from_static(b"raw!"));
        let up = v.bridge_bus_to_mqtt(&v.config().bus2mqtt[0], &msg);
        assert_eq!(&up.payload[..], b"raw!");
        assert_eq!(up.sample_id, None);
        let down = c
            .bridge_mqtt_to_bus(&c.config().mqtt2bus[0], &up.payload)
            .unwrap();
        assert_eq!(&down.payload[..], b"raw!");
        assert_eq!(down.type_tag, RAW_TYPE_TAG);
        assert!(down.trace.is_none());
    }

    #[test]
    fn malformed_counted_and_dropped() {
        let (_, c, _) = pair(0, true);
        let rule = c.config().mqtt2bus[0].clone();
        assert!(c
            .bridge_mqtt_to_bus(&rule, &Bytes::from_static(b"garbage"))
            .is_none());
        assert!(c
            .bridge_mqtt_to_bus(&rule, &Bytes::from_static(b"EVB1\x01"))
            .is_none());
        assert_eq!(c.status().decode_errors, 2);
    }

    #[test]
    fn sequential_samples_keep_order() {
        let (v, c, time) = pair(0, true);
        let bus = LocalBus::new();
        let sub = bus.subscribe("/pong", 1000).unwrap();
        let rule = c.config().mqtt2bus[0].clone();
        for i in 0..600u64 {
            time.advance_to(i * 1000);
            let msg = BusMessage::new("/ping", "n", i.to_be_bytes().to_vec()).with_trace(
                TracingBlock::new(i).with(ProbeKind::Source, i * 1000, ClockId::VEHICLE),
            );
            let up = v.bridge_bus_to_mqtt(&v.config().bus2mqtt[0], &msg);
            assert_eq!(
                bus.publish(c.bridge_mqtt_to_bus(&rule, &up.payload).unwrap()),
                1
            );
        }
        let got: Vec<u64> = std::iter::from_fn(|| sub.try_recv())
            .map(|m| {
                let probes = &m.trace.as_ref().unwrap().probes;
                for w in probes.windows(2).filter(|w| w[0].clock_id == w[1].clock_id) {
                    assert!(w[0].t_ns <= w[1].t_ns);
                }
                u64::from_be_bytes(m.payload[..].try_into().unwrap())
            })
            .collect();
        assert_eq!(got, (0..600).collect::<Vec<_>>());
        assert_eq!(v.status().msgs_out, 600);
    }
}
