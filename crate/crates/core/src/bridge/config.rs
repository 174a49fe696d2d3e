use std::collections::HashSet;
use std::path::PathBuf;

use serde::Deserialize;
use thiserror::Error;

use crate::codec::{QosLevel, TopicName};

pub const DEFAULT_PORT: u16 = 1883;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid rule {rule}: {reason}")]
    Validation { rule: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BrokerEndpoint {
    pub host: String,
    pub port: u16,
    pub user: Option<String>,
    pub pass: Option<String>,
    pub tls: bool,
    /// PEM certificate trusted for the broker when `tls` is set.
    pub ca_cert: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    BusToMqtt,
    MqttToBus,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BridgeRule {
    pub source_topic: String,
    pub target_topic: String,
    pub qos: QosLevel,
    pub inject_tracing: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BridgeConfig {
    pub broker: BrokerEndpoint,
    pub client_id: String,
    pub bus2mqtt: Vec<BridgeRule>,
    pub mqtt2bus: Vec<BridgeRule>,
    /// At most one sample in flight across all rules.
    pub single_sample: bool,
    pub queue_size: usize,
}

impl BridgeConfig {
    pub fn rules(&self, dir: Direction) -> &[BridgeRule] {
        match dir {
            Direction::BusToMqtt => &self.bus2mqtt,
            Direction::MqttToBus => &self.mqtt2bus,
        }
    }

    /// Bus queue depth in front of the bridge. Unbounded in single-sample
    /// mode, where waiting samples must not be dropped.
    pub fn ingress_queue(&self) -> usize {
        if self.single_sample {
            usize::MAX
        } else {
            self.queue_size
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    broker: RawBroker,
    client: RawClient,
    bridge: Option<RawBridge>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBroker {
    host: String,
    port: Option<u16>,
    user: Option<String>,
    pass: Option<String>,
    #[serde(default)]
    tls: bool,
    ca_cert: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawClient {
    id: String,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawBridge {
    #[serde(default, alias = "ros2mqtt")]
    bus2mqtt: Vec<RawRule>,
    #[serde(default, alias = "mqtt2ros")]
    mqtt2bus: Vec<RawRule>,
    #[serde(default)]
    single_sample: bool,
    queue_size: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRule {
    #[serde(alias = "ros_topic")]
    bus_topic: String,
    mqtt_topic: String,
    #[serde(default)]
    qos: u8,
    #[serde(default = "yes")]
    inject_tracing: bool,
}

fn yes() -> bool {
    true
}

pub const DEFAULT_QUEUE_SIZE: usize = 1000;

pub fn parse_config(text: &str) -> Result<BridgeConfig, ConfigError> {
    let raw: RawConfig = serde_yaml::from_str(text).map_err(|e| ConfigError::Parse {
        line: e.location().map_or(0, |l| l.line()),
        message: e.to_string(),
    })?;
    let bridge = raw.bridge.unwrap_or_default();
    if bridge.bus2mqtt.is_empty() && bridge.mqtt2bus.is_empty() {
        return Err(ConfigError::Validation {
            rule: "bridge".into(),
            reason: "no rules configured".into(),
        });
    }
    if raw.client.id.is_empty() {
        return Err(ConfigError::Validation {
            rule: "client.id".into(),
            reason: "empty client id".into(),
        });
    }
    let queue_size = bridge.queue_size.unwrap_or(DEFAULT_QUEUE_SIZE);
    if queue_size == 0 {
        return Err(ConfigError::Validation {
            rule: "bridge.queue_size".into(),
            reason: "must be at least 1".into(),
        });
    }
    let bus2mqtt = convert_rules(bridge.bus2mqtt, Direction::BusToMqtt)?;
    let mqtt2bus = convert_rules(bridge.mqtt2bus, Direction::MqttToBus)?;
    Ok(BridgeConfig {
        broker: BrokerEndpoint {
            host: raw.broker.host,
            port: raw.broker.port.unwrap_or(DEFAULT_PORT),
            user: raw.broker.user,
            pass: raw.broker.pass,
            tls: raw.broker.tls,
            ca_cert: raw.broker.ca_cert,
        },
        client_id: raw.client.id,
        bus2mqtt,
        mqtt2bus,
        single_sample: bridge.single_sample,
        queue_size,
    })
}

fn convert_rules(raw: Vec<RawRule>, dir: Direction) -> Result<Vec<BridgeRule>, ConfigError> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(raw.len());
    for r in raw {
        let name = format!("{} <-> {}", r.bus_topic, r.mqtt_topic);
        let fail = |reason: String| ConfigError::Validation {
            rule: name.clone(),
            reason,
        };
        validate_bus_topic(&r.bus_topic).map_err(|e| fail(e.into()))?;
        TopicName::new(r.mqtt_topic.as_str()).map_err(|e| fail(e.to_string()))?;
        let qos =
            QosLevel::from_u8(r.qos).map_err(|_| fail(format!("qos {} out of range", r.qos)))?;
        let (source, target) = match dir {
            Direction::BusToMqtt => (r.bus_topic, r.mqtt_topic),
            Direction::MqttToBus => (r.mqtt_topic, r.bus_topic),
        };
        if !seen.insert(source.clone()) {
            return Err(fail(format!("duplicate source topic {source}")));
        }
        out.push(BridgeRule {
            source_topic: source,
            target_topic: target,
            qos,
            inject_tracing: r.inject_tracing,
        });
    }
    Ok(out)
}

/// Bus topics are absolute slash-separated names without wildcards.
pub fn validate_bus_topic(t: &str) -> Result<(), &'static str> {
    if !t.starts_with('/') || t.len() < 2 {
        return Err("bus topic must start with '/' and be non-empty");
    }
    if t.chars()
        .any(|c| c.is_whitespace() || c == '+' || c == '#' || c == '\0')
    {
        return Err("bus topic contains an invalid character");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const VEHICLE: &str = "\
broker:
  host: cloud
  user: admin
  pass: password
client:
  id: vehicle
bridge:
  ros2mqtt:
    - ros_topic: /ping
      mqtt_topic: ping
  mqtt2ros:
    - mqtt_topic: pong
      ros_topic: /pong
";

    const CLOUD: &str = "\
broker:
  host: localhost
  user: admin
  pass: password
client:
  id: cloud
bridge:
  mqtt2ros:
    - mqtt_topic: ping
      ros_topic: /ping
  ros2mqtt:
    - ros_topic: /ping
      mqtt_topic: pong
";

    #[test]
    fn vehicle_config() {
        let c = parse_config(VEHICLE).unwrap();
        assert_eq!(c.broker.host, "cloud");
        assert_eq!(c.broker.port, 1883);
        assert!(!c.broker.tls);
        assert_eq!(c.broker.user.as_deref(), Some("admin"));
        assert_eq!(c.client_id, "vehicle");
        assert_eq!(c.bus2mqtt.len(), 1);
        assert_eq!(c.bus2mqtt[0].source_topic, "/ping");
        assert_eq!(c.bus2mqtt[0].target_topic, "ping");
        assert_eq!(c.bus2mqtt[0].qos, QosLevel::AtMostOnce);
        assert!(c.bus2mqtt[0].inject_tracing);
        assert_eq!(c.mqtt2bus.len(), 1);
        assert_eq!(c.mqtt2bus[0].source_topic, "pong");
        assert_eq!(c.mqtt2bus[0].target_topic, "/pong");
    }

    #[test]
    fn cloud_config() {
        let c = parse_config(CLOUD).unwrap();
        assert_eq!(c.client_id, "cloud");
        assert_eq!(
            (
                c.mqtt2bus[0].source_topic.as_str(),
                c.mqtt2bus[0].target_topic.as_str()
            ),
            ("ping", "/ping")
        );
        assert_eq!(
            (
                c.bus2mqtt[0].source_topic.as_str(),
                c.bus2mqtt[0].target_topic.as_str()
            ),
            ("/ping", "pong")
        );
    }

    #[test]
    fn canonical_keys_and_options() {
        let text = "broker: {host: h, port: 8883, tls: true}\nclient: {id: x}\nbridge:\n  bus2mqtt:\n    - {bus_topic: /a, mqtt_topic: a, qos: 2, inject_tracing: false}\n";
        let c = parse_config(text).unwrap();
        assert_eq!(c.broker.port, 8883);
        assert!(c.broker.tls);
        assert_eq!(c.bus2mqtt[0].qos, QosLevel::ExactlyOnce);
        assert!(!c.bus2mqtt[0].inject_tracing);
    }

    #[test]
    fn empty_bridge_rejected() {
        let e = parse_config("broker: {host: h}\nclient: {id: x}\nbridge: {}\n").unwrap_err();
        assert!(matches!(e, ConfigError::Validation { .. }));
        let e = parse_config("broker: {host: h}\nclient: {id: x}\n").unwrap_err();
        assert!(matches!(e, ConfigError::Validation { .. }));
    }

    #[test]
    fn parse_error_has_line() {
        let text = "broker:\n  host: h\nclient:\n  id: x\nbridge:\n  ros2mqtt:\n    - ros_topic: /a\n      mqtt_topic: [\n";
        match parse_config(text).unwrap_err() {
            ConfigError::Parse { line, .. } => assert!(line >= 8, "line {line}"),
            e => panic!("{e:?}"),
        }
        match parse_config("broker:\n  host: h\n  hots: 2\nclient: {id: x}\n").unwrap_err() {
            ConfigError::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn invalid_rules_named() {
        let bad_mqtt = "broker: {host: h}\nclient: {id: x}\nbridge:\n  ros2mqtt:\n    - {ros_topic: /a, mqtt_topic: a/+}\n";
        match parse_config(bad_mqtt).unwrap_err() {
            ConfigError::Validation { rule, .. } => assert!(rule.contains("a/+")),
            e => panic!("{e:?}"),
        }
        let dup = "broker: {host: h}\nclient: {id: x}\nbridge:\n  ros2mqtt:\n    - {ros_topic: /a, mqtt_topic: a}\n    - {ros_topic: /a, mqtt_topic: b}\n";
        assert!(matches!(
            parse_config(dup).unwrap_err(),
            ConfigError::Validation { .. }
        ));
        let bad_qos = "broker: {host: h}\nclient: {id: x}\nbridge:\n  mqtt2ros:\n    - {ros_topic: /a, mqtt_topic: a, qos: 3}\n";
        assert!(matches!(
            parse_config(bad_qos).unwrap_err(),
            ConfigError::Validation { .. }
        ));
        let bad_bus = "broker: {host: h}\nclient: {id: x}\nbridge:\n  mqtt2ros:\n    - {ros_topic: a, mqtt_topic: a}\n";
        assert!(matches!(
            parse_config(bad_bus).unwrap_err(),
            ConfigError::Validation { .. }
        ));
    }
}
