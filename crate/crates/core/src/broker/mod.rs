//! MQTT broker with per-client link emulation.

mod auth;
mod core;
mod server;
mod shaper;

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::Deserialize;
use thiserror::Error;

pub use self::auth::*;
pub use self::core::*;
pub use self::server::*;
pub use self::shaper::*;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ListenerConfig {
    #[serde(default = "default_host")]
    pub host: String,
    #[serde(default = "default_port")]
    pub port: u16,
}

impl Default for ListenerConfig {
    fn default() -> Self {
        ListenerConfig {
            host: default_host(),
            port: default_port(),
        }
    }
}

fn default_host() -> String {
    "0.0.0.0".into()
}

fn default_port() -> u16 {
    1883
}

fn default_tls_port() -> u16 {
    8883
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TlsListenerConfig {
    #[serde(default = "default_host")]
    pub host: String,
    #[serde(default = "default_tls_port")]
    pub port: u16,
    pub cert: PathBuf,
    pub key: PathBuf,
}

/// Either a plaintext password (hashed at load) or a stored salt/hash pair.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserEntry {
    pub username: String,
    pub password: Option<String>,
    pub salt: Option<String>,
    pub password_hash: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrokerConfig {
    #[serde(default)]
    pub listener: ListenerConfig,
    pub tls: Option<TlsListenerConfig>,
    #[serde(default)]
    pub auth: Vec<UserEntry>,
    /// Link emulation keyed by client id.
    #[serde(default)]
    pub shapers: BTreeMap<String, ShaperConfig>,
    /// JSON-lines packet log.
    pub log: Option<PathBuf>,
    #[serde(default)]
    pub qos2_routing: Qos2Routing,
    #[serde(default)]
    pub retransmit: RetransmitPolicy,
}

#[derive(Debug, Error)]
pub enum BrokerConfigError {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl BrokerConfig {
    pub fn parse(text: &str) -> Result<Self, BrokerConfigError> {
        let cfg: BrokerConfig =
            serde_yaml::from_str(text).map_err(|e| BrokerConfigError::Parse {
                line: e.location().map_or(0, |l| l.line()),
                message: e.to_string(),
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), BrokerConfigError> {
        for (id, s) in &self.shapers {
            s.validate()
                .map_err(|e| BrokerConfigError::Invalid(format!("shaper for {id}: {e}")))?;
        }
        if self.tls.is_some() && self.auth.is_empty() {
            return Err(BrokerConfigError::Invalid(
                "the TLS listener requires at least one auth user".into(),
            ));
        }
        self.registry().map(|_| ())
    }

    pub fn registry(&self) -> Result<Option<AuthRegistry>, BrokerConfigError> {
        if self.auth.is_empty() {
            return Ok(None);
        }
        let mut reg = AuthRegistry::default();
        for u in &self.auth {
            let c = match (&u.password, &u.salt, &u.password_hash) {
                (Some(p), None, None) => Credentials::new(u.username.clone(), p.as_bytes()),
                (None, Some(s), Some(h)) => Credentials::from_hex(u.username.clone(), s, h)
                    .map_err(|e| BrokerConfigError::Invalid(format!("user {}: {e}", u.username)))?,
                _ => {
                    return Err(BrokerConfigError::Invalid(format!(
                        "user {}: give either password or salt + password_hash",
                        u.username
                    )))
                }
            };
            reg.add(c);
        }
        Ok(Some(reg))
    }

    pub fn options(&self) -> Result<BrokerOptions, BrokerConfigError> {
        Ok(BrokerOptions {
            auth: self.registry()?,
            retransmit: self.retransmit,
            qos2_routing: self.qos2_routing,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_config() {
        let text = "\
listener: {port: 1884}
tls: {port: 8884, cert: c.pem, key: k.pem}
auth:
  - {username: admin, password: password}
shapers:
  vehicle: {one_way_delay_ms: 19.0, jitter_stddev_ms: 1.0, seed: 7}
log: broker.jsonl
qos2_routing: on_publish
";
        let c = BrokerConfig::parse(text).unwrap();
        assert_eq!(c.listener.port, 1884);
        assert_eq!(c.listener.host, "0.0.0.0");
        assert_eq!(c.tls.as_ref().unwrap().port, 8884);
        assert_eq!(c.shapers["vehicle"].one_way_delay_ms, 19.0);
        assert_eq!(c.qos2_routing, Qos2Routing::OnPublish);
        let reg = c.registry().unwrap().unwrap();
        assert_eq!(
            reg.check(Some("admin"), Some(b"password")),
            AuthOutcome::Accepted
        );
    }

    #[test]
    fn defaults_and_errors() {
        let c = BrokerConfig::parse("{}").unwrap();
        assert_eq!(c.listener.port, 1883);
        assert!(c.registry().unwrap().is_none());
        assert!(matches!(
            BrokerConfig::parse("listener:\n  prot: 1\n"),
            Err(BrokerConfigError::Parse { line: 2, .. })
        ));
        assert!(BrokerConfig::parse("tls: {cert: a, key: b}\n").is_err());
        assert!(BrokerConfig::parse("shapers:\n  v: {one_way_delay_ms: -1}\n").is_err());
        assert!(BrokerConfig::parse("auth:\n  - {username: a}\n").is_err());
    }
}
