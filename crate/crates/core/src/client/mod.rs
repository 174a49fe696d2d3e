//! MQTT client: a sans-IO core plus a tokio driver.

mod core;
mod driver;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::RetransmitPolicy;
use crate::codec::TopicViolation;

pub use self::core::*;
pub use self::driver::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverflowPolicy {
    #[default]
    DropOldest,
    RejectNew,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReconnectPolicy {
    pub enabled: bool,
    pub backoff_initial_ms: u64,
    pub backoff_max_ms: u64,
}

impl Default for ReconnectPolicy {
    fn default() -> Self {
        ReconnectPolicy {
            enabled: true,
            backoff_initial_ms: 100,
            backoff_max_ms: 5000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClientOptions {
    pub broker_host: String,
    pub broker_port: u16,
    pub client_id: String,
    pub username: Option<String>,
    pub password: Option<String>,
    pub tls: bool,
    /// PEM file with the certificate(s) to trust when `tls` is set.
    pub ca_cert: Option<PathBuf>,
    pub keep_alive: u16,
    pub clean_session: bool,
    pub reconnect: ReconnectPolicy,
    pub outbound_buffer_limit: usize,
    pub overflow: OverflowPolicy,
    pub retransmit: RetransmitPolicy,
    pub qos2_release: Qos2Release,
}

impl ClientOptions {
    pub fn new(host: impl Into<String>, port: u16, client_id: impl Into<String>) -> Self {
        ClientOptions {
            broker_host: host.into(),
            broker_port: port,
            client_id: client_id.into(),
            username: None,
            password: None,
            tls: false,
            ca_cert: None,
            keep_alive: 30,
            clean_session: true,
            reconnect: ReconnectPolicy::default(),
            outbound_buffer_limit: 100,
            overflow: OverflowPolicy::default(),
            retransmit: RetransmitPolicy::default(),
            qos2_release: Qos2Release::default(),
        }
    }

    pub fn credentials(mut self, user: impl Into<String>, pass: impl Into<String>) -> Self {
        self.username = Some(user.into());
        self.password = Some(pass.into());
        self
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        if self.outbound_buffer_limit == 0 {
            return Err(ClientError::InvalidOptions(
                "outbound_buffer_limit must be >= 1",
            ));
        }
        if self.reconnect.backoff_initial_ms > self.reconnect.backoff_max_ms {
            return Err(ClientError::InvalidOptions(
                "backoff_initial must not exceed backoff_max",
            ));
        }
        Ok(())
    }

    pub fn core_options(&self) -> CoreOptions {
        CoreOptions {
            client_id: self.client_id.clone(),
            username: self.username.clone(),
            password: self.password.clone(),
            keep_alive: self.keep_alive,
            clean_session: self.clean_session,
            buffer_limit: self.outbound_buffer_limit,
            overflow: self.overflow,
            retransmit: self.retransmit,
            qos2_release: self.qos2_release,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ClientError {
    #[error("broker refused the connection (return code {0})")]
    AuthFailure(u8),
    #[error("invalid topic filter: {0}")]
    InvalidFilter(TopicViolation),
    #[error("invalid topic name: {0}")]
    InvalidTopic(TopicViolation),
    #[error("subscription to {0} refused")]
    SubscriptionRefused(String),
    #[error("invalid options: {0}")]
    InvalidOptions(&'static str),
    #[error("network: {0}")]
    Network(String),
    #[error("tls: {0}")]
    Tls(String),
    #[error("client is shut down")]
    Closed,
}

#[derive(Debug, Clone, Copy, Error, PartialEq, Eq)]
pub enum PublishError {
    #[error("outbound buffer full")]
    BufferOverflow,
    #[error("no acknowledgement after all retransmissions")]
    Timeout,
    #[error("client is shut down")]
    Closed,
}
