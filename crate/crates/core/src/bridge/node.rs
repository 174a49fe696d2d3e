//! A running bridge: one MQTT client plus bus subscriptions for every rule.

use std::sync::atomic::Ordering;
use std::sync::{Arc, Mutex};

use crate::bus::{LocalBus, SinkHandle};
use crate::client::{ClientError, ClientOptions, MqttClient};
use crate::trace::Clock;

use super::{Bridge, BridgeConfig, BridgeStatus};

/// Client options implied by a bridge config.
pub fn client_options(config: &BridgeConfig) -> ClientOptions {
    let b = &config.broker;
    let mut opts = ClientOptions::new(b.host.clone(), b.port, config.client_id.clone());
    opts.username = b.user.clone();
    opts.password = b.pass.clone();
    opts.tls = b.tls;
    opts.ca_cert = b.ca_cert.clone();
    opts
}

pub struct BridgeNode {
    bridge: Arc<Bridge>,
    client: MqttClient,
    sinks: Vec<SinkHandle>,
}

impl BridgeNode {
    /// Connects with options derived from `config`. Must run inside a tokio runtime.
    pub async fn start(
        config: BridgeConfig,
        bus: LocalBus,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, ClientError> {
        let opts = client_options(&config);
        let client = MqttClient::connect(opts).await?;
        Self::attach(config, bus, clock, client).await
    }

    /// Wires the rules of `config` to an already connected client.
    pub async fn attach(
        config: BridgeConfig,
        bus: LocalBus,
        clock: Arc<dyn Clock>,
        client: MqttClient,
    ) -> Result<Self, ClientError> {
        let bridge = Arc::new(Bridge::new(config, clock));
        let cfg = bridge.config().clone();

        for rule in cfg.mqtt2bus.iter().cloned() {
            let (b, bus) = (bridge.clone(), bus.clone());
            let source = rule.source_topic.clone();
            let qos = rule.qos;
            client
                .subscribe(&source, qos, move |p| {
                    if let Some(m) = b.bridge_mqtt_to_bus(&rule, &p.payload) {
                        bus.publish(m);
                    }
                })
                .await?;
        }

        let runtime = tokio::runtime::Handle::current();
        let gate = Arc::new(Mutex::new(()));
        let mut sinks = Vec::new();
        for rule in cfg.bus2mqtt.iter().cloned() {
            let (b, c, rt, gate) = (
                bridge.clone(),
                client.clone(),
                runtime.clone(),
                gate.clone(),
            );
            let single = cfg.single_sample;
            let source = rule.source_topic.clone();
            let handle = bus
                .subscribe_with(&source, cfg.ingress_queue(), move |msg| {
                    let _held = single.then(|| gate.lock().unwrap());
                    let out = b.bridge_bus_to_mqtt(&rule, &msg);
                    let pending = match c.publish(out.topic.as_str(), out.payload.clone(), out.qos)
                    {
                        Ok(h) => h,
                        Err(e) => {
                            tracing::warn!(error = %e, "bridge publish failed");
                            b.counters().drops.fetch_add(1, Ordering::Relaxed);
                            return;
                        }
                    };
                    let b = b.clone();
                    let finish = move |r: Result<(), _>| match r {
                        Ok(()) => b.publish_completed(&out),
                        Err(e) => {
                            tracing::debug!(error = %e, "publish not completed");
                            b.counters().drops.fetch_add(1, Ordering::Relaxed);
                        }
                    };
                    if single {
                        finish(pending.wait());
                    } else {
                        rt.spawn(async move { finish(pending.await) });
                    }
                })
                .expect("queue size validated");
            sinks.push(handle);
        }
        Ok(BridgeNode {
            bridge,
            client,
            sinks,
        })
    }

    pub fn bridge(&self) -> &Arc<Bridge> {
        &self.bridge
    }

    pub fn client(&self) -> &MqttClient {
        &self.client
    }

    pub fn status(&self) -> BridgeStatus {
        let counters = self.bridge.counters();
        counters
            .reconnects
            .store(self.client.reconnects(), Ordering::Relaxed);
        let drops: u64 = self.sinks.iter().map(SinkHandle::drops).sum();
        let mut s = self.bridge.status();
        s.drops += drops;
        s
    }

    /// Bus-side drops only.
    pub fn bus_drops(&self) -> u64 {
        self.sinks.iter().map(SinkHandle::drops).sum()
    }

    pub async fn shutdown(self) {
        drop(self.sinks);
        self.client.disconnect().await;
    }
}
