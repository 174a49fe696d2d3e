//! Live runner: a real broker, bridges and detector on loopback sockets,
//! with the vehicle link shaped by the broker.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use super::breakdown::{records_from_trace, Topology};
use super::pipeline::{convert, prepare_payload};
use super::scenario::{
    DetectorSettings, ScenarioConfig, BENCH_PASS, BENCH_USER, OBJECTS_BUS, POINTS_BUS, VEHICLE_ID,
};
use super::{RunRecords, ScenarioError};
use crate::bridge::{client_options, BridgeConfig, BridgeNode, DEFAULT_QUEUE_SIZE};
use crate::broker::{BrokerConfig, BrokerServer, ListenerConfig, TlsListenerConfig, UserEntry};
use crate::bus::{BusError, BusMessage, LocalBus, SinkHandle};
use crate::client::MqttClient;
use crate::scanmodel::{detect, OBJECTS_TYPE_TAG};
use crate::tls::{client_config, self_signed, server_config};
use crate::trace::{Clock, ClockId, HostClock, ProbeKind, TracingBlock};

const HOST: &str = "127.0.0.1";
const SETTLE: Duration = Duration::from_millis(200);
const DRAIN: Duration = Duration::from_secs(10);

pub fn run_live(cfg: &ScenarioConfig) -> Result<RunRecords, ScenarioError> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()?;
    rt.block_on(run(cfg))
}

fn aborted(what: &str) -> impl Fn(&dyn std::fmt::Display) -> ScenarioError + '_ {
    move |e| ScenarioError::Aborted(format!("{what}: {e}"))
}

#[derive(Default)]
struct Collected {
    traces: Vec<Option<TracingBlock>>,
    completed_at: Vec<Option<u64>>,
}

struct Endpoint {
    port: u16,
    tls: Option<Arc<rustls::ClientConfig>>,
}

async fn start_broker(cfg: &ScenarioConfig) -> Result<(BrokerServer, Endpoint), ScenarioError> {
    let mut bc = BrokerConfig {
        listener: ListenerConfig {
            host: HOST.into(),
            port: 0,
        },
        shapers: BTreeMap::from([(VEHICLE_ID.to_string(), cfg.shaper.clone())]),
        qos2_routing: cfg.qos2_routing,
        ..Default::default()
    };
    if cfg.auth {
        bc.auth.push(UserEntry {
            username: BENCH_USER.into(),
            password: Some(BENCH_PASS.into()),
            salt: None,
            password_hash: None,
        });
    }
    let (server_tls, client_tls) = if cfg.tls {
        let cert = self_signed(&["localhost", HOST]).map_err(|e| aborted("certificate")(&e))?;
        // key material is handed over in memory, the paths stay unused
        bc.tls = Some(TlsListenerConfig {
            host: HOST.into(),
            port: 0,
            cert: PathBuf::new(),
            key: PathBuf::new(),
        });
        (
            Some(server_config(&cert.cert_pem, &cert.key_pem).map_err(|e| aborted("tls")(&e))?),
            Some(client_config(&cert.cert_pem).map_err(|e| aborted("tls")(&e))?),
        )
    } else {
        (None, None)
    };
    let server = BrokerServer::start_with_tls(&bc, server_tls)
        .await
        .map_err(|e| aborted("broker")(&e))?;
    let port = match server.tls_addr() {
        Some(a) => a.port(),
        None => server.local_addr().port(),
    };
    Ok((
        server,
        Endpoint {
            port,
            tls: client_tls,
        },
    ))
}

async fn start_node(
    cfg: &ScenarioConfig,
    bridge: BridgeConfig,
    bus: LocalBus,
    clock: Arc<dyn Clock>,
    ep: &Endpoint,
) -> Result<BridgeNode, ScenarioError> {
    let mut opts = client_options(&bridge);
    opts.keep_alive = cfg.keep_alive_s;
    opts.qos2_release = cfg.qos2_release;
    let who = bridge.client_id.clone();
    let client = MqttClient::connect_with(opts, ep.tls.clone())
        .await
        .map_err(|e| aborted(&who)(&e))?;
    BridgeNode::attach(bridge, bus, clock, client)
        .await
        .map_err(|e| aborted(&who)(&e))
}

/// Converts and clusters `/points` and publishes `/objects` on the same bus,
/// stamping the detector probes on `clock`. Runs on its own thread.
pub fn spawn_detector(
    settings: &DetectorSettings,
    bus: &LocalBus,
    clock: Arc<dyn Clock>,
) -> Result<SinkHandle, BusError> {
    let out = bus.clone();
    let loop_through = settings.loop_through;
    let dcfg = settings.detector_config();
    bus.subscribe_with(POINTS_BUS, DEFAULT_QUEUE_SIZE, move |msg| {
        let Some(mut trace) = msg.trace.clone() else {
            return;
        };
        let reply = if loop_through {
            let t = clock.now_ns();
            trace.push(ProbeKind::DetectIn, t, clock.id());
            trace.push(ProbeKind::DetectOut, t, clock.id());
            BusMessage::new(OBJECTS_BUS, msg.type_tag.clone(), msg.payload.clone())
        } else {
            let cloud = match convert(&msg.type_tag, &msg.payload) {
                Ok((cloud, _)) => cloud,
                Err(e) => {
                    tracing::warn!(error = %e, "detector skipped a sample");
                    return;
                }
            };
            trace.push(ProbeKind::DetectIn, clock.now_ns(), clock.id());
            let objects = detect(&cloud, &dcfg);
            trace.push(ProbeKind::DetectOut, clock.now_ns(), clock.id());
            BusMessage::new(OBJECTS_BUS, OBJECTS_TYPE_TAG, objects.to_bytes())
        };
        out.publish(reply.with_trace(trace));
    })
}

fn start_detector(
    cfg: &ScenarioConfig,
    bus: &LocalBus,
    clock: Arc<dyn Clock>,
) -> Result<SinkHandle, ScenarioError> {
    spawn_detector(&cfg.detector, bus, clock).map_err(|e| aborted("detector")(&e))
}

async fn run(cfg: &ScenarioConfig) -> Result<RunRecords, ScenarioError> {
    let origin = Instant::now();
    let veh_clock: Arc<dyn Clock> = Arc::new(HostClock::new(ClockId::VEHICLE, origin, 0));
    let cloud_clock: Arc<dyn Clock> = Arc::new(HostClock::new(
        ClockId::CLOUD,
        origin,
        cfg.cloud_offset_ns(),
    ));
    let veh_bus = LocalBus::new();
    let cloud_bus = LocalBus::new();
    let n = cfg.sample_count;

    let collected = Arc::new(Mutex::new(Collected {
        traces: vec![None; n],
        completed_at: vec![None; n],
    }));
    let arrived = Arc::new(AtomicUsize::new(0));
    let sink = {
        let (collected, arrived, clock) = (collected.clone(), arrived.clone(), veh_clock.clone());
        veh_bus
            .subscribe_with(cfg.sink_topic(), DEFAULT_QUEUE_SIZE, move |msg| {
                let Some(mut trace) = msg.trace.clone() else {
                    return;
                };
                let t = clock.now_ns();
                trace.push(ProbeKind::Sink, t, clock.id());
                let id = trace.sample_id as usize;
                let mut c = collected.lock().unwrap();
                if id < c.traces.len() && c.traces[id].is_none() {
                    c.traces[id] = Some(trace);
                    c.completed_at[id] = Some(t);
                    arrived.fetch_add(1, Ordering::Relaxed);
                }
            })
            .map_err(|e| aborted("sink")(&e))?
    };

    let mut workers = vec![sink];
    let mut nodes = Vec::new();
    let mut broker = None;
    match cfg.topology {
        Topology::InVehicle => workers.push(start_detector(cfg, &veh_bus, veh_clock.clone())?),
        Topology::Bridged | Topology::CommOnly => {
            let (server, ep) = start_broker(cfg).await?;
            if cfg.topology == Topology::Bridged {
                workers.push(start_detector(cfg, &cloud_bus, cloud_clock.clone())?);
                let cloud = cfg.cloud_bridge(HOST, ep.port);
                nodes.push(
                    start_node(cfg, cloud, cloud_bus.clone(), cloud_clock.clone(), &ep).await?,
                );
            }
            let vehicle = cfg.vehicle_bridge(HOST, ep.port);
            nodes.insert(
                0,
                start_node(cfg, vehicle, veh_bus.clone(), veh_clock.clone(), &ep).await?,
            );
            broker = Some(server);
        }
    }
    tokio::time::sleep(SETTLE).await;

    let payload = prepare_payload(cfg);
    let period = Duration::from_nanos(cfg.period_ns());
    let start = tokio::time::Instant::now();
    let mut published_at = vec![0; n];
    for (k, slot) in published_at.iter_mut().enumerate() {
        tokio::time::sleep_until(start + period * k as u32).await;
        let t = veh_clock.now_ns();
        *slot = t;
        let trace = TracingBlock::new(k as u64).with(ProbeKind::Source, t, ClockId::VEHICLE);
        veh_bus.publish(
            BusMessage::new(POINTS_BUS, payload.type_tag, payload.value.clone()).with_trace(trace),
        );
    }
    let give_up = tokio::time::Instant::now() + DRAIN;
    while arrived.load(Ordering::Relaxed) < n && tokio::time::Instant::now() < give_up {
        tokio::time::sleep(Duration::from_millis(20)).await;
    }

    let bus_drops = workers.iter().map(SinkHandle::drops).sum::<u64>()
        + nodes.iter().map(BridgeNode::bus_drops).sum::<u64>();
    let acks = nodes.first().map(|v| v.bridge().ack_log().clone());
    drop(workers);
    for node in nodes {
        node.shutdown().await;
    }
    drop(broker);

    let c = std::mem::take(&mut *collected.lock().unwrap());
    let mut out = RunRecords {
        published_at,
        completed_at: c.completed_at,
        bus_drops,
        ..Default::default()
    };
    for (id, trace) in c.traces.into_iter().enumerate() {
        let id = id as u64;
        match trace {
            Some(t) => out.samples.push((
                id,
                records_from_trace(&t, acks.as_ref().and_then(|a| a.get(id))),
            )),
            None => out.lost.push(id),
        }
    }
    Ok(out)
}
