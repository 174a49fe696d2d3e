//! Deterministic discrete-event run of a scenario on virtual time.
//!
//! The broker, both MQTT clients and both bridges are the real state machines;
//! only their service times come from [`SimCosts`](super::SimCosts). Each
//! bridge direction, the detector, the broker and each client's transmit path
//! is a single FIFO server.

use std::cmp::Ordering;
use std::collections::hash_map::DefaultHasher;
use std::collections::{BinaryHeap, HashMap, VecDeque};
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use bytes::Bytes;

use super::breakdown::{records_from_trace, ProbeRecord, Topology};
use super::pipeline::{convert, objects_of, prepare_payload, SamplePayload};
use super::scenario::{ScenarioConfig, POINTS_BUS};
use super::ScenarioError;
use crate::bridge::{Bridge, BridgeRule, Direction, InFlight, OutboundPublish};
use crate::broker::{
    BrokerAction, BrokerCore, BrokerOptions, ConnId, FrameKind, LinkShaper, RetransmitPolicy,
    ShapeDecision, ShaperConfig,
};
use crate::bus::BusMessage;
use crate::client::{ClientCore, ClientEvent, CoreOptions, OverflowPolicy, PublishToken};
use crate::codec::{encoded_len, ControlPacket};
use crate::scanmodel::OBJECTS_TYPE_TAG;
use crate::trace::{Clock, ClockId, ProbeKind, SimClock, TracingBlock, VirtualTime};

/// Virtual time before the first sample, for connection set-up.
const WARMUP_NS: u64 = 500_000_000;
/// How long the run continues after the last publish before giving up on
/// outstanding samples.
const DRAIN_NS: u64 = 30_000_000_000;

/// Traces collected by a simulated or live run.
#[derive(Debug, Clone, Default)]
pub struct RunRecords {
    /// Stage records of every sample that reached the sink, by sample id.
    pub samples: Vec<(u64, Vec<ProbeRecord>)>,
    /// Sample ids that never reached the sink.
    pub lost: Vec<u64>,
    /// Source publish instant per sample id (vehicle clock, ns).
    pub published_at: Vec<u64>,
    /// Sink arrival instant per sample id, when it arrived.
    pub completed_at: Vec<Option<u64>>,
    pub bus_drops: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Comp {
    VehUp,
    VehDown,
    CloudIn,
    CloudOut,
    Detector,
    Sink,
}

const VEH: ConnId = 1;
const CLOUD: ConnId = 2;

enum Work {
    Bus(BusMessage),
    Mqtt(Bytes),
}

enum Held {
    Bridge(BridgeRule, InFlight, Direction),
    Detect(TracingBlock, String, Bytes, u64),
}

enum Ev {
    Source(u64),
    BusArrive(Comp, BusMessage),
    /// Finished the current stage of the component.
    Stage(Comp),
    ToBroker(ConnId, ControlPacket),
    BrokerRun(ConnId, ControlPacket),
    ToClient(ConnId, ControlPacket),
    ClientApp(ConnId, Vec<ClientEvent>),
    Tick,
}

struct Scheduled {
    t: u64,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Scheduled {
    fn eq(&self, o: &Self) -> bool {
        (self.t, self.seq) == (o.t, o.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, o: &Self) -> Ordering {
        (o.t, o.seq).cmp(&(self.t, self.seq))
    }
}

#[derive(Default)]
struct Station {
    inbox: VecDeque<Work>,
    cap: usize,
    busy: bool,
    blocked: Option<PublishToken>,
    held: Option<Held>,
    drops: u64,
}

struct Link {
    shaper: LinkShaper,
    client: ClientCore,
    tx_free: u64,
}

struct Sim<'a> {
    cfg: &'a ScenarioConfig,
    time: VirtualTime,
    now: u64,
    seq: u64,
    queue: BinaryHeap<Scheduled>,
    stations: HashMap<Comp, Station>,
    veh_bridge: Bridge,
    cloud_bridge: Bridge,
    veh_clock: SimClock,
    cloud_clock: SimClock,
    broker: BrokerCore,
    broker_free: u64,
    links: HashMap<ConnId, Link>,
    pending: HashMap<(ConnId, PublishToken), (Comp, OutboundPublish)>,
    next_tick: Option<u64>,
    payload: SamplePayload,
    detector_memo: HashMap<(String, u64), (String, Bytes, usize)>,
    sink_traces: Vec<Option<TracingBlock>>,
    completed_at: Vec<Option<u64>>,
    published_at: Vec<u64>,
    completed: usize,
    error: Option<ScenarioError>,
}

fn us(v: f64) -> u64 {
    (v * 1e3).round() as u64
}

fn hash_bytes(b: &[u8]) -> u64 {
    let mut h = DefaultHasher::new();
    b.hash(&mut h);
    h.finish()
}

pub fn simulate(cfg: &ScenarioConfig) -> Result<RunRecords, ScenarioError> {
    cfg.validate()?;
    let time = VirtualTime::default();
    let veh_clock = SimClock::new(ClockId::VEHICLE, time.clone(), 0);
    let cloud_clock = SimClock::new(ClockId::CLOUD, time.clone(), cfg.cloud_offset_ns());
    let veh_bridge = Bridge::new(cfg.vehicle_bridge("sim", 0), Arc::new(veh_clock.clone()));
    let cloud_bridge = Bridge::new(cfg.cloud_bridge("sim", 0), Arc::new(cloud_clock.clone()));
    let broker = BrokerCore::new(BrokerOptions {
        auth: None,
        retransmit: RetransmitPolicy::default(),
        qos2_routing: cfg.qos2_routing,
    });
    let mut stations = HashMap::new();
    for c in [
        Comp::VehUp,
        Comp::VehDown,
        Comp::CloudIn,
        Comp::CloudOut,
        Comp::Detector,
        Comp::Sink,
    ] {
        stations.insert(
            c,
            Station {
                cap: veh_bridge.config().ingress_queue(),
                ..Default::default()
            },
        );
    }
    let n = cfg.sample_count;
    let mut sim = Sim {
        cfg,
        time,
        now: 0,
        seq: 0,
        queue: BinaryHeap::new(),
        stations,
        veh_bridge,
        cloud_bridge,
        veh_clock,
        cloud_clock,
        broker,
        broker_free: 0,
        links: HashMap::new(),
        pending: HashMap::new(),
        next_tick: None,
        payload: prepare_payload(cfg),
        detector_memo: HashMap::new(),
        sink_traces: vec![None; n],
        completed_at: vec![None; n],
        published_at: vec![0; n],
        completed: 0,
        error: None,
    };
    sim.run()?;
    let mut out = RunRecords {
        published_at: sim.published_at,
        completed_at: sim.completed_at,
        ..Default::default()
    };
    out.bus_drops = sim.stations.values().map(|s| s.drops).sum();
    let acks = sim.veh_bridge.ack_log();
    for (id, trace) in sim.sink_traces.into_iter().enumerate() {
        match trace {
            Some(t) => out
                .samples
                .push((id as u64, records_from_trace(&t, acks.get(id as u64)))),
            None => out.lost.push(id as u64),
        }
    }
    Ok(out)
}

impl Sim<'_> {
    fn at(&mut self, t: u64, ev: Ev) {
        self.seq += 1;
        self.queue.push(Scheduled {
            t,
            seq: self.seq,
            ev,
        });
    }

    fn fail(&mut self, e: ScenarioError) {
        if self.error.is_none() {
            self.error = Some(e);
        }
    }

    fn client_options(&self, id: &str) -> CoreOptions {
        CoreOptions {
            client_id: id.into(),
            username: None,
            password: None,
            keep_alive: self.cfg.keep_alive_s,
            clean_session: true,
            buffer_limit: 100,
            overflow: OverflowPolicy::DropOldest,
            retransmit: RetransmitPolicy::default(),
            qos2_release: self.cfg.qos2_release,
        }
    }

    fn setup(&mut self) -> Result<(), ScenarioError> {
        if self.cfg.topology == Topology::InVehicle {
            return Ok(());
        }
        let shaper =
            |c: ShaperConfig| LinkShaper::new(c).map_err(|e| ScenarioError::Config(e.to_string()));
        let cloud_link = ShaperConfig {
            one_way_delay_ms: self.cfg.cost.cloud_link_delay_ms,
            seed: self.cfg.shaper.seed,
            ..Default::default()
        };
        let mut conns = vec![(
            VEH,
            self.veh_bridge.config().clone(),
            shaper(self.cfg.shaper.clone())?,
        )];
        if self.cfg.topology == Topology::Bridged {
            conns.push((
                CLOUD,
                self.cloud_bridge.config().clone(),
                shaper(cloud_link)?,
            ));
        }
        for (conn, bridge_cfg, shaper) in conns {
            let client = ClientCore::new(self.client_options(&bridge_cfg.client_id));
            self.links.insert(
                conn,
                Link {
                    shaper,
                    client,
                    tx_free: 0,
                },
            );
            self.broker.on_connection(conn, 0);
            let link = self.links.get_mut(&conn).unwrap();
            let mut evs = link.client.on_transport_up(0);
            for rule in &bridge_cfg.mqtt2bus {
                let (_, more) = link
                    .client
                    .subscribe(0, &rule.source_topic, rule.qos)
                    .map_err(|e| ScenarioError::Config(e.to_string()))?;
                evs.extend(more);
            }
            self.client_events(conn, evs);
        }
        Ok(())
    }

    fn run(&mut self) -> Result<(), ScenarioError> {
        self.setup()?;
        let period = self.cfg.period_ns();
        for k in 0..self.cfg.sample_count as u64 {
            self.at(WARMUP_NS + k * period, Ev::Source(k));
        }
        let last_publish = WARMUP_NS + (self.cfg.sample_count as u64 - 1) * period;
        while let Some(Scheduled { t, ev, .. }) = self.queue.pop() {
            if self.completed == self.cfg.sample_count || t > last_publish + DRAIN_NS {
                break;
            }
            self.now = t;
            self.time.advance_to(t);
            self.handle(ev);
            if let Some(e) = self.error.take() {
                return Err(e);
            }
            self.schedule_tick();
        }
        Ok(())
    }

    fn schedule_tick(&mut self) {
        let next = self
            .links
            .values()
            .filter_map(|l| l.client.next_deadline())
            .chain(self.broker.next_deadline())
            .min();
        if let Some(d) = next {
            if self.next_tick.is_none_or(|t| d < t) {
                self.next_tick = Some(d);
                self.at(d.max(self.now), Ev::Tick);
            }
        }
    }

    fn handle(&mut self, ev: Ev) {
        match ev {
            Ev::Source(k) => self.source(k),
            Ev::BusArrive(c, msg) => self.enqueue(c, Work::Bus(msg)),
            Ev::Stage(c) => self.stage_done(c),
            Ev::ToBroker(conn, p) => {
                let start = self.now.max(self.broker_free);
                self.broker_free = start + us(self.cfg.cost.broker_us_per_packet);
                let t = self.broker_free;
                self.at(t, Ev::BrokerRun(conn, p));
            }
            Ev::BrokerRun(conn, p) => {
                let actions = self.broker.handle_packet(conn, self.now, p);
                self.broker_actions(actions);
            }
            Ev::ToClient(conn, p) => {
                let evs = self
                    .links
                    .get_mut(&conn)
                    .unwrap()
                    .client
                    .handle(self.now, p);
                self.client_events(conn, evs);
            }
            Ev::ClientApp(conn, evs) => self.client_app(conn, evs),
            Ev::Tick => {
                if self.next_tick.is_some_and(|t| t <= self.now) {
                    self.next_tick = None;
                }
                let actions = self.broker.tick(self.now);
                self.broker_actions(actions);
                for conn in [VEH, CLOUD] {
                    if let Some(link) = self.links.get_mut(&conn) {
                        let evs = link.client.tick(self.now);
                        self.client_events(conn, evs);
                    }
                }
            }
        }
    }

    fn source(&mut self, k: u64) {
        let t = self.veh_clock.now_ns();
        self.published_at[k as usize] = t;
        let trace = TracingBlock::new(k).with(ProbeKind::Source, t, ClockId::VEHICLE);
        let msg = BusMessage::new(
            POINTS_BUS,
            self.payload.type_tag,
            self.payload.value.clone(),
        )
        .with_trace(trace);
        let target = if self.cfg.topology == Topology::InVehicle {
            Comp::Detector
        } else {
            Comp::VehUp
        };
        self.bus_hop(target, msg);
    }

    fn bus_hop(&mut self, target: Comp, msg: BusMessage) {
        let t = self.now + us(self.cfg.cost.bus_hop_us);
        self.at(t, Ev::BusArrive(target, msg));
    }

    fn enqueue(&mut self, c: Comp, w: Work) {
        if c == Comp::Sink {
            if let Work::Bus(msg) = w {
                self.sink(msg);
            }
            return;
        }
        let st = self.stations.get_mut(&c).unwrap();
        if st.inbox.len() >= st.cap {
            st.inbox.pop_front();
            st.drops += 1;
        }
        st.inbox.push_back(w);
        self.try_start(c);
    }

    fn bridge_cost(&self, bytes: usize) -> u64 {
        us(self.cfg.cost.bridge_base_us)
            + (self.cfg.cost.bridge_ns_per_byte * bytes as f64).round() as u64
    }

    fn try_start(&mut self, c: Comp) {
        let st = self.stations.get_mut(&c).unwrap();
        if st.busy || st.blocked.is_some() {
            return;
        }
        let Some(work) = st.inbox.pop_front() else {
            return;
        };
        st.busy = true;
        let (held, duration) = match (c, work) {
            (Comp::VehUp | Comp::CloudOut, Work::Bus(msg)) => {
                let bridge = if c == Comp::VehUp {
                    &self.veh_bridge
                } else {
                    &self.cloud_bridge
                };
                let rule = bridge
                    .rule_for(Direction::BusToMqtt, &msg.topic)
                    .expect("routed by topic")
                    .clone();
                let f = bridge.bus_ingress(&rule, &msg);
                let d = self.bridge_cost(msg.payload.len());
                (Some(Held::Bridge(rule, f, Direction::BusToMqtt)), d)
            }
            (Comp::VehDown | Comp::CloudIn, Work::Mqtt(payload)) => {
                let (bridge, topic) = match c {
                    Comp::VehDown => (
                        &self.veh_bridge,
                        &self.veh_bridge.config().mqtt2bus[0].source_topic,
                    ),
                    _ => (
                        &self.cloud_bridge,
                        &self.cloud_bridge.config().mqtt2bus[0].source_topic,
                    ),
                };
                let rule = bridge
                    .rule_for(Direction::MqttToBus, topic)
                    .unwrap()
                    .clone();
                let d = self.bridge_cost(payload.len());
                (
                    bridge
                        .mqtt_ingress(&rule, &payload)
                        .map(|f| Held::Bridge(rule, f, Direction::MqttToBus)),
                    d,
                )
            }
            (Comp::Detector, Work::Bus(msg)) => self.detector_start(msg),
            _ => unreachable!("work routed to the wrong station"),
        };
        let st = self.stations.get_mut(&c).unwrap();
        st.held = held;
        let t = self.now + duration;
        self.at(t, Ev::Stage(c));
    }

    /// First detector stage: conversion. Returns the held state and its duration.
    fn detector_start(&mut self, msg: BusMessage) -> (Option<Held>, u64) {
        let Some(trace) = msg.trace.clone() else {
            return (None, 0);
        };
        if self.cfg.detector.loop_through {
            return (
                Some(Held::Detect(
                    trace,
                    msg.type_tag.clone(),
                    msg.payload.clone(),
                    0,
                )),
                0,
            );
        }
        let key = (msg.type_tag.clone(), hash_bytes(&msg.payload));
        if !self.detector_memo.contains_key(&key) {
            match convert(&msg.type_tag, &msg.payload) {
                Ok((cloud, n)) => {
                    let objects = objects_of(&cloud, &self.cfg.detector.detector_config());
                    self.detector_memo
                        .insert(key.clone(), (OBJECTS_TYPE_TAG.into(), objects, n));
                }
                Err(e) => {
                    self.fail(e);
                    return (None, 0);
                }
            }
        }
        let (tag, value, n) = self.detector_memo[&key].clone();
        let conversion = (self.cfg.cost.conversion_ns_per_point * n as f64).round() as u64;
        (Some(Held::Detect(trace, tag, value, 1)), conversion)
    }

    fn stage_done(&mut self, c: Comp) {
        let held = self.stations.get_mut(&c).unwrap().held.take();
        match held {
            Some(Held::Bridge(rule, f, Direction::BusToMqtt)) => {
                let (bridge, conn) = if c == Comp::VehUp {
                    (&self.veh_bridge, VEH)
                } else {
                    (&self.cloud_bridge, CLOUD)
                };
                let out = bridge.bus_egress(&rule, f);
                let link = self.links.get_mut(&conn).unwrap();
                let (token, evs) =
                    link.client
                        .publish(self.now, out.topic.clone(), out.payload.clone(), out.qos);
                self.pending.insert((conn, token), (c, out));
                if self.cfg.single_sample_mode {
                    self.stations.get_mut(&c).unwrap().blocked = Some(token);
                }
                self.client_events(conn, evs);
            }
            Some(Held::Bridge(rule, f, Direction::MqttToBus)) => {
                let bridge = if c == Comp::VehDown {
                    &self.veh_bridge
                } else {
                    &self.cloud_bridge
                };
                let msg = bridge.mqtt_egress(&rule, f);
                let target = if c == Comp::VehDown {
                    Comp::Sink
                } else {
                    Comp::Detector
                };
                self.bus_hop(target, msg);
            }
            Some(Held::Detect(mut trace, tag, value, stage)) => {
                let clock: &dyn Clock = if self.cfg.topology == Topology::InVehicle {
                    &self.veh_clock
                } else {
                    &self.cloud_clock
                };
                if stage == 1 || self.cfg.detector.loop_through {
                    trace.push(ProbeKind::DetectIn, clock.now_ns(), clock.id());
                }
                if stage == 1 {
                    // second stage: the emulated inference
                    let st = self.stations.get_mut(&c).unwrap();
                    st.held = Some(Held::Detect(trace, tag, value, 2));
                    let t = self.now + (self.cfg.detector.compute_delay_ms * 1e6).round() as u64;
                    self.at(t, Ev::Stage(c));
                    return;
                }
                trace.push(ProbeKind::DetectOut, clock.now_ns(), clock.id());
                let msg =
                    BusMessage::new(super::scenario::OBJECTS_BUS, tag, value).with_trace(trace);
                let target = if self.cfg.topology == Topology::InVehicle {
                    Comp::Sink
                } else {
                    Comp::CloudOut
                };
                self.bus_hop(target, msg);
            }
            None => {}
        }
        self.stations.get_mut(&c).unwrap().busy = false;
        self.try_start(c);
    }

    fn sink(&mut self, msg: BusMessage) {
        let Some(mut trace) = msg.trace else { return };
        let t = self.veh_clock.now_ns();
        trace.push(ProbeKind::Sink, t, ClockId::VEHICLE);
        let id = trace.sample_id as usize;
        if id < self.sink_traces.len() && self.sink_traces[id].is_none() {
            self.sink_traces[id] = Some(trace);
            self.completed_at[id] = Some(t);
            self.completed += 1;
        }
    }

    /// Serializes the client's transmits, then releases its application events.
    fn client_events(&mut self, conn: ConnId, evs: Vec<ClientEvent>) {
        let tx_cost = us(self.cfg.cost.client_tx_us);
        let mut release = self.now;
        let mut app = Vec::new();
        let mut sends = Vec::new();
        let link = self.links.get_mut(&conn).unwrap();
        for ev in evs {
            match ev {
                ClientEvent::Transmit(p) => {
                    let start = self.now.max(link.tx_free);
                    link.tx_free = start + tx_cost;
                    release = link.tx_free;
                    if let ShapeDecision::Deliver(d) =
                        link.shaper
                            .up
                            .shape(encoded_len(&p), FrameKind::of(&p), link.tx_free)
                    {
                        sends.push((d, p));
                    }
                }
                other => app.push(other),
            }
        }
        for (d, p) in sends {
            self.at(d, Ev::ToBroker(conn, p));
        }
        if !app.is_empty() {
            self.at(release, Ev::ClientApp(conn, app));
        }
    }

    fn client_app(&mut self, conn: ConnId, evs: Vec<ClientEvent>) {
        for ev in evs {
            match ev {
                ClientEvent::Message(p) => {
                    let target = if conn == VEH {
                        Comp::VehDown
                    } else {
                        Comp::CloudIn
                    };
                    self.enqueue(target, Work::Mqtt(p.payload));
                }
                ClientEvent::PublishDone(token, res) => {
                    let Some((c, out)) = self.pending.remove(&(conn, token)) else {
                        continue;
                    };
                    match res {
                        Ok(()) => {
                            let bridge = if conn == VEH {
                                &self.veh_bridge
                            } else {
                                &self.cloud_bridge
                            };
                            bridge.publish_completed(&out);
                        }
                        Err(e) => tracing::debug!(error = %e, "publish failed in simulation"),
                    }
                    let st = self.stations.get_mut(&c).unwrap();
                    if st.blocked == Some(token) {
                        st.blocked = None;
                        self.try_start(c);
                    }
                }
                ClientEvent::Refused(code) => self.fail(ScenarioError::Aborted(format!(
                    "broker refused connection (code {code})"
                ))),
                ClientEvent::Disconnect(why) => self.fail(ScenarioError::Aborted(format!(
                    "client dropped its connection: {why}"
                ))),
                ClientEvent::Subscribed(_, Err(e)) => {
                    self.fail(ScenarioError::Aborted(format!("subscription failed: {e}")))
                }
                ClientEvent::Connected { .. }
                | ClientEvent::Subscribed(..)
                | ClientEvent::Transmit(_) => {}
            }
        }
    }

    fn broker_actions(&mut self, actions: Vec<BrokerAction>) {
        for a in actions {
            match a {
                BrokerAction::Send(conn, p) => {
                    let link = self.links.get_mut(&conn).unwrap();
                    if let ShapeDecision::Deliver(d) =
                        link.shaper
                            .down
                            .shape(encoded_len(&p), FrameKind::of(&p), self.now)
                    {
                        self.at(d, Ev::ToClient(conn, p));
                    }
                }
                BrokerAction::Close(conn, why) => self.fail(ScenarioError::Aborted(format!(
                    "broker closed connection {conn}: {why:?}"
                ))),
            }
        }
    }
}
