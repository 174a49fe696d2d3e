//! Sans-IO broker state machine.

use std::collections::{BTreeMap, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::auth::{AuthOutcome, AuthRegistry};
use crate::codec::{
    Connack, ConnectReturnCode, ControlPacket, Publish, QosLevel, Suback, Subscribe, TopicFilter,
    TopicName,
};

pub type ConnId = u64;

const NS_PER_MS: u64 = 1_000_000;
/// Released QoS 2 ids remembered per session so a retransmitted PUBREL is
/// answered rather than treated as a violation.
const RELEASED_MEMORY: usize = 1024;

/// When the broker forwards an inbound QoS 2 message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Qos2Routing {
    /// Store on PUBLISH, forward on PUBREL.
    #[default]
    OnPubrel,
    /// Forward on first PUBLISH, suppress duplicates until PUBREL.
    OnPublish,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetransmitPolicy {
    pub initial_ms: u64,
    pub max_retries: u32,
}

impl Default for RetransmitPolicy {
    fn default() -> Self {
        RetransmitPolicy {
            initial_ms: 1000,
            max_retries: 3,
        }
    }
}

impl RetransmitPolicy {
    pub(crate) fn timeout_ns(&self, retries: u32) -> u64 {
        (self.initial_ms * NS_PER_MS) << retries.min(20)
    }
}

#[derive(Debug, Clone, Default)]
pub struct BrokerOptions {
    pub auth: Option<AuthRegistry>,
    pub retransmit: RetransmitPolicy,
    pub qos2_routing: Qos2Routing,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CloseReason {
    ProtocolViolation(&'static str),
    KeepAliveTimeout,
    RetransmitExhausted,
    TakenOver,
    ConnectRefused(u8),
    ClientDisconnect,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BrokerAction {
    Send(ConnId, ControlPacket),
    Close(ConnId, CloseReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutState {
    AwaitPuback,
    AwaitPubrec,
    AwaitPubcomp,
}

#[derive(Debug, Clone)]
pub struct Inflight {
    pub publish: Publish,
    pub state: OutState,
    deadline: u64,
    retries: u32,
}

#[derive(Debug, Clone)]
pub struct Session {
    pub client_id: String,
    pub clean: bool,
    pub conn: Option<ConnId>,
    pub subscriptions: Vec<(TopicFilter, QosLevel)>,
    /// Inbound QoS 2 ids between PUBLISH and PUBREL, with the stored message
    /// when routing waits for PUBREL.
    pub inbound_qos2: HashMap<u16, Option<Publish>>,
    released: VecDeque<u16>,
    pub outbound_inflight: BTreeMap<u16, Inflight>,
    /// Deliveries waiting for a free packet id or a connection.
    pending: VecDeque<Publish>,
    pub next_packet_id: u16,
}

impl Session {
    fn new(client_id: String, clean: bool, conn: ConnId) -> Self {
        Session {
            client_id,
            clean,
            conn: Some(conn),
            subscriptions: Vec::new(),
            inbound_qos2: HashMap::new(),
            released: VecDeque::new(),
            outbound_inflight: BTreeMap::new(),
            pending: VecDeque::new(),
            next_packet_id: 1,
        }
    }

    /// Highest granted QoS over all filters matching `topic`.
    pub fn granted_for(&self, topic: &TopicName) -> Option<QosLevel> {
        self.subscriptions
            .iter()
            .filter(|(f, _)| f.matches(topic))
            .map(|&(_, q)| q)
            .max()
    }

    fn allocate_packet_id(&mut self) -> Option<u16> {
        if self.outbound_inflight.len() >= u16::MAX as usize {
            return None;
        }
        loop {
            let id = self.next_packet_id;
            self.next_packet_id = self.next_packet_id.checked_add(1).unwrap_or(1);
            if !self.outbound_inflight.contains_key(&id) {
                return Some(id);
            }
        }
    }

    fn remember_released(&mut self, id: u16) {
        if self.released.len() == RELEASED_MEMORY {
            self.released.pop_front();
        }
        self.released.push_back(id);
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }
}

/// A message scheduled for one subscriber session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub client_id: String,
    pub qos: QosLevel,
}

/// Subscribers of `topic` with the effective QoS `min(published, granted)`.
pub fn route_publish<'a>(
    topic: &TopicName,
    qos: QosLevel,
    sessions: impl IntoIterator<Item = &'a Session>,
) -> Vec<Delivery> {
    let mut out: Vec<Delivery> = sessions
        .into_iter()
        .filter_map(|s| {
            s.granted_for(topic).map(|g| Delivery {
                client_id: s.client_id.clone(),
                qos: g.min(qos),
            })
        })
        .collect();
    out.sort_by(|a, b| a.client_id.cmp(&b.client_id));
    out
}

pub fn topic_matches(filter: &TopicFilter, topic: &TopicName) -> bool {
    filter.matches(topic)
}

#[derive(Debug)]
struct Conn {
    client_id: Option<String>,
    keep_alive_ns: u64,
    last_seen: u64,
}

#[derive(Debug, Default)]
pub struct BrokerCore {
    opts: BrokerOptions,
    conns: HashMap<ConnId, Conn>,
    sessions: BTreeMap<String, Session>,
    generated_ids: u64,
}

fn violation(conn: ConnId, why: &'static str) -> Vec<BrokerAction> {
    vec![BrokerAction::Close(
        conn,
        CloseReason::ProtocolViolation(why),
    )]
}

impl BrokerCore {
    pub fn new(opts: BrokerOptions) -> Self {
        BrokerCore {
            opts,
            ..Default::default()
        }
    }

    pub fn options(&self) -> &BrokerOptions {
        &self.opts
    }

    pub fn session(&self, client_id: &str) -> Option<&Session> {
        self.sessions.get(client_id)
    }

    pub fn sessions(&self) -> impl Iterator<Item = &Session> {
        self.sessions.values()
    }

    pub fn client_id(&self, conn: ConnId) -> Option<&str> {
        self.conns.get(&conn)?.client_id.as_deref()
    }

    pub fn connection_count(&self) -> usize {
        self.conns.len()
    }

    pub fn on_connection(&mut self, conn: ConnId, now: u64) {
        self.conns.insert(
            conn,
            Conn {
                client_id: None,
                keep_alive_ns: 0,
                last_seen: now,
            },
        );
    }

    /// Transport for `conn` is gone; clean sessions are discarded.
    pub fn on_disconnect(&mut self, conn: ConnId) {
        let Some(c) = self.conns.remove(&conn) else {
            return;
        };
        let Some(id) = c.client_id else { return };
        if let Some(s) = self.sessions.get_mut(&id) {
            if s.conn == Some(conn) {
                s.conn = None;
                if s.clean {
                    self.sessions.remove(&id);
                }
            }
        }
    }

    pub fn handle_packet(
        &mut self,
        conn: ConnId,
        now: u64,
        packet: ControlPacket,
    ) -> Vec<BrokerAction> {
        let Some(c) = self.conns.get_mut(&conn) else {
            return Vec::new();
        };
        c.last_seen = now;
        let known = c.client_id.clone();
        let (id, packet) = match (known, packet) {
            (None, ControlPacket::Connect(connect)) => {
                return self.handle_connect(conn, now, connect)
            }
            (None, _) => return violation(conn, "first packet must be CONNECT"),
            (Some(_), ControlPacket::Connect(_)) => return violation(conn, "second CONNECT"),
            (Some(id), p) => (id, p),
        };
        let mut out = Vec::new();
        match packet {
            ControlPacket::Publish(p) => self.handle_publish(conn, &id, now, p, &mut out),
            ControlPacket::Pubrel(pid) => {
                let s = self.sessions.get_mut(&id).expect("connected session");
                match s.inbound_qos2.remove(&pid) {
                    Some(stored) => {
                        s.remember_released(pid);
                        if let Some(p) = stored {
                            self.route(&id, now, p, &mut out);
                        }
                        out.push(BrokerAction::Send(conn, ControlPacket::Pubcomp(pid)));
                    }
                    None if s.released.contains(&pid) => {
                        out.push(BrokerAction::Send(conn, ControlPacket::Pubcomp(pid)))
                    }
                    None => return violation(conn, "PUBREL for unknown packet id"),
                }
            }
            ControlPacket::Puback(pid) => {
                let s = self.sessions.get_mut(&id).expect("connected session");
                match s.outbound_inflight.get(&pid).map(|f| f.state) {
                    Some(OutState::AwaitPuback) => {
                        s.outbound_inflight.remove(&pid);
                        self.flush_pending(&id, now, &mut out);
                    }
                    Some(_) => return violation(conn, "PUBACK for a QoS 2 message"),
                    None => {}
                }
            }
            ControlPacket::Pubrec(pid) => {
                let rt = self.opts.retransmit;
                let s = self.sessions.get_mut(&id).expect("connected session");
                match s.outbound_inflight.get_mut(&pid) {
                    Some(f) if f.state == OutState::AwaitPuback => {
                        return violation(conn, "PUBREC for a QoS 1 message")
                    }
                    Some(f) => {
                        f.state = OutState::AwaitPubcomp;
                        f.retries = 0;
                        f.deadline = now + rt.timeout_ns(0);
                        out.push(BrokerAction::Send(conn, ControlPacket::Pubrel(pid)));
                    }
                    None => {}
                }
            }
            ControlPacket::Pubcomp(pid) => {
                let s = self.sessions.get_mut(&id).expect("connected session");
                match s.outbound_inflight.get(&pid).map(|f| f.state) {
                    Some(OutState::AwaitPubcomp) => {
                        s.outbound_inflight.remove(&pid);
                        self.flush_pending(&id, now, &mut out);
                    }
                    Some(_) => return violation(conn, "PUBCOMP before PUBREC"),
                    None => {}
                }
            }
            ControlPacket::Subscribe(sub) => {
                out.push(BrokerAction::Send(conn, self.handle_subscribe(&id, sub)))
            }
            ControlPacket::Pingreq => out.push(BrokerAction::Send(conn, ControlPacket::Pingresp)),
            ControlPacket::Disconnect => {
                out.push(BrokerAction::Close(conn, CloseReason::ClientDisconnect))
            }
            ControlPacket::Connect(_)
            | ControlPacket::Connack(_)
            | ControlPacket::Suback(_)
            | ControlPacket::Pingresp => {
                return violation(conn, "server-to-client packet from client")
            }
        }
        out
    }

    fn handle_connect(
        &mut self,
        conn: ConnId,
        now: u64,
        c: crate::codec::Connect,
    ) -> Vec<BrokerAction> {
        let refuse = |code: ConnectReturnCode| {
            vec![
                BrokerAction::Send(
                    conn,
                    ControlPacket::Connack(Connack {
                        session_present: false,
                        return_code: code as u8,
                    }),
                ),
                BrokerAction::Close(conn, CloseReason::ConnectRefused(code as u8)),
            ]
        };
        if let Some(reg) = &self.opts.auth {
            match reg.check(c.username.as_deref(), c.password.as_deref()) {
                AuthOutcome::Accepted => {}
                AuthOutcome::BadCredentials => {
                    return refuse(ConnectReturnCode::BadUsernameOrPassword)
                }
                AuthOutcome::NotAuthorized => return refuse(ConnectReturnCode::NotAuthorized),
            }
        }
        let client_id = if c.client_id.is_empty() {
            if !c.clean_session {
                return refuse(ConnectReturnCode::IdentifierRejected);
            }
            self.generated_ids += 1;
            format!("auto-{}", self.generated_ids)
        } else {
            c.client_id
        };
        let mut out = Vec::new();
        if let Some(old) = self.sessions.get(&client_id).and_then(|s| s.conn) {
            if let Some(oc) = self.conns.get_mut(&old) {
                oc.client_id = None;
            }
            out.push(BrokerAction::Close(old, CloseReason::TakenOver));
        }
        let conn_state = self.conns.get_mut(&conn).expect("registered connection");
        conn_state.client_id = Some(client_id.clone());
        conn_state.keep_alive_ns = c.keep_alive as u64 * 1_000_000_000;
        let resume = !c.clean_session && self.sessions.contains_key(&client_id);
        if !resume {
            self.sessions.insert(
                client_id.clone(),
                Session::new(client_id.clone(), c.clean_session, conn),
            );
        }
        out.push(BrokerAction::Send(
            conn,
            ControlPacket::Connack(Connack {
                session_present: resume,
                return_code: 0,
            }),
        ));
        if resume {
            let rt = self.opts.retransmit;
            let s = self.sessions.get_mut(&client_id).unwrap();
            s.conn = Some(conn);
            s.clean = false;
            for (&pid, f) in s.outbound_inflight.iter_mut() {
                f.retries = 0;
                f.deadline = now + rt.timeout_ns(0);
                out.push(BrokerAction::Send(conn, resend(pid, f)));
            }
            self.flush_pending(&client_id, now, &mut out);
        }
        out
    }

    fn handle_publish(
        &mut self,
        conn: ConnId,
        id: &str,
        now: u64,
        p: Publish,
        out: &mut Vec<BrokerAction>,
    ) {
        match (p.qos, p.packet_id) {
            (QosLevel::AtMostOnce, _) => self.route(id, now, p, out),
            (QosLevel::AtLeastOnce, Some(pid)) => {
                self.route(id, now, p, out);
                out.push(BrokerAction::Send(conn, ControlPacket::Puback(pid)));
            }
            (QosLevel::ExactlyOnce, Some(pid)) => {
                let mode = self.opts.qos2_routing;
                let s = self.sessions.get_mut(id).expect("connected session");
                if !s.inbound_qos2.contains_key(&pid) {
                    s.released.retain(|&r| r != pid);
                    match mode {
                        Qos2Routing::OnPubrel => {
                            s.inbound_qos2.insert(pid, Some(p));
                        }
                        Qos2Routing::OnPublish => {
                            s.inbound_qos2.insert(pid, None);
                            self.route(id, now, p, out);
                        }
                    }
                }
                out.push(BrokerAction::Send(conn, ControlPacket::Pubrec(pid)));
            }
            (_, None) => out.push(BrokerAction::Close(
                conn,
                CloseReason::ProtocolViolation("QoS>0 publish without packet id"),
            )),
        }
    }

    fn handle_subscribe(&mut self, id: &str, sub: Subscribe) -> ControlPacket {
        let s = self.sessions.get_mut(id).expect("connected session");
        let mut granted = Vec::with_capacity(sub.entries.len());
        for (filter, qos) in sub.entries {
            match s.subscriptions.iter_mut().find(|(f, _)| *f == filter) {
                Some(entry) => entry.1 = qos,
                None => s.subscriptions.push((filter, qos)),
            }
            granted.push(qos.as_u8());
        }
        ControlPacket::Suback(Suback {
            packet_id: sub.packet_id,
            granted,
        })
    }

    fn route(&mut self, _from: &str, now: u64, p: Publish, out: &mut Vec<BrokerAction>) {
        let deliveries = route_publish(&p.topic, p.qos, self.sessions.values());
        for d in deliveries {
            let msg = Publish {
                topic: p.topic.clone(),
                packet_id: None,
                qos: d.qos,
                dup: false,
                retain: false,
                payload: p.payload.clone(),
            };
            self.deliver(&d.client_id, now, msg, out);
        }
    }

    fn deliver(
        &mut self,
        client_id: &str,
        now: u64,
        mut msg: Publish,
        out: &mut Vec<BrokerAction>,
    ) {
        let rt = self.opts.retransmit;
        let s = self.sessions.get_mut(client_id).expect("routed session");
        if msg.qos == QosLevel::AtMostOnce {
            if let Some(conn) = s.conn {
                out.push(BrokerAction::Send(conn, ControlPacket::Publish(msg)));
            }
            return;
        }
        let Some(conn) = s.conn else {
            s.pending.push_back(msg);
            return;
        };
        if !s.pending.is_empty() {
            s.pending.push_back(msg);
            return;
        }
        let Some(pid) = s.allocate_packet_id() else {
            s.pending.push_back(msg);
            return;
        };
        msg.packet_id = Some(pid);
        let state = if msg.qos == QosLevel::AtLeastOnce {
            OutState::AwaitPuback
        } else {
            OutState::AwaitPubrec
        };
        s.outbound_inflight.insert(
            pid,
            Inflight {
                publish: msg.clone(),
                state,
                deadline: now + rt.timeout_ns(0),
                retries: 0,
            },
        );
        out.push(BrokerAction::Send(conn, ControlPacket::Publish(msg)));
    }

    fn flush_pending(&mut self, client_id: &str, now: u64, out: &mut Vec<BrokerAction>) {
        let rt = self.opts.retransmit;
        let s = self.sessions.get_mut(client_id).expect("session");
        let Some(conn) = s.conn else { return };
        while !s.pending.is_empty() {
            let Some(pid) = s.allocate_packet_id() else {
                return;
            };
            let mut msg = s.pending.pop_front().unwrap();
            msg.packet_id = Some(pid);
            let state = if msg.qos == QosLevel::AtLeastOnce {
                OutState::AwaitPuback
            } else {
                OutState::AwaitPubrec
            };
            s.outbound_inflight.insert(
                pid,
                Inflight {
                    publish: msg.clone(),
                    state,
                    deadline: now + rt.timeout_ns(0),
                    retries: 0,
                },
            );
            out.push(BrokerAction::Send(conn, ControlPacket::Publish(msg)));
        }
    }

    /// Keep-alive enforcement and retransmission.
    pub fn tick(&mut self, now: u64) -> Vec<BrokerAction> {
        let mut out = Vec::new();
        for (&conn, c) in &self.conns {
            if c.keep_alive_ns > 0 && now.saturating_sub(c.last_seen) > c.keep_alive_ns * 3 / 2 {
                out.push(BrokerAction::Close(conn, CloseReason::KeepAliveTimeout));
            }
        }
        let rt = self.opts.retransmit;
        for s in self.sessions.values_mut() {
            let Some(conn) = s.conn else { continue };
            let mut exhausted = false;
            for (&pid, f) in s.outbound_inflight.iter_mut() {
                if f.deadline > now {
                    continue;
                }
                if f.retries >= rt.max_retries {
                    exhausted = true;
                    break;
                }
                f.retries += 1;
                f.deadline = now + rt.timeout_ns(f.retries);
                out.push(BrokerAction::Send(conn, resend(pid, f)));
            }
            if exhausted {
                out.push(BrokerAction::Close(conn, CloseReason::RetransmitExhausted));
            }
        }
        out
    }

    /// Earliest time at which `tick` has work to do.
    pub fn next_deadline(&self) -> Option<u64> {
        let ka = self
            .conns
            .values()
            .filter(|c| c.keep_alive_ns > 0)
            .map(|c| c.last_seen + c.keep_alive_ns * 3 / 2 + 1);
        let rt = self
            .sessions
            .values()
            .filter(|s| s.conn.is_some())
            .flat_map(|s| s.outbound_inflight.values().map(|f| f.deadline));
        ka.chain(rt).min()
    }
}

fn resend(pid: u16, f: &Inflight) -> ControlPacket {
    match f.state {
        OutState::AwaitPubcomp => ControlPacket::Pubrel(pid),
        _ => ControlPacket::Publish(Publish {
            dup: true,
            ..f.publish.clone()
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::broker::auth::Credentials;
    use crate::codec::Connect;
    use bytes::Bytes;

    const S: u64 = 1_000_000_000;

    fn connect(id: &str) -> ControlPacket {
        ControlPacket::Connect(Connect {
            client_id: id.into(),
            username: None,
            password: None,
            keep_alive: 0,
            clean_session: true,
        })
    }

    fn publish(topic: &str, qos: u8, pid: Option<u16>, dup: bool) -> ControlPacket {
        ControlPacket::Publish(Publish {
            topic: TopicName::new(topic).unwrap(),
            packet_id: pid,
            qos: QosLevel::from_u8(qos).unwrap(),
            dup,
            retain: false,
            payload: Bytes::from_static(b"data"),
        })
    }

    fn subscribe(filter: &str, qos: u8) -> ControlPacket {
        ControlPacket::Subscribe(Subscribe {
            packet_id: 1,
            entries: vec![(
                TopicFilter::new(filter).unwrap(),
                QosLevel::from_u8(qos).unwrap(),
            )],
        })
    }

    fn connack(rc: u8, sp: bool) -> ControlPacket {
        ControlPacket::Connack(Connack {
            session_present: sp,
            return_code: rc,
        })
    }

    fn sends_to(actions: &[BrokerAction], conn: ConnId) -> Vec<&ControlPacket> {
        actions
            .iter()
            .filter_map(|a| match a {
                BrokerAction::Send(c, p) if *c == conn => Some(p),
                _ => None,
            })
            .collect()
    }

    /// Broker with publisher on conn 1 and subscriber "sub" on conn 2 subscribed to `filter`.
    fn setup(opts: BrokerOptions, filter: &str, qos: u8) -> BrokerCore {
        let mut b = BrokerCore::new(opts);
        b.on_connection(1, 0);
        b.on_connection(2, 0);
        b.handle_packet(1, 0, connect("pub"));
        b.handle_packet(2, 0, connect("sub"));
        b.handle_packet(2, 0, subscribe(filter, qos));
        b
    }

    #[test]
    fn connect_and_auth() {
        let mut reg = AuthRegistry::default();
        reg.add(Credentials::new("admin", b"password"));
        let mut b = BrokerCore::new(BrokerOptions {
            auth: Some(reg),
            ..Default::default()
        });
        let with = |user: Option<&str>, pass: Option<&'static [u8]>| {
            ControlPacket::Connect(Connect {
                client_id: "vehicle".into(),
                username: user.map(Into::into),
                password: pass.map(Bytes::from_static),
                keep_alive: 60,
                clean_session: true,
            })
        };
        b.on_connection(1, 0);
        assert_eq!(
            b.handle_packet(1, 0, with(Some("admin"), Some(b"password"))),
            vec![BrokerAction::Send(1, connack(0, false))]
        );
        b.on_connection(2, 0);
        let a = b.handle_packet(2, 0, with(Some("admin"), Some(b"wrong")));
        assert_eq!(a[0], BrokerAction::Send(2, connack(4, false)));
        assert!(matches!(
            a[1],
            BrokerAction::Close(2, CloseReason::ConnectRefused(4))
        ));
        b.on_connection(3, 0);
        assert_eq!(
            b.handle_packet(3, 0, with(None, None))[0],
            BrokerAction::Send(3, connack(5, false))
        );
    }

    #[test]
    fn takeover_closes_old_connection() {
        let mut b = BrokerCore::new(BrokerOptions::default());
        b.on_connection(1, 0);
        b.handle_packet(1, 0, connect("vehicle"));
        b.on_connection(2, 0);
        let a = b.handle_packet(2, 0, connect("vehicle"));
        assert_eq!(
            a,
            vec![
                BrokerAction::Close(1, CloseReason::TakenOver),
                BrokerAction::Send(2, connack(0, false))
            ]
        );
        b.on_disconnect(1);
        assert_eq!(b.session("vehicle").unwrap().conn, Some(2));
    }

    #[test]
    fn must_connect_first() {
        let mut b = BrokerCore::new(BrokerOptions::default());
        b.on_connection(1, 0);
        assert!(matches!(
            b.handle_packet(1, 0, ControlPacket::Pingreq)[0],
            BrokerAction::Close(1, CloseReason::ProtocolViolation(_))
        ));
    }

    #[test]
    fn routing_rules() {
        let mut b = setup(BrokerOptions::default(), "ping", 0);
        let a = b.handle_packet(1, 0, publish("ping", 0, None, false));
        assert_eq!(sends_to(&a, 2).len(), 1);
        assert!(b
            .handle_packet(1, 0, publish("other", 0, None, false))
            .is_empty());

        // min rule
        let a = b.handle_packet(1, 0, publish("ping", 2, Some(5), false));
        assert_eq!(sends_to(&a, 1), vec![&ControlPacket::Pubrec(5)]);
        let a = b.handle_packet(1, 0, ControlPacket::Pubrel(5));
        match sends_to(&a, 2)[..] {
            [ControlPacket::Publish(p)] => {
                assert_eq!((p.qos, p.packet_id), (QosLevel::AtMostOnce, None))
            }
            ref other => panic!("{other:?}"),
        }
        assert_eq!(sends_to(&a, 1), vec![&ControlPacket::Pubcomp(5)]);
    }

    #[test]
    fn route_publish_examples() {
        let mut s = Session::new("a".into(), true, 1);
        s.subscriptions.push((
            TopicFilter::new("sensor/+/points").unwrap(),
            QosLevel::AtLeastOnce,
        ));
        let t = TopicName::new("sensor/front/points").unwrap();
        assert_eq!(
            route_publish(&t, QosLevel::ExactlyOnce, [&s]),
            vec![Delivery {
                client_id: "a".into(),
                qos: QosLevel::AtLeastOnce
            }]
        );
        assert_eq!(
            route_publish(&TopicName::new("x").unwrap(), QosLevel::ExactlyOnce, [&s]),
            vec![]
        );
        assert!(topic_matches(
            &TopicFilter::new("#").unwrap(),
            &TopicName::new("a/b/c").unwrap()
        ));
        assert!(topic_matches(
            &TopicFilter::new("ping").unwrap(),
            &TopicName::new("ping").unwrap()
        ));
    }

    #[test]
    fn qos1_flow() {
        let mut b = setup(BrokerOptions::default(), "t", 1);
        let a = b.handle_packet(1, 0, publish("t", 1, Some(7), false));
        assert_eq!(sends_to(&a, 1), vec![&ControlPacket::Puback(7)]);
        let delivered = sends_to(&a, 2);
        assert_eq!(delivered.len(), 1);
        let ControlPacket::Publish(p) = delivered[0] else {
            panic!()
        };
        let pid = p.packet_id.unwrap();
        assert_eq!(b.session("sub").unwrap().outbound_inflight.len(), 1);
        b.handle_packet(2, 0, ControlPacket::Puback(pid));
        assert!(b.session("sub").unwrap().outbound_inflight.is_empty());
        // late duplicate ack is ignored
        assert!(b.handle_packet(2, 0, ControlPacket::Puback(pid)).is_empty());
    }

    #[test]
    fn qos2_duplicate_not_rerouted() {
        for mode in [Qos2Routing::OnPubrel, Qos2Routing::OnPublish] {
            let mut b = setup(
                BrokerOptions {
                    qos2_routing: mode,
                    ..Default::default()
                },
                "t",
                2,
            );
            let mut routed = 0;
            let count = |a: &[BrokerAction]| {
                sends_to(a, 2)
                    .iter()
                    .filter(|p| matches!(p, ControlPacket::Publish(_)))
                    .count()
            };
            let a = b.handle_packet(1, 0, publish("t", 2, Some(9), false));
            routed += count(&a);
            assert_eq!(sends_to(&a, 1), vec![&ControlPacket::Pubrec(9)]);
            let a = b.handle_packet(1, 0, publish("t", 2, Some(9), true));
            routed += count(&a);
            assert_eq!(sends_to(&a, 1), vec![&ControlPacket::Pubrec(9)]);
            let a = b.handle_packet(1, 0, ControlPacket::Pubrel(9));
            routed += count(&a);
            assert_eq!(sends_to(&a, 1), vec![&ControlPacket::Pubcomp(9)]);
            assert!(!b.session("pub").unwrap().inbound_qos2.contains_key(&9));
            // retransmitted PUBREL answered, nothing routed
            let a = b.handle_packet(1, 0, ControlPacket::Pubrel(9));
            routed += count(&a);
            assert_eq!(sends_to(&a, 1), vec![&ControlPacket::Pubcomp(9)]);
            assert_eq!(routed, 1, "{mode:?}");
        }
    }

    #[test]
    fn unknown_pubrel_is_violation() {
        let mut b = setup(BrokerOptions::default(), "t", 2);
        assert!(matches!(
            b.handle_packet(1, 0, ControlPacket::Pubrel(77))[0],
            BrokerAction::Close(1, CloseReason::ProtocolViolation(_))
        ));
    }

    #[test]
    fn outbound_qos2_states() {
        let mut b = setup(BrokerOptions::default(), "t", 2);
        b.handle_packet(1, 0, publish("t", 2, Some(1), false));
        let a = b.handle_packet(1, 0, ControlPacket::Pubrel(1));
        let ControlPacket::Publish(p) = sends_to(&a, 2)[0] else {
            panic!()
        };
        let pid = p.packet_id.unwrap();
        assert!(matches!(
            b.handle_packet(2, 0, ControlPacket::Pubcomp(pid))[0],
            BrokerAction::Close(2, _)
        ));
        let mut b = setup(BrokerOptions::default(), "t", 2);
        b.handle_packet(1, 0, publish("t", 2, Some(1), false));
        b.handle_packet(1, 0, ControlPacket::Pubrel(1));
        assert_eq!(
            sends_to(&b.handle_packet(2, 0, ControlPacket::Pubrec(pid)), 2),
            vec![&ControlPacket::Pubrel(pid)]
        );
        b.handle_packet(2, 0, ControlPacket::Pubcomp(pid));
        assert!(b.session("sub").unwrap().outbound_inflight.is_empty());
    }

    #[test]
    fn retransmit_then_close() {
        let mut b = setup(BrokerOptions::default(), "t", 1);
        b.handle_packet(1, 0, publish("t", 1, Some(1), false));
        assert!(b.tick(S / 2).is_empty());
        assert_eq!(b.next_deadline(), Some(S));
        let a = b.tick(S);
        let ControlPacket::Publish(p) = sends_to(&a, 2)[0] else {
            panic!()
        };
        assert!(p.dup);
        assert_eq!(b.next_deadline(), Some(3 * S));
        assert_eq!(sends_to(&b.tick(3 * S), 2).len(), 1);
        assert_eq!(sends_to(&b.tick(7 * S), 2).len(), 1);
        assert_eq!(
            b.tick(15 * S),
            vec![BrokerAction::Close(2, CloseReason::RetransmitExhausted)]
        );
    }

    #[test]
    fn keep_alive_enforced() {
        let mut b = BrokerCore::new(BrokerOptions::default());
        b.on_connection(1, 0);
        b.handle_packet(
            1,
            0,
            ControlPacket::Connect(Connect {
                client_id: "k".into(),
                username: None,
                password: None,
                keep_alive: 10,
                clean_session: true,
            }),
        );
        assert!(b.tick(15 * S).is_empty());
        b.handle_packet(1, 14 * S, ControlPacket::Pingreq);
        assert!(b.tick(28 * S).is_empty());
        assert_eq!(
            b.tick(29 * S + 1),
            vec![BrokerAction::Close(1, CloseReason::KeepAliveTimeout)]
        );
    }

    #[test]
    fn packet_id_exhaustion_blocks() {
        let mut b = setup(BrokerOptions::default(), "t", 1);
        for _ in 0..u16::MAX {
            b.handle_packet(1, 0, publish("t", 0, None, false));
        }
        // qos 0 deliveries never take ids
        assert!(b.session("sub").unwrap().outbound_inflight.is_empty());
        let mut first = None;
        for i in 0..u16::MAX as u32 + 2 {
            let a = b.handle_packet(1, 0, publish("t", 1, Some((i % 60000 + 1) as u16), false));
            if first.is_none() {
                if let ControlPacket::Publish(p) = sends_to(&a, 2)[0] {
                    first = p.packet_id;
                }
            }
        }
        let s = b.session("sub").unwrap();
        assert_eq!(s.outbound_inflight.len(), u16::MAX as usize);
        assert_eq!(s.pending_len(), 2);
        let a = b.handle_packet(2, 0, ControlPacket::Puback(first.unwrap()));
        let ControlPacket::Publish(p) = sends_to(&a, 2)[0] else {
            panic!()
        };
        assert_eq!(p.packet_id, first);
        assert_eq!(b.session("sub").unwrap().pending_len(), 1);
    }

    #[test]
    fn persistent_session_resumes() {
        let mut b = BrokerCore::new(BrokerOptions::default());
        let persistent = ControlPacket::Connect(Connect {
            client_id: "sub".into(),
            username: None,
            password: None,
            keep_alive: 0,
            clean_session: false,
        });
        b.on_connection(1, 0);
        b.handle_packet(1, 0, connect("pub"));
        b.on_connection(2, 0);
        b.handle_packet(2, 0, persistent.clone());
        b.handle_packet(2, 0, subscribe("t", 1));
        b.handle_packet(1, 0, publish("t", 1, Some(1), false));
        b.on_disconnect(2);
        b.handle_packet(1, 0, publish("t", 1, Some(2), false));
        b.on_connection(3, 0);
        let a = b.handle_packet(3, 0, persistent);
        let sent = sends_to(&a, 3);
        assert_eq!(sent[0], &connack(0, true));
        let pubs: Vec<_> = sent[1..]
            .iter()
            .map(|p| match p {
                ControlPacket::Publish(p) => p.dup,
                _ => panic!(),
            })
            .collect();
        assert_eq!(pubs, vec![true, false]);
    }

    #[test]
    fn clean_session_dropped_on_disconnect() {
        let mut b = setup(BrokerOptions::default(), "t", 0);
        b.on_disconnect(2);
        assert!(b.session("sub").is_none());
        assert!(b
            .handle_packet(1, 0, publish("t", 0, None, false))
            .is_empty());
    }
}
