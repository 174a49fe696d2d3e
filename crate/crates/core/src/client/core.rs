//! Sans-IO client state machine.

use std::collections::{BTreeMap, HashMap, VecDeque};

use bytes::Bytes;
use serde::{Deserialize, Serialize};

use super::{ClientError, OverflowPolicy, PublishError};
use crate::broker::RetransmitPolicy;
use crate::codec::{
    Connect, ControlPacket, Publish, QosLevel, Subscribe, TopicFilter, TopicName, SUBACK_FAILURE,
};

/// When a received QoS 2 message is handed to the application.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Qos2Release {
    /// Hold until PUBREL.
    #[default]
    OnPubrel,
    /// Deliver on first PUBLISH and suppress duplicates.
    OnPublish,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PublishToken(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SubscribeToken(pub u64);

#[derive(Debug, Clone, PartialEq)]
pub enum ClientEvent {
    /// Write this packet to the transport.
    Transmit(ControlPacket),
    Connected {
        session_present: bool,
    },
    /// CONNACK with a non-zero return code.
    Refused(u8),
    Message(Publish),
    PublishDone(PublishToken, Result<(), PublishError>),
    Subscribed(SubscribeToken, Result<QosLevel, ClientError>),
    /// Drop the transport; it is broken.
    Disconnect(&'static str),
}

#[derive(Debug, Clone)]
pub struct CoreOptions {
    pub client_id: String,
    pub username: Option<String>,
    pub password: Option<String>,
    pub keep_alive: u16,
    pub clean_session: bool,
    pub buffer_limit: usize,
    pub overflow: OverflowPolicy,
    pub retransmit: RetransmitPolicy,
    pub qos2_release: Qos2Release,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Link {
    Offline,
    AwaitConnack,
    Online,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[allow(clippy::enum_variant_names)]
enum OutState {
    AwaitPuback,
    AwaitPubrec,
    AwaitPubcomp,
}

#[derive(Debug)]
struct Inflight {
    token: PublishToken,
    publish: Publish,
    state: OutState,
    deadline: u64,
    retries: u32,
}

#[derive(Debug)]
pub struct ClientCore {
    opts: CoreOptions,
    link: Link,
    next_token: u64,
    next_pid: u16,
    inflight: BTreeMap<u16, Inflight>,
    queued: VecDeque<(PublishToken, Publish)>,
    /// Inbound QoS 2 ids awaiting PUBREL, with the held message in `OnPubrel` mode.
    inbound_qos2: HashMap<u16, Option<Publish>>,
    subscriptions: BTreeMap<String, QosLevel>,
    sub_inflight: HashMap<u16, Vec<(Option<SubscribeToken>, TopicFilter)>>,
    offline_subs: Vec<(SubscribeToken, TopicFilter, QosLevel)>,
    last_sent: u64,
    ping_sent: Option<u64>,
}

impl ClientCore {
    pub fn new(opts: CoreOptions) -> Self {
        ClientCore {
            opts,
            link: Link::Offline,
            next_token: 1,
            next_pid: 1,
            inflight: BTreeMap::new(),
            queued: VecDeque::new(),
            inbound_qos2: HashMap::new(),
            subscriptions: BTreeMap::new(),
            sub_inflight: HashMap::new(),
            offline_subs: Vec::new(),
            last_sent: 0,
            ping_sent: None,
        }
    }

    pub fn options(&self) -> &CoreOptions {
        &self.opts
    }

    pub fn is_online(&self) -> bool {
        self.link == Link::Online
    }

    pub fn inflight_len(&self) -> usize {
        self.inflight.len()
    }

    pub fn queued_len(&self) -> usize {
        self.queued.len()
    }

    /// Filters that are re-issued after a reconnect.
    pub fn subscriptions(&self) -> impl Iterator<Item = (&str, QosLevel)> {
        self.subscriptions.iter().map(|(f, q)| (f.as_str(), *q))
    }

    fn token(&mut self) -> u64 {
        let t = self.next_token;
        self.next_token += 1;
        t
    }

    fn transmit(&mut self, now: u64, p: ControlPacket, out: &mut Vec<ClientEvent>) {
        self.last_sent = now;
        out.push(ClientEvent::Transmit(p));
    }

    fn allocate_pid(&mut self) -> Option<u16> {
        if self.inflight.len() + self.sub_inflight.len() >= u16::MAX as usize {
            return None;
        }
        loop {
            let id = self.next_pid;
            self.next_pid = self.next_pid.checked_add(1).unwrap_or(1);
            if !self.inflight.contains_key(&id) && !self.sub_inflight.contains_key(&id) {
                return Some(id);
            }
        }
    }

    /// Transport established; starts the CONNECT handshake.
    pub fn on_transport_up(&mut self, now: u64) -> Vec<ClientEvent> {
        self.link = Link::AwaitConnack;
        self.ping_sent = None;
        let o = &self.opts;
        let connect = ControlPacket::Connect(Connect {
            client_id: o.client_id.clone(),
            username: o.username.clone(),
            password: o
                .password
                .as_ref()
                .map(|p| Bytes::copy_from_slice(p.as_bytes())),
            keep_alive: o.keep_alive,
            clean_session: o.clean_session,
        });
        let mut out = Vec::new();
        self.transmit(now, connect, &mut out);
        out
    }

    pub fn on_transport_down(&mut self) {
        self.link = Link::Offline;
        self.ping_sent = None;
        // a SUBSCRIBE without SUBACK is reissued from the stored filter set
        for (_, entries) in self.sub_inflight.drain() {
            for (token, filter) in entries {
                if let (Some(t), Some(&q)) = (token, self.subscriptions.get(filter.as_str())) {
                    self.offline_subs.push((t, filter, q));
                }
            }
        }
    }

    pub fn publish(
        &mut self,
        now: u64,
        topic: TopicName,
        payload: Bytes,
        qos: QosLevel,
    ) -> (PublishToken, Vec<ClientEvent>) {
        let token = PublishToken(self.token());
        let msg = Publish {
            topic,
            packet_id: None,
            qos,
            dup: false,
            retain: false,
            payload,
        };
        let mut out = Vec::new();
        if self.link == Link::Online
            && self.queued.is_empty()
            && self.try_send(now, token, msg.clone(), &mut out)
        {
            return (token, out);
        }
        if self.queued.len() >= self.opts.buffer_limit {
            match self.opts.overflow {
                OverflowPolicy::DropOldest => {
                    let (old, _) = self.queued.pop_front().unwrap();
                    out.push(ClientEvent::PublishDone(
                        old,
                        Err(PublishError::BufferOverflow),
                    ));
                }
                OverflowPolicy::RejectNew => {
                    out.push(ClientEvent::PublishDone(
                        token,
                        Err(PublishError::BufferOverflow),
                    ));
                    return (token, out);
                }
            }
        }
        self.queued.push_back((token, msg));
        (token, out)
    }

    /// Sends `msg` now if a packet id is free (QoS 0 needs none).
    fn try_send(
        &mut self,
        now: u64,
        token: PublishToken,
        mut msg: Publish,
        out: &mut Vec<ClientEvent>,
    ) -> bool {
        if msg.qos == QosLevel::AtMostOnce {
            self.transmit(now, ControlPacket::Publish(msg), out);
            out.push(ClientEvent::PublishDone(token, Ok(())));
            return true;
        }
        let Some(pid) = self.allocate_pid() else {
            return false;
        };
        msg.packet_id = Some(pid);
        let state = if msg.qos == QosLevel::AtLeastOnce {
            OutState::AwaitPuback
        } else {
            OutState::AwaitPubrec
        };
        let deadline = now + self.opts.retransmit.timeout_ns(0);
        self.inflight.insert(
            pid,
            Inflight {
                token,
                publish: msg.clone(),
                state,
                deadline,
                retries: 0,
            },
        );
        self.transmit(now, ControlPacket::Publish(msg), out);
        true
    }

    fn flush_queue(&mut self, now: u64, out: &mut Vec<ClientEvent>) {
        while let Some((token, msg)) = self.queued.pop_front() {
            if !self.try_send(now, token, msg.clone(), out) {
                self.queued.push_front((token, msg));
                return;
            }
        }
    }

    pub fn subscribe(
        &mut self,
        now: u64,
        filter: &str,
        qos: QosLevel,
    ) -> Result<(SubscribeToken, Vec<ClientEvent>), ClientError> {
        let filter = TopicFilter::new(filter).map_err(ClientError::InvalidFilter)?;
        let token = SubscribeToken(self.token());
        self.subscriptions.insert(filter.as_str().to_owned(), qos);
        let mut out = Vec::new();
        match (self.link, self.allocate_pid()) {
            (Link::Online, Some(pid)) => {
                self.sub_inflight
                    .insert(pid, vec![(Some(token), filter.clone())]);
                self.transmit(
                    now,
                    ControlPacket::Subscribe(Subscribe {
                        packet_id: pid,
                        entries: vec![(filter, qos)],
                    }),
                    &mut out,
                );
            }
            _ => self.offline_subs.push((token, filter, qos)),
        }
        Ok((token, out))
    }

    pub fn handle(&mut self, now: u64, packet: ControlPacket) -> Vec<ClientEvent> {
        let mut out = Vec::new();
        match packet {
            ControlPacket::Connack(c) => {
                if self.link != Link::AwaitConnack {
                    out.push(ClientEvent::Disconnect("unexpected CONNACK"));
                    return out;
                }
                if c.return_code != 0 {
                    self.link = Link::Offline;
                    out.push(ClientEvent::Refused(c.return_code));
                    return out;
                }
                self.link = Link::Online;
                out.push(ClientEvent::Connected {
                    session_present: c.session_present,
                });
                self.after_connect(now, c.session_present, &mut out);
            }
            ControlPacket::Publish(p) => self.handle_incoming(now, p, &mut out),
            ControlPacket::Pubrel(pid) => {
                let held = self.inbound_qos2.remove(&pid).flatten();
                self.transmit(now, ControlPacket::Pubcomp(pid), &mut out);
                if let Some(p) = held {
                    out.push(ClientEvent::Message(p));
                }
            }
            ControlPacket::Puback(pid) => {
                if self.inflight.get(&pid).map(|f| f.state) == Some(OutState::AwaitPuback) {
                    let f = self.inflight.remove(&pid).unwrap();
                    out.push(ClientEvent::PublishDone(f.token, Ok(())));
                    self.flush_queue(now, &mut out);
                }
            }
            ControlPacket::Pubrec(pid) => {
                let timeout = self.opts.retransmit.timeout_ns(0);
                if let Some(f) = self.inflight.get_mut(&pid) {
                    if f.state != OutState::AwaitPuback {
                        f.state = OutState::AwaitPubcomp;
                        f.retries = 0;
                        f.deadline = now + timeout;
                        self.transmit(now, ControlPacket::Pubrel(pid), &mut out);
                    }
                }
            }
            ControlPacket::Pubcomp(pid) => {
                if self.inflight.get(&pid).map(|f| f.state) == Some(OutState::AwaitPubcomp) {
                    let f = self.inflight.remove(&pid).unwrap();
                    out.push(ClientEvent::PublishDone(f.token, Ok(())));
                    self.flush_queue(now, &mut out);
                }
            }
            ControlPacket::Suback(s) => {
                let entries = self.sub_inflight.remove(&s.packet_id).unwrap_or_default();
                for ((token, filter), code) in entries.into_iter().zip(
                    s.granted
                        .iter()
                        .copied()
                        .chain(std::iter::repeat(SUBACK_FAILURE)),
                ) {
                    let result = match QosLevel::from_u8(code) {
                        Ok(q) => Ok(q),
                        Err(_) => {
                            self.subscriptions.remove(filter.as_str());
                            Err(ClientError::SubscriptionRefused(filter.as_str().to_owned()))
                        }
                    };
                    if let Some(t) = token {
                        out.push(ClientEvent::Subscribed(t, result));
                    }
                }
                self.flush_queue(now, &mut out);
            }
            ControlPacket::Pingresp => self.ping_sent = None,
            ControlPacket::Connect(_)
            | ControlPacket::Subscribe(_)
            | ControlPacket::Pingreq
            | ControlPacket::Disconnect => {
                out.push(ClientEvent::Disconnect(
                    "client-to-server packet from broker",
                ));
            }
        }
        out
    }

    fn handle_incoming(&mut self, now: u64, p: Publish, out: &mut Vec<ClientEvent>) {
        match (p.qos, p.packet_id) {
            (QosLevel::AtMostOnce, _) => out.push(ClientEvent::Message(p)),
            (QosLevel::AtLeastOnce, Some(pid)) => {
                self.transmit(now, ControlPacket::Puback(pid), out);
                out.push(ClientEvent::Message(p));
            }
            (QosLevel::ExactlyOnce, Some(pid)) => {
                let fresh = !self.inbound_qos2.contains_key(&pid);
                let release = self.opts.qos2_release;
                if fresh {
                    let held = match release {
                        Qos2Release::OnPubrel => Some(p.clone()),
                        Qos2Release::OnPublish => None,
                    };
                    self.inbound_qos2.insert(pid, held);
                }
                self.transmit(now, ControlPacket::Pubrec(pid), out);
                if fresh && release == Qos2Release::OnPublish {
                    out.push(ClientEvent::Message(p));
                }
            }
            (_, None) => out.push(ClientEvent::Disconnect("QoS>0 publish without packet id")),
        }
    }

    fn after_connect(&mut self, now: u64, session_present: bool, out: &mut Vec<ClientEvent>) {
        let timeout = self.opts.retransmit.timeout_ns(0);
        let resend: Vec<ControlPacket> = self
            .inflight
            .iter_mut()
            .map(|(&pid, f)| {
                f.retries = 0;
                f.deadline = now + timeout;
                match f.state {
                    OutState::AwaitPubcomp if session_present => ControlPacket::Pubrel(pid),
                    OutState::AwaitPubcomp => {
                        // the broker forgot the exchange; start it over
                        f.state = OutState::AwaitPubrec;
                        ControlPacket::Publish(Publish {
                            dup: true,
                            ..f.publish.clone()
                        })
                    }
                    _ => ControlPacket::Publish(Publish {
                        dup: true,
                        ..f.publish.clone()
                    }),
                }
            })
            .collect();
        let offline = std::mem::take(&mut self.offline_subs);
        let mut entries: Vec<(Option<SubscribeToken>, TopicFilter, QosLevel)> = Vec::new();
        if !session_present {
            self.inbound_qos2.clear();
            for (f, &q) in &self.subscriptions {
                let token = offline
                    .iter()
                    .find(|(_, of, _)| of.as_str() == f)
                    .map(|(t, _, _)| *t);
                entries.push((
                    token,
                    TopicFilter::new(f.as_str()).expect("stored filters are valid"),
                    q,
                ));
            }
        } else {
            entries.extend(offline.into_iter().map(|(t, f, q)| (Some(t), f, q)));
        }
        if !entries.is_empty() {
            if let Some(pid) = self.allocate_pid() {
                let wire = entries.iter().map(|(_, f, q)| (f.clone(), *q)).collect();
                self.sub_inflight
                    .insert(pid, entries.into_iter().map(|(t, f, _)| (t, f)).collect());
                self.transmit(
                    now,
                    ControlPacket::Subscribe(Subscribe {
                        packet_id: pid,
                        entries: wire,
                    }),
                    out,
                );
            }
        }
        for p in resend {
            self.transmit(now, p, out);
        }
        self.flush_queue(now, out);
    }

    /// Retransmission and keep-alive.
    pub fn tick(&mut self, now: u64) -> Vec<ClientEvent> {
        let mut out = Vec::new();
        if self.link != Link::Online {
            return out;
        }
        let ka = self.opts.keep_alive as u64 * 1_000_000_000;
        if ka > 0 {
            match self.ping_sent {
                Some(t) if now.saturating_sub(t) >= ka => {
                    out.push(ClientEvent::Disconnect("no PINGRESP"));
                    return out;
                }
                None if now.saturating_sub(self.last_sent) >= ka => {
                    self.ping_sent = Some(now);
                    self.transmit(now, ControlPacket::Pingreq, &mut out);
                }
                _ => {}
            }
        }
        let rt = self.opts.retransmit;
        let due: Vec<u16> = self
            .inflight
            .iter()
            .filter(|(_, f)| f.deadline <= now)
            .map(|(&pid, _)| pid)
            .collect();
        for pid in due {
            let f = self.inflight.get_mut(&pid).unwrap();
            if f.retries >= rt.max_retries {
                let f = self.inflight.remove(&pid).unwrap();
                out.push(ClientEvent::PublishDone(
                    f.token,
                    Err(PublishError::Timeout),
                ));
                continue;
            }
            f.retries += 1;
            f.deadline = now + rt.timeout_ns(f.retries);
            let p = match f.state {
                OutState::AwaitPubcomp => ControlPacket::Pubrel(pid),
                _ => ControlPacket::Publish(Publish {
                    dup: true,
                    ..f.publish.clone()
                }),
            };
            self.transmit(now, p, &mut out);
        }
        if !self.queued.is_empty() {
            self.flush_queue(now, &mut out);
        }
        out
    }

    pub fn next_deadline(&self) -> Option<u64> {
        if self.link != Link::Online {
            return None;
        }
        let ka = self.opts.keep_alive as u64 * 1_000_000_000;
        let ping = (ka > 0).then(|| match self.ping_sent {
            Some(t) => t + ka,
            None => self.last_sent + ka,
        });
        self.inflight.values().map(|f| f.deadline).chain(ping).min()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::broker::{AuthRegistry, BrokerAction, BrokerCore, BrokerOptions, Credentials};
    use crate::client::ClientOptions;
    use std::collections::VecDeque;

    /// Clients on conn ids 0..n, all packets delivered instantly in FIFO order.
    struct Net {
        broker: BrokerCore,
        clients: Vec<ClientCore>,
        events: Vec<Vec<ClientEvent>>,
        wire: VecDeque<(bool, u64, ControlPacket)>,
        to_broker_count: usize,
    }

    impl Net {
        fn new(opts: BrokerOptions, clients: Vec<ClientOptions>) -> Self {
            let n = clients.len();
            let mut net = Net {
                broker: BrokerCore::new(opts),
                clients: clients
                    .iter()
                    .map(|o| ClientCore::new(o.core_options()))
                    .collect(),
                events: vec![Vec::new(); n],
                wire: VecDeque::new(),
                to_broker_count: 0,
            };
            for i in 0..n {
                net.up(i);
            }
            net
        }

        fn up(&mut self, i: usize) {
            self.broker.on_connection(i as u64, 0);
            let ev = self.clients[i].on_transport_up(0);
            self.absorb(i, ev);
            self.pump();
        }

        fn absorb(&mut self, i: usize, ev: Vec<ClientEvent>) {
            for e in ev {
                match e {
                    ClientEvent::Transmit(p) => self.wire.push_back((true, i as u64, p)),
                    other => self.events[i].push(other),
                }
            }
        }

        fn pump(&mut self) {
            while let Some((to_broker, conn, p)) = self.wire.pop_front() {
                if to_broker {
                    self.to_broker_count += 1;
                    for a in self.broker.handle_packet(conn, 0, p) {
                        match a {
                            BrokerAction::Send(c, p) => self.wire.push_back((false, c, p)),
                            BrokerAction::Close(c, _) => self.broker.on_disconnect(c),
                        }
                    }
                } else {
                    let ev = self.clients[conn as usize].handle(0, p);
                    self.absorb(conn as usize, ev);
                }
            }
        }

        fn messages(&self, i: usize) -> Vec<&Publish> {
            self.events[i]
                .iter()
                .filter_map(|e| match e {
                    ClientEvent::Message(p) => Some(p),
                    _ => None,
                })
                .collect()
        }
    }

    fn opts(id: &str) -> ClientOptions {
        ClientOptions::new("localhost", 1883, id)
    }

    #[test]
    fn connect_and_subscribe_grants() {
        let mut net = Net::new(BrokerOptions::default(), vec![opts("cloud")]);
        assert!(net.clients[0].is_online());
        assert_eq!(
            net.events[0][0],
            ClientEvent::Connected {
                session_present: false
            }
        );
        let (t1, ev) = net.clients[0]
            .subscribe(0, "pong", QosLevel::AtMostOnce)
            .unwrap();
        net.absorb(0, ev);
        let (t2, ev) = net.clients[0]
            .subscribe(0, "a/#", QosLevel::ExactlyOnce)
            .unwrap();
        net.absorb(0, ev);
        net.pump();
        assert!(net.events[0].contains(&ClientEvent::Subscribed(t1, Ok(QosLevel::AtMostOnce))));
        assert!(net.events[0].contains(&ClientEvent::Subscribed(t2, Ok(QosLevel::ExactlyOnce))));
        assert!(matches!(
            net.clients[0].subscribe(0, "a/#/b", QosLevel::AtMostOnce),
            Err(ClientError::InvalidFilter(_))
        ));
    }

    #[test]
    fn wrong_password_refused() {
        let mut reg = AuthRegistry::default();
        reg.add(Credentials::new("admin", b"password"));
        let net = Net::new(
            BrokerOptions {
                auth: Some(reg),
                ..Default::default()
            },
            vec![opts("v").credentials("admin", "nope")],
        );
        assert_eq!(net.events[0], vec![ClientEvent::Refused(4)]);
        assert!(!net.clients[0].is_online());
    }

    #[test]
    fn completion_semantics_per_qos() {
        for (qos, to_broker_before_done) in [
            (QosLevel::AtMostOnce, 0),
            (QosLevel::AtLeastOnce, 1),
            (QosLevel::ExactlyOnce, 2),
        ] {
            let mut net = Net::new(BrokerOptions::default(), vec![opts("pub"), opts("sub")]);
            let (_, ev) = net.clients[1]
                .subscribe(0, "t", QosLevel::ExactlyOnce)
                .unwrap();
            net.absorb(1, ev);
            net.pump();
            let before = net.to_broker_count;
            let (tok, ev) = net.clients[0].publish(
                0,
                TopicName::new("t").unwrap(),
                Bytes::from_static(b"x"),
                qos,
            );
            // a QoS 0 publish completes while the frame is still on the wire
            assert_eq!(
                ev.contains(&ClientEvent::PublishDone(tok, Ok(()))),
                qos == QosLevel::AtMostOnce
            );
            net.absorb(0, ev);
            net.pump();
            assert!(net.events[0].contains(&ClientEvent::PublishDone(tok, Ok(()))));
            assert_eq!(net.messages(1).len(), 1, "{qos:?}");
            // publisher-originated packets: PUBLISH (+ PUBREL) plus the subscriber's acks
            assert!(net.to_broker_count - before > to_broker_before_done);
            assert_eq!(net.clients[0].inflight_len(), 0);
        }
    }

    #[test]
    fn qos2_release_modes() {
        let p = |dup| {
            ControlPacket::Publish(Publish {
                topic: TopicName::new("t").unwrap(),
                packet_id: Some(4),
                qos: QosLevel::ExactlyOnce,
                dup,
                retain: false,
                payload: Bytes::new(),
            })
        };
        for release in [Qos2Release::OnPubrel, Qos2Release::OnPublish] {
            let mut o = opts("c").core_options();
            o.qos2_release = release;
            let mut c = ClientCore::new(o);
            c.on_transport_up(0);
            c.handle(
                0,
                ControlPacket::Connack(crate::codec::Connack {
                    session_present: false,
                    return_code: 0,
                }),
            );
            let count = |ev: &[ClientEvent]| {
                ev.iter()
                    .filter(|e| matches!(e, ClientEvent::Message(_)))
                    .count()
            };
            let a = c.handle(0, p(false));
            assert!(a.contains(&ClientEvent::Transmit(ControlPacket::Pubrec(4))));
            let b = c.handle(0, p(true));
            let d = c.handle(0, ControlPacket::Pubrel(4));
            assert!(d.contains(&ClientEvent::Transmit(ControlPacket::Pubcomp(4))));
            assert_eq!(count(&a) + count(&b) + count(&d), 1);
            match release {
                Qos2Release::OnPubrel => assert_eq!(count(&d), 1),
                Qos2Release::OnPublish => assert_eq!(count(&a), 1),
            }
        }
    }

    #[test]
    fn resubscribe_after_reconnect() {
        let mut net = Net::new(BrokerOptions::default(), vec![opts("v")]);
        for f in ["a", "b/+", "c/#"] {
            let (_, ev) = net.clients[0]
                .subscribe(0, f, QosLevel::AtLeastOnce)
                .unwrap();
            net.absorb(0, ev);
        }
        net.pump();
        let before: Vec<_> = net.broker.session("v").unwrap().subscriptions.clone();
        net.broker.on_disconnect(0);
        net.clients[0].on_transport_down();
        assert!(net.broker.session("v").is_none());
        net.up(0);
        let mut after = net.broker.session("v").unwrap().subscriptions.clone();
        let mut before = before;
        before.sort_by(|a, b| a.0.as_str().cmp(b.0.as_str()));
        after.sort_by(|a, b| a.0.as_str().cmp(b.0.as_str()));
        assert_eq!(before, after);
    }

    #[test]
    fn offline_buffer_drops_oldest() {
        let mut o = opts("v");
        o.outbound_buffer_limit = 2;
        let mut c = ClientCore::new(o.core_options());
        let t = || TopicName::new("t").unwrap();
        let (a, ev) = c.publish(0, t(), Bytes::new(), QosLevel::AtLeastOnce);
        assert!(ev.is_empty());
        c.publish(0, t(), Bytes::new(), QosLevel::AtLeastOnce);
        let (_, ev) = c.publish(0, t(), Bytes::new(), QosLevel::AtLeastOnce);
        assert_eq!(
            ev,
            vec![ClientEvent::PublishDone(
                a,
                Err(PublishError::BufferOverflow)
            )]
        );
        assert_eq!(c.queued_len(), 2);
        o.overflow = OverflowPolicy::RejectNew;
        let mut c = ClientCore::new(o.core_options());
        c.publish(0, t(), Bytes::new(), QosLevel::AtMostOnce);
        c.publish(0, t(), Bytes::new(), QosLevel::AtMostOnce);
        let (n, ev) = c.publish(0, t(), Bytes::new(), QosLevel::AtMostOnce);
        assert_eq!(
            ev,
            vec![ClientEvent::PublishDone(
                n,
                Err(PublishError::BufferOverflow)
            )]
        );
        // queued messages go out once connected
        let mut sent = c.on_transport_up(0);
        sent.extend(c.handle(
            0,
            ControlPacket::Connack(crate::codec::Connack {
                session_present: false,
                return_code: 0,
            }),
        ));
        assert_eq!(
            sent.iter()
                .filter(|e| matches!(e, ClientEvent::Transmit(ControlPacket::Publish(_))))
                .count(),
            2
        );
    }

    #[test]
    fn retransmit_then_timeout() {
        let mut c = ClientCore::new(opts("v").core_options());
        c.on_transport_up(0);
        c.handle(
            0,
            ControlPacket::Connack(crate::codec::Connack {
                session_present: false,
                return_code: 0,
            }),
        );
        let (tok, _) = c.publish(
            0,
            TopicName::new("t").unwrap(),
            Bytes::new(),
            QosLevel::AtLeastOnce,
        );
        let s = 1_000_000_000u64;
        let mut dups = 0;
        for t in [s, 3 * s, 7 * s] {
            let ev = c.tick(t);
            dups += ev
                .iter()
                .filter(|e| matches!(e, ClientEvent::Transmit(ControlPacket::Publish(p)) if p.dup))
                .count();
        }
        assert_eq!(dups, 3);
        assert!(c
            .tick(15 * s)
            .contains(&ClientEvent::PublishDone(tok, Err(PublishError::Timeout))));
        assert_eq!(c.inflight_len(), 0);
    }

    #[test]
    fn keep_alive_ping() {
        let mut o = opts("v");
        o.keep_alive = 10;
        let mut c = ClientCore::new(o.core_options());
        c.on_transport_up(0);
        c.handle(
            0,
            ControlPacket::Connack(crate::codec::Connack {
                session_present: false,
                return_code: 0,
            }),
        );
        let s = 1_000_000_000u64;
        assert_eq!(c.next_deadline(), Some(10 * s));
        assert_eq!(
            c.tick(10 * s),
            vec![ClientEvent::Transmit(ControlPacket::Pingreq)]
        );
        c.handle(11 * s, ControlPacket::Pingresp);
        assert!(c.tick(15 * s).is_empty());
        c.tick(20 * s);
        assert_eq!(c.tick(30 * s), vec![ClientEvent::Disconnect("no PINGRESP")]);
    }
}
