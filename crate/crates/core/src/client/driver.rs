//! Tokio driver around [`ClientCore`]: owns the socket, reconnects with
//! exponential backoff and completes publish and subscribe handles.

use std::collections::HashMap;
use std::future::Future;
use std::pin::Pin;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::task::{Context, Poll};
use std::time::{Duration, Instant};

use bytes::{Bytes, BytesMut};
use rustls::pki_types::ServerName;
use tokio::io::{AsyncWriteExt, WriteHalf};
use tokio::net::TcpStream;
use tokio::sync::{mpsc, oneshot};
use tokio_rustls::TlsConnector;

use super::{
    ClientCore, ClientError, ClientEvent, ClientOptions, PublishError, PublishToken, SubscribeToken,
};
use crate::codec::{encode_packet, ControlPacket, Publish, QosLevel, TopicFilter, TopicName};
use crate::net::{read_packet, BoxStream};
use crate::tls::{client_config, read_pem};

const CONNECT_TIMEOUT: Duration = Duration::from_secs(5);

type Sink = Box<dyn FnMut(Publish) + Send>;

enum Cmd {
    Publish {
        topic: TopicName,
        payload: Bytes,
        qos: QosLevel,
        done: oneshot::Sender<Result<(), PublishError>>,
    },
    Subscribe {
        filter: TopicFilter,
        qos: QosLevel,
        sink: Sink,
        done: oneshot::Sender<Result<QosLevel, ClientError>>,
    },
    Disconnect {
        done: oneshot::Sender<()>,
    },
}

/// Completion of one publish: handed to the transport (QoS 0), PUBACK (QoS 1)
/// or PUBCOMP (QoS 2).
pub struct PublishHandle(oneshot::Receiver<Result<(), PublishError>>);

impl PublishHandle {
    /// Blocks the calling thread. Must not be called from async code.
    pub fn wait(self) -> Result<(), PublishError> {
        self.0.blocking_recv().unwrap_or(Err(PublishError::Closed))
    }
}

impl Future for PublishHandle {
    type Output = Result<(), PublishError>;

    fn poll(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<Self::Output> {
        Pin::new(&mut self.0)
            .poll(cx)
            .map(|r| r.unwrap_or(Err(PublishError::Closed)))
    }
}

/// Handle to a connected client; cheap to clone and usable from any thread.
#[derive(Clone)]
pub struct MqttClient {
    cmd: mpsc::UnboundedSender<Cmd>,
    reconnects: Arc<AtomicU64>,
    online: Arc<AtomicBool>,
}

impl std::fmt::Debug for MqttClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MqttClient")
            .field("online", &self.is_online())
            .field("reconnects", &self.reconnects())
            .finish()
    }
}

impl MqttClient {
    /// Connects using the TLS settings of `opts` (trusting `opts.ca_cert`).
    pub async fn connect(opts: ClientOptions) -> Result<Self, ClientError> {
        let tls = if opts.tls {
            let path = opts
                .ca_cert
                .as_ref()
                .ok_or(ClientError::InvalidOptions("tls needs ca_cert"))?;
            let pem = read_pem(path).map_err(|e| ClientError::Tls(e.to_string()))?;
            Some(client_config(&pem).map_err(|e| ClientError::Tls(e.to_string()))?)
        } else {
            None
        };
        Self::connect_with(opts, tls).await
    }

    /// Connects with an explicit TLS config; `None` means plaintext. Returns
    /// once the first CONNACK arrives. With reconnect enabled, an unreachable
    /// broker is retried until it answers.
    pub async fn connect_with(
        opts: ClientOptions,
        tls: Option<Arc<rustls::ClientConfig>>,
    ) -> Result<Self, ClientError> {
        opts.validate()?;
        let (tx, rx) = mpsc::unbounded_channel();
        let (ctx, crx) = oneshot::channel();
        let client = MqttClient {
            cmd: tx,
            reconnects: Arc::default(),
            online: Arc::default(),
        };
        let driver = Driver {
            core: ClientCore::new(opts.core_options()),
            opts,
            tls,
            origin: Instant::now(),
            publishes: HashMap::new(),
            subscribes: HashMap::new(),
            sinks: Vec::new(),
            connected: Some(ctx),
            reconnects: client.reconnects.clone(),
            online: client.online.clone(),
        };
        tokio::spawn(driver.run(rx));
        crx.await.unwrap_or(Err(ClientError::Closed))?;
        Ok(client)
    }

    pub fn publish(
        &self,
        topic: &str,
        payload: impl Into<Bytes>,
        qos: QosLevel,
    ) -> Result<PublishHandle, ClientError> {
        let topic = TopicName::new(topic).map_err(ClientError::InvalidTopic)?;
        let (done, rx) = oneshot::channel();
        self.cmd
            .send(Cmd::Publish {
                topic,
                payload: payload.into(),
                qos,
                done,
            })
            .map_err(|_| ClientError::Closed)?;
        Ok(PublishHandle(rx))
    }

    /// Subscribes and routes matching messages to `sink`, which is called
    /// sequentially in delivery order.
    pub async fn subscribe<F>(
        &self,
        filter: &str,
        qos: QosLevel,
        sink: F,
    ) -> Result<QosLevel, ClientError>
    where
        F: FnMut(Publish) + Send + 'static,
    {
        let filter = TopicFilter::new(filter).map_err(ClientError::InvalidFilter)?;
        let (done, rx) = oneshot::channel();
        self.cmd
            .send(Cmd::Subscribe {
                filter,
                qos,
                sink: Box::new(sink),
                done,
            })
            .map_err(|_| ClientError::Closed)?;
        rx.await.unwrap_or(Err(ClientError::Closed))
    }

    pub async fn disconnect(&self) {
        let (done, rx) = oneshot::channel();
        if self.cmd.send(Cmd::Disconnect { done }).is_ok() {
            let _ = rx.await;
        }
    }

    /// Sessions re-established after a lost connection.
    pub fn reconnects(&self) -> u64 {
        self.reconnects.load(Ordering::Relaxed)
    }

    pub fn is_online(&self) -> bool {
        self.online.load(Ordering::Relaxed)
    }
}

enum End {
    /// Disconnect requested or every handle dropped.
    User,
    Refused(u8),
    Broken,
}

struct Driver {
    opts: ClientOptions,
    tls: Option<Arc<rustls::ClientConfig>>,
    core: ClientCore,
    origin: Instant,
    publishes: HashMap<PublishToken, oneshot::Sender<Result<(), PublishError>>>,
    subscribes: HashMap<SubscribeToken, oneshot::Sender<Result<QosLevel, ClientError>>>,
    sinks: Vec<(TopicFilter, Sink)>,
    connected: Option<oneshot::Sender<Result<(), ClientError>>>,
    reconnects: Arc<AtomicU64>,
    online: Arc<AtomicBool>,
}

impl Driver {
    fn now(&self) -> u64 {
        self.origin.elapsed().as_nanos() as u64
    }
}

async fn open(
    opts: &ClientOptions,
    tls: Option<&Arc<rustls::ClientConfig>>,
) -> Result<BoxStream, ClientError> {
    let net = |e: std::io::Error| ClientError::Network(e.to_string());
    let addr = (opts.broker_host.as_str(), opts.broker_port);
    let tcp = tokio::time::timeout(CONNECT_TIMEOUT, TcpStream::connect(addr))
        .await
        .map_err(|_| ClientError::Network("connect timed out".into()))?
        .map_err(net)?;
    let _ = tcp.set_nodelay(true);
    match tls {
        None => Ok(Box::new(tcp)),
        Some(cfg) => {
            let name = ServerName::try_from(opts.broker_host.clone())
                .map_err(|e| ClientError::Tls(e.to_string()))?;
            let s = TlsConnector::from(cfg.clone())
                .connect(name, tcp)
                .await
                .map_err(|e| ClientError::Tls(e.to_string()))?;
            Ok(Box::new(s))
        }
    }
}

impl Driver {
    fn fail_all(&mut self, err: ClientError) {
        if let Some(c) = self.connected.take() {
            let _ = c.send(Err(err.clone()));
        }
        for (_, d) in self.publishes.drain() {
            let _ = d.send(Err(PublishError::Closed));
        }
        for (_, d) in self.subscribes.drain() {
            let _ = d.send(Err(err.clone()));
        }
    }

    async fn run(mut self, mut rx: mpsc::UnboundedReceiver<Cmd>) {
        let policy = self.opts.reconnect;
        let mut backoff = policy.backoff_initial_ms;
        let mut ever_online = false;
        loop {
            let failure = match open(&self.opts, self.tls.as_ref()).await {
                Ok(stream) => {
                    let end = self.session(stream, &mut rx).await;
                    self.online.store(false, Ordering::Relaxed);
                    self.core.on_transport_down();
                    match end {
                        End::User => {
                            self.fail_all(ClientError::Closed);
                            return;
                        }
                        End::Refused(code) => {
                            self.fail_all(ClientError::AuthFailure(code));
                            return;
                        }
                        End::Broken => {}
                    }
                    if self.connected.is_none() {
                        ever_online = true;
                        backoff = policy.backoff_initial_ms;
                    }
                    ClientError::Network("connection lost".into())
                }
                Err(e) => e,
            };
            if !policy.enabled {
                self.fail_all(failure);
                return;
            }
            tracing::debug!(client = %self.opts.client_id, error = %failure, backoff, "reconnecting");
            let resume = tokio::time::Instant::now() + Duration::from_millis(backoff);
            loop {
                tokio::select! {
                    cmd = rx.recv() => match cmd {
                        None | Some(Cmd::Disconnect { .. }) => {
                            self.fail_all(ClientError::Closed);
                            return;
                        }
                        Some(c) => {
                            let evs = self.command(c);
                            self.offline_events(evs);
                        }
                    },
                    _ = tokio::time::sleep_until(resume) => break,
                }
            }
            backoff = (backoff.saturating_mul(2)).min(policy.backoff_max_ms);
            if ever_online {
                self.reconnects.fetch_add(1, Ordering::Relaxed);
                ever_online = false;
            }
        }
    }

    fn command(&mut self, c: Cmd) -> Vec<ClientEvent> {
        let now = self.now();
        match c {
            Cmd::Publish {
                topic,
                payload,
                qos,
                done,
            } => {
                let (token, evs) = self.core.publish(now, topic, payload, qos);
                self.publishes.insert(token, done);
                evs
            }
            Cmd::Subscribe {
                filter,
                qos,
                sink,
                done,
            } => {
                self.sinks.push((filter.clone(), sink));
                match self.core.subscribe(now, filter.as_str(), qos) {
                    Ok((token, evs)) => {
                        self.subscribes.insert(token, done);
                        evs
                    }
                    Err(e) => {
                        let _ = done.send(Err(e));
                        Vec::new()
                    }
                }
            }
            Cmd::Disconnect { done } => {
                let _ = done.send(());
                Vec::new()
            }
        }
    }

    /// Completions that do not need a transport.
    fn offline_events(&mut self, evs: Vec<ClientEvent>) {
        for ev in evs {
            if let ClientEvent::PublishDone(t, r) = ev {
                if let Some(d) = self.publishes.remove(&t) {
                    let _ = d.send(r);
                }
            }
        }
    }

    async fn process(
        &mut self,
        evs: Vec<ClientEvent>,
        wr: &mut WriteHalf<BoxStream>,
    ) -> Result<(), End> {
        for ev in evs {
            match ev {
                ClientEvent::Transmit(p) => {
                    let bytes = encode_packet(&p).map_err(|e| {
                        tracing::error!(error = %e, "cannot encode packet");
                        End::Broken
                    })?;
                    wr.write_all(&bytes).await.map_err(|_| End::Broken)?;
                }
                ClientEvent::Connected { .. } => {
                    self.online.store(true, Ordering::Relaxed);
                    if let Some(c) = self.connected.take() {
                        let _ = c.send(Ok(()));
                    }
                }
                ClientEvent::Refused(code) => return Err(End::Refused(code)),
                ClientEvent::Message(p) => {
                    for (f, sink) in self.sinks.iter_mut() {
                        if f.matches(&p.topic) {
                            sink(p.clone());
                        }
                    }
                }
                ClientEvent::PublishDone(t, r) => {
                    if let Some(d) = self.publishes.remove(&t) {
                        let _ = d.send(r);
                    }
                }
                ClientEvent::Subscribed(t, r) => {
                    if let Some(d) = self.subscribes.remove(&t) {
                        let _ = d.send(r);
                    }
                }
                ClientEvent::Disconnect(why) => {
                    tracing::debug!(client = %self.opts.client_id, why, "dropping connection");
                    return Err(End::Broken);
                }
            }
        }
        Ok(())
    }

    async fn session(&mut self, stream: BoxStream, rx: &mut mpsc::UnboundedReceiver<Cmd>) -> End {
        let (mut rd, mut wr) = tokio::io::split(stream);
        let evs = self.core.on_transport_up(self.now());
        if let Err(end) = self.process(evs, &mut wr).await {
            return end;
        }
        let mut buf = BytesMut::with_capacity(64 * 1024);
        loop {
            let deadline = self
                .core
                .next_deadline()
                .map(|d| self.origin + Duration::from_nanos(d));
            let sleep = async {
                match deadline {
                    Some(d) => tokio::time::sleep_until(d.into()).await,
                    None => std::future::pending().await,
                }
            };
            let evs = tokio::select! {
                r = read_packet(&mut rd, &mut buf) => match r {
                    Ok(Some((p, _))) => self.core.handle(self.now(), p),
                    _ => return End::Broken,
                },
                cmd = rx.recv() => match cmd {
                    None => return End::User,
                    Some(Cmd::Disconnect { done }) => {
                        if let Ok(b) = encode_packet(&ControlPacket::Disconnect) {
                            let _ = wr.write_all(&b).await;
                        }
                        let _ = wr.shutdown().await;
                        let _ = done.send(());
                        return End::User;
                    }
                    Some(c) => self.command(c),
                },
                _ = sleep => self.core.tick(self.now()),
            };
            if let Err(end) = self.process(evs, &mut wr).await {
                return end;
            }
        }
    }
}
