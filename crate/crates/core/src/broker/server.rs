//! Tokio front end of [`BrokerCore`]: TCP and TLS listeners, per-client link
//! emulation and a JSON-lines packet log.
//!
//! All connections feed one routing task that owns the core, so subscription
//! changes and routing are serialized. A shaped client gets its uplink frames
//! held back in a per-connection FIFO and its downlink frames stamped with a
//! release time that the writer task honours.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use bytes::{Bytes, BytesMut};
use serde::Serialize;
use thiserror::Error;
use tokio::io::{AsyncWriteExt, ReadHalf, WriteHalf};
use tokio::net::TcpListener;
use tokio::sync::mpsc;
use tokio::task::{AbortHandle, JoinHandle};
use tokio_rustls::TlsAcceptor;

use super::{
    BrokerAction, BrokerConfig, BrokerConfigError, BrokerCore, ConnId, FrameKind, LinkShaper,
    ShapeDecision, Shaper, ShaperConfig,
};
use crate::codec::{encode_packet, ControlPacket};
use crate::net::{read_packet, BoxStream};
use crate::tls::{read_pem, server_config, TlsError};

#[derive(Debug, Error)]
pub enum BrokerServerError {
    #[error(transparent)]
    Config(#[from] BrokerConfigError),
    #[error("bind {addr}: {source}")]
    Bind {
        addr: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Tls(#[from] TlsError),
    #[error("packet log: {0}")]
    Log(std::io::Error),
}

enum Msg {
    Open {
        conn: ConnId,
        writer: mpsc::UnboundedSender<(u64, Bytes)>,
    },
    Reader {
        conn: ConnId,
        handle: AbortHandle,
    },
    Packet {
        conn: ConnId,
        packet: ControlPacket,
        down: Option<Box<Shaper>>,
    },
    Closed(ConnId),
}

#[derive(Serialize)]
struct LogLine<'a> {
    t_ns: u64,
    client_id: &'a str,
    dir: &'static str,
    packet: &'static str,
}

struct Conn {
    writer: mpsc::UnboundedSender<(u64, Bytes)>,
    down: Option<Shaper>,
    reader: Option<AbortHandle>,
}

struct Router {
    core: BrokerCore,
    conns: HashMap<ConnId, Conn>,
    origin: Instant,
    log: Option<BufWriter<File>>,
}

impl Router {
    fn now(&self) -> u64 {
        self.origin.elapsed().as_nanos() as u64
    }

    fn log(&mut self, conn: ConnId, dir: &'static str, p: &ControlPacket) {
        let now = self.now();
        let Some(w) = self.log.as_mut() else { return };
        let line = LogLine {
            t_ns: now,
            client_id: self.core.client_id(conn).unwrap_or(""),
            dir,
            packet: p.packet_type().name(),
        };
        if serde_json::to_writer(&mut *w, &line).is_ok() {
            let _ = w.write_all(b"\n");
        }
    }

    fn close(&mut self, conn: ConnId) {
        if let Some(c) = self.conns.remove(&conn) {
            if let Some(r) = c.reader {
                r.abort();
            }
        }
    }

    fn apply(&mut self, actions: Vec<BrokerAction>) {
        for a in actions {
            match a {
                BrokerAction::Send(conn, p) => {
                    self.log(conn, "out", &p);
                    let now = self.now();
                    let Some(c) = self.conns.get_mut(&conn) else {
                        continue;
                    };
                    let bytes = match encode_packet(&p) {
                        Ok(b) => b,
                        Err(e) => {
                            tracing::error!(error = %e, "cannot encode outgoing packet");
                            continue;
                        }
                    };
                    let at = match c
                        .down
                        .as_mut()
                        .map(|s| s.shape(bytes.len(), FrameKind::of(&p), now))
                    {
                        Some(ShapeDecision::Drop) => continue,
                        Some(ShapeDecision::Deliver(at)) => at,
                        None => 0,
                    };
                    let _ = c.writer.send((at, bytes));
                }
                BrokerAction::Close(conn, why) => {
                    tracing::debug!(conn, reason = ?why, "closing connection");
                    self.close(conn);
                }
            }
        }
    }

    fn handle(&mut self, msg: Msg) {
        match msg {
            Msg::Open { conn, writer } => {
                self.conns.insert(
                    conn,
                    Conn {
                        writer,
                        down: None,
                        reader: None,
                    },
                );
                let now = self.now();
                self.core.on_connection(conn, now);
            }
            Msg::Reader { conn, handle } => match self.conns.get_mut(&conn) {
                Some(c) => c.reader = Some(handle),
                None => handle.abort(),
            },
            Msg::Packet { conn, packet, down } => {
                let Some(c) = self.conns.get_mut(&conn) else {
                    return;
                };
                if down.is_some() {
                    c.down = down.map(|d| *d);
                }
                let now = self.now();
                let actions = self.core.handle_packet(conn, now, packet.clone());
                self.log(conn, "in", &packet);
                self.apply(actions);
            }
            Msg::Closed(conn) => {
                if self.conns.contains_key(&conn) {
                    self.core.on_disconnect(conn);
                    self.close(conn);
                }
            }
        }
    }
}

/// A running broker. Dropping it stops all its tasks.
pub struct BrokerServer {
    addr: SocketAddr,
    tls_addr: Option<SocketAddr>,
    tasks: Vec<JoinHandle<()>>,
}

impl BrokerServer {
    /// Binds the listeners of `cfg`. The TLS listener reads its certificate
    /// and key from the configured files.
    pub async fn start(cfg: &BrokerConfig) -> Result<Self, BrokerServerError> {
        let tls = match &cfg.tls {
            Some(t) => Some(server_config(&read_pem(&t.cert)?, &read_pem(&t.key)?)?),
            None => None,
        };
        Self::start_with_tls(cfg, tls).await
    }

    /// Like [`start`](Self::start) but with an explicit TLS server config for
    /// the TLS listener.
    pub async fn start_with_tls(
        cfg: &BrokerConfig,
        tls: Option<Arc<rustls::ServerConfig>>,
    ) -> Result<Self, BrokerServerError> {
        cfg.validate()?;
        let core = BrokerCore::new(cfg.options()?);
        let log = match &cfg.log {
            Some(p) => Some(BufWriter::new(
                File::create(p).map_err(BrokerServerError::Log)?,
            )),
            None => None,
        };
        let origin = Instant::now();
        let (tx, rx) = mpsc::unbounded_channel();
        let shapers = Arc::new(cfg.shapers.clone());
        let mut tasks = vec![tokio::spawn(route(
            Router {
                core,
                conns: HashMap::new(),
                origin,
                log,
            },
            rx,
        ))];

        let bind = |host: &str, port: u16| format!("{host}:{port}");
        let plain = bind(&cfg.listener.host, cfg.listener.port);
        let listener =
            TcpListener::bind(&plain)
                .await
                .map_err(|source| BrokerServerError::Bind {
                    addr: plain.clone(),
                    source,
                })?;
        let addr = listener
            .local_addr()
            .map_err(|source| BrokerServerError::Bind {
                addr: plain,
                source,
            })?;
        let ids = Arc::new(std::sync::atomic::AtomicU64::new(1));
        tasks.push(tokio::spawn(accept(
            listener,
            None,
            tx.clone(),
            shapers.clone(),
            ids.clone(),
            origin,
        )));

        let mut tls_addr = None;
        if let (Some(t), Some(server_cfg)) = (&cfg.tls, tls) {
            let a = bind(&t.host, t.port);
            let l = TcpListener::bind(&a)
                .await
                .map_err(|source| BrokerServerError::Bind {
                    addr: a.clone(),
                    source,
                })?;
            tls_addr = Some(
                l.local_addr()
                    .map_err(|source| BrokerServerError::Bind { addr: a, source })?,
            );
            tasks.push(tokio::spawn(accept(
                l,
                Some(TlsAcceptor::from(server_cfg)),
                tx,
                shapers,
                ids,
                origin,
            )));
        }
        tracing::info!(%addr, ?tls_addr, "broker listening");
        Ok(BrokerServer {
            addr,
            tls_addr,
            tasks,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn tls_addr(&self) -> Option<SocketAddr> {
        self.tls_addr
    }

    /// Resolves when the broker stops, which only happens on shutdown.
    pub async fn wait(mut self) {
        for t in self.tasks.drain(..) {
            let _ = t.await;
        }
    }

    pub fn shutdown(self) {}
}

impl Drop for BrokerServer {
    fn drop(&mut self) {
        for t in &self.tasks {
            t.abort();
        }
    }
}

async fn route(mut r: Router, mut rx: mpsc::UnboundedReceiver<Msg>) {
    loop {
        let deadline = r
            .core
            .next_deadline()
            .map(|d| r.origin + Duration::from_nanos(d));
        let sleep = async {
            match deadline {
                Some(d) => tokio::time::sleep_until(d.into()).await,
                None => std::future::pending().await,
            }
        };
        tokio::select! {
            msg = rx.recv() => {
                let Some(msg) = msg else { break };
                r.handle(msg);
                while let Ok(more) = rx.try_recv() {
                    r.handle(more);
                }
            }
            _ = sleep => {
                let now = r.now();
                let actions = r.core.tick(now);
                r.apply(actions);
            }
        }
        if let Some(w) = r.log.as_mut() {
            let _ = w.flush();
        }
    }
}

async fn accept(
    listener: TcpListener,
    tls: Option<TlsAcceptor>,
    tx: mpsc::UnboundedSender<Msg>,
    shapers: Arc<BTreeMap<String, ShaperConfig>>,
    ids: Arc<std::sync::atomic::AtomicU64>,
    origin: Instant,
) {
    loop {
        let (sock, peer) = match listener.accept().await {
            Ok(s) => s,
            Err(e) => {
                tracing::warn!(error = %e, "accept failed");
                tokio::time::sleep(Duration::from_millis(50)).await;
                continue;
            }
        };
        let _ = sock.set_nodelay(true);
        let conn = ids.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        let (tx, shapers, tls) = (tx.clone(), shapers.clone(), tls.clone());
        tokio::spawn(async move {
            let stream: BoxStream = match tls {
                Some(acc) => match acc.accept(sock).await {
                    Ok(s) => Box::new(s),
                    Err(e) => {
                        tracing::debug!(%peer, error = %e, "tls handshake failed");
                        return;
                    }
                },
                None => Box::new(sock),
            };
            serve(conn, stream, tx, shapers, origin);
        });
    }
}

fn serve(
    conn: ConnId,
    stream: BoxStream,
    tx: mpsc::UnboundedSender<Msg>,
    shapers: Arc<BTreeMap<String, ShaperConfig>>,
    origin: Instant,
) {
    let (rd, wr) = tokio::io::split(stream);
    let (wtx, wrx) = mpsc::unbounded_channel();
    if tx.send(Msg::Open { conn, writer: wtx }).is_err() {
        return;
    }
    tokio::spawn(write_loop(wr, wrx, origin));
    let reader = tokio::spawn(read_loop(conn, rd, tx.clone(), shapers, origin));
    let _ = tx.send(Msg::Reader {
        conn,
        handle: reader.abort_handle(),
    });
}

async fn write_loop(
    mut wr: WriteHalf<BoxStream>,
    mut rx: mpsc::UnboundedReceiver<(u64, Bytes)>,
    origin: Instant,
) {
    while let Some((at, bytes)) = rx.recv().await {
        if at > 0 {
            tokio::time::sleep_until((origin + Duration::from_nanos(at)).into()).await;
        }
        if wr.write_all(&bytes).await.is_err() {
            return;
        }
    }
    let _ = wr.shutdown().await;
}

async fn read_loop(
    conn: ConnId,
    mut rd: ReadHalf<BoxStream>,
    tx: mpsc::UnboundedSender<Msg>,
    shapers: Arc<BTreeMap<String, ShaperConfig>>,
    origin: Instant,
) {
    let mut buf = BytesMut::with_capacity(64 * 1024);
    let mut up: Option<Shaper> = None;
    let mut delayed: Option<mpsc::UnboundedSender<(u64, ControlPacket)>> = None;
    loop {
        let (packet, len) = match read_packet(&mut rd, &mut buf).await {
            Ok(Some(p)) => p,
            Ok(None) => break,
            Err(e) => {
                tracing::debug!(conn, error = %e, "connection read failed");
                break;
            }
        };
        if let (ControlPacket::Connect(c), None) = (&packet, &up) {
            let mut down = None;
            if let Some(cfg) = shapers.get(&c.client_id) {
                match LinkShaper::new(cfg.clone()) {
                    Ok(link) => {
                        up = Some(link.up);
                        down = Some(Box::new(link.down));
                        let (dtx, drx) = mpsc::unbounded_channel();
                        delayed = Some(dtx);
                        tokio::spawn(release_loop(conn, drx, tx.clone(), origin));
                    }
                    Err(e) => tracing::error!(client = %c.client_id, error = %e, "invalid shaper"),
                }
            }
            let _ = tx.send(Msg::Packet { conn, packet, down });
            continue;
        }
        match (up.as_mut(), delayed.as_ref()) {
            (Some(s), Some(d)) => {
                let now = origin.elapsed().as_nanos() as u64;
                if let ShapeDecision::Deliver(at) = s.shape(len, FrameKind::of(&packet), now) {
                    let _ = d.send((at, packet));
                }
            }
            _ => {
                let _ = tx.send(Msg::Packet {
                    conn,
                    packet,
                    down: None,
                });
            }
        }
    }
    if delayed.is_none() {
        let _ = tx.send(Msg::Closed(conn));
    }
}

/// Forwards shaped uplink frames at their release time, then reports the close.
async fn release_loop(
    conn: ConnId,
    mut rx: mpsc::UnboundedReceiver<(u64, ControlPacket)>,
    tx: mpsc::UnboundedSender<Msg>,
    origin: Instant,
) {
    while let Some((at, packet)) = rx.recv().await {
        tokio::time::sleep_until((origin + Duration::from_nanos(at)).into()).await;
        if tx
            .send(Msg::Packet {
                conn,
                packet,
                down: None,
            })
            .is_err()
        {
            return;
        }
    }
    let _ = tx.send(Msg::Closed(conn));
}
