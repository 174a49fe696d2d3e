//! In-process publish/subscribe bus.
//!
//! Every subscriber of a topic receives the same `Arc<BusMessage>`; payload
//! bytes are never duplicated. Each subscription owns a bounded FIFO that
//! drops its oldest entry on overflow.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use bytes::Bytes;
use thiserror::Error;

use crate::trace::TracingBlock;

static NEXT_MESSAGE_ID: AtomicU64 = AtomicU64::new(1);

/// Unique identity of a published message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MessageId(pub u64);

impl MessageId {
    fn fresh() -> Self {
        MessageId(NEXT_MESSAGE_ID.fetch_add(1, Ordering::Relaxed))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BusMessage {
    pub id: MessageId,
    pub topic: String,
    pub type_tag: String,
    pub payload: Bytes,
    /// Probe trail of the sample this message belongs to, if traced.
    pub trace: Option<TracingBlock>,
}

impl BusMessage {
    pub fn new(
        topic: impl Into<String>,
        type_tag: impl Into<String>,
        payload: impl Into<Bytes>,
    ) -> Self {
        BusMessage {
            id: MessageId::fresh(),
            topic: topic.into(),
            type_tag: type_tag.into(),
            payload: payload.into(),
            trace: None,
        }
    }

    pub fn with_trace(mut self, trace: TracingBlock) -> Self {
        self.trace = Some(trace);
        self
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BusError {
    #[error("queue size must be at least 1")]
    ZeroQueue,
}

struct QueueState {
    items: VecDeque<Arc<BusMessage>>,
    closed: bool,
}

struct SubQueue {
    id: u64,
    capacity: usize,
    state: Mutex<QueueState>,
    ready: Condvar,
    drops: AtomicU64,
}

impl SubQueue {
    fn push(&self, msg: Arc<BusMessage>) {
        let mut st = self.state.lock().unwrap();
        if st.closed {
            return;
        }
        if st.items.len() == self.capacity {
            st.items.pop_front();
            self.drops.fetch_add(1, Ordering::Relaxed);
        }
        st.items.push_back(msg);
        drop(st);
        self.ready.notify_one();
    }

    fn close(&self) {
        self.state.lock().unwrap().closed = true;
        self.ready.notify_all();
    }
}

#[derive(Default)]
struct BusInner {
    topics: Mutex<HashMap<String, Vec<Arc<SubQueue>>>>,
    next_sub: AtomicU64,
}

#[derive(Clone, Default)]
pub struct LocalBus {
    inner: Arc<BusInner>,
}

impl std::fmt::Debug for LocalBus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let topics = self.inner.topics.lock().unwrap();
        f.debug_struct("LocalBus")
            .field("topics", &topics.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl LocalBus {
    pub fn new() -> Self {
        Self::default()
    }

    /// Hands `msg` to every current subscriber of its topic and returns how many there were.
    pub fn publish(&self, msg: BusMessage) -> usize {
        let msg = Arc::new(msg);
        let queues = {
            let topics = self.inner.topics.lock().unwrap();
            match topics.get(&msg.topic) {
                Some(q) => q.clone(),
                None => return 0,
            }
        };
        for q in &queues {
            q.push(Arc::clone(&msg));
        }
        queues.len()
    }

    /// Pull-style subscription; the caller drains it with `try_recv`/`recv`.
    pub fn subscribe(&self, topic: &str, queue_size: usize) -> Result<Subscription, BusError> {
        if queue_size == 0 {
            return Err(BusError::ZeroQueue);
        }
        let queue = Arc::new(SubQueue {
            id: self.inner.next_sub.fetch_add(1, Ordering::Relaxed),
            capacity: queue_size,
            state: Mutex::new(QueueState {
                items: VecDeque::new(),
                closed: false,
            }),
            ready: Condvar::new(),
            drops: AtomicU64::new(0),
        });
        self.inner
            .topics
            .lock()
            .unwrap()
            .entry(topic.to_owned())
            .or_default()
            .push(Arc::clone(&queue));
        Ok(Subscription {
            bus: self.clone(),
            topic: topic.to_owned(),
            queue,
        })
    }

    /// Push-style subscription: `sink` runs on a dedicated thread, one message at a time.
    pub fn subscribe_with<F>(
        &self,
        topic: &str,
        queue_size: usize,
        mut sink: F,
    ) -> Result<SinkHandle, BusError>
    where
        F: FnMut(Arc<BusMessage>) + Send + 'static,
    {
        let sub = self.subscribe(topic, queue_size)?;
        let queue = Arc::clone(&sub.queue);
        let stopped = Arc::new(AtomicBool::new(false));
        let thread = std::thread::Builder::new()
            .name(format!("bus:{topic}"))
            .spawn(move || {
                while let Some(msg) = sub.recv() {
                    sink(msg);
                }
            })
            .expect("spawn bus worker");
        Ok(SinkHandle {
            bus: self.clone(),
            topic: topic.to_owned(),
            queue,
            thread: Some(thread),
            stopped,
        })
    }

    fn remove(&self, topic: &str, id: u64) {
        let mut topics = self.inner.topics.lock().unwrap();
        if let Some(list) = topics.get_mut(topic) {
            list.retain(|q| q.id != id);
            if list.is_empty() {
                topics.remove(topic);
            }
        }
    }

    pub fn subscriber_count(&self, topic: &str) -> usize {
        self.inner
            .topics
            .lock()
            .unwrap()
            .get(topic)
            .map_or(0, Vec::len)
    }
}

pub struct Subscription {
    bus: LocalBus,
    topic: String,
    queue: Arc<SubQueue>,
}

impl Subscription {
    pub fn topic(&self) -> &str {
        &self.topic
    }

    pub fn try_recv(&self) -> Option<Arc<BusMessage>> {
        self.queue.state.lock().unwrap().items.pop_front()
    }

    /// Blocks until a message arrives; `None` once the subscription is closed and drained.
    pub fn recv(&self) -> Option<Arc<BusMessage>> {
        let mut st = self.queue.state.lock().unwrap();
        loop {
            if let Some(m) = st.items.pop_front() {
                return Some(m);
            }
            if st.closed {
                return None;
            }
            st = self.queue.ready.wait(st).unwrap();
        }
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Option<Arc<BusMessage>> {
        let st = self.queue.state.lock().unwrap();
        let (mut st, _) = self
            .queue
            .ready
            .wait_timeout_while(st, timeout, |s| s.items.is_empty() && !s.closed)
            .unwrap();
        st.items.pop_front()
    }

    pub fn len(&self) -> usize {
        self.queue.state.lock().unwrap().items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn drops(&self) -> u64 {
        self.queue.drops.load(Ordering::Relaxed)
    }

    pub fn unsubscribe(self) {}
}

impl Drop for Subscription {
    fn drop(&mut self) {
        self.bus.remove(&self.topic, self.queue.id);
        self.queue.close();
    }
}

/// Handle of a push-style subscription; dropping it stops further deliveries.
pub struct SinkHandle {
    bus: LocalBus,
    topic: String,
    queue: Arc<SubQueue>,
    thread: Option<JoinHandle<()>>,
    stopped: Arc<AtomicBool>,
}

impl SinkHandle {
    pub fn drops(&self) -> u64 {
        self.queue.drops.load(Ordering::Relaxed)
    }

    pub fn pending(&self) -> usize {
        self.queue.state.lock().unwrap().items.len()
    }

    pub fn unsubscribe(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if self.stopped.swap(true, Ordering::AcqRel) {
            return;
        }
        self.bus.remove(&self.topic, self.queue.id);
        self.queue.close();
        if let Some(t) = self.thread.take() {
            if t.thread().id() != std::thread::current().id() {
                let _ = t.join();
            }
        }
    }
}

impl Drop for SinkHandle {
    fn drop(&mut self) {
        self.stop();
    }
}
