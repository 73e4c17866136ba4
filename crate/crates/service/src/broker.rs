//! In-memory message broker: one direct exchange, named queues, and
//! competing consumers with acknowledgements.
//!
//! A popped message moves to the queue's unacked table until its consumer
//! acks it. Nacks, consumer death, and expired visibility deadlines put it
//! back at the head of the buffer, so delivery is at least once.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use cvgrid_core::job::Functionality;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Notify;

pub const DEFAULT_VISIBILITY_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, Error, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "code", content = "detail", rename_all = "snake_case")]
pub enum BrokerError {
    #[error("routing key `{key}` is already bound to `{existing}`")]
    BindingConflict { key: String, existing: String },
    #[error("no binding for routing key `{0}`")]
    UnroutableKey(String),
    #[error("queue `{0}` does not exist")]
    QueueMissing(String),
    #[error("unknown delivery tag {0}")]
    UnknownTag(u64),
    #[error("delivery tag {0} is owned by another consumer")]
    NotOwner(u64),
    #[error("queue name must be non-empty")]
    EmptyQueueName,
    #[error("broker unreachable: {0}")]
    Unreachable(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConsumerId(pub String);

impl fmt::Display for ConsumerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Binding {
    pub routing_key: String,
    pub queue_name: String,
}

/// The bindings every coordinator installs at start-up.
pub fn default_bindings() -> Vec<Binding> {
    let queue = |f: Functionality| match f {
        Functionality::ImageStitch => "stitching.cpu",
        Functionality::Classify | Functionality::Features | Functionality::Vip => "classification.gpu",
    };
    Functionality::ALL
        .iter()
        .map(|f| Binding {
            routing_key: f.name().to_string(),
            queue_name: queue(*f).to_string(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublishReceipt {
    pub queue: String,
    pub depth: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Delivery {
    pub tag: u64,
    pub payload: String,
    /// 1 on first delivery, incremented on each redelivery.
    pub attempt: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueStats {
    pub published: u64,
    pub buffered: usize,
    pub unacked: usize,
    pub acked: u64,
    pub redelivered: u64,
}

#[derive(Debug, Clone)]
struct Message {
    payload: String,
    deliveries: u32,
}

#[derive(Debug)]
struct Unacked {
    message: Message,
    consumer: ConsumerId,
    deadline: Instant,
}

#[derive(Debug, Default)]
struct QueueState {
    buffer: VecDeque<Message>,
    unacked: BTreeMap<u64, Unacked>,
    stats: QueueStats,
}

impl QueueState {
    fn requeue(&mut self, tags: Vec<u64>) {
        // Later tags go in first so the earliest delivery ends up at the head.
        for tag in tags.into_iter().rev() {
            if let Some(u) = self.unacked.remove(&tag) {
                self.buffer.push_front(u.message);
                self.stats.redelivered += 1;
            }
        }
    }
}

#[derive(Debug, Default)]
struct State {
    bindings: BTreeMap<String, String>,
    queues: BTreeMap<String, QueueState>,
    next_tag: u64,
}

/// Thread-safe broker handle; clones share state.
#[derive(Clone)]
pub struct Broker {
    state: Arc<Mutex<State>>,
    available: Arc<Notify>,
    visibility: Duration,
}

impl fmt::Debug for Broker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Broker").field("visibility", &self.visibility).finish()
    }
}

impl Default for Broker {
    fn default() -> Self {
        Broker::new(DEFAULT_VISIBILITY_TIMEOUT)
    }
}

impl Broker {
    pub fn new(visibility: Duration) -> Self {
        Broker {
            state: Arc::new(Mutex::new(State {
                next_tag: 1,
                ..State::default()
            })),
            available: Arc::new(Notify::new()),
            visibility,
        }
    }

    pub fn with_default_bindings(visibility: Duration) -> Self {
        let broker = Broker::new(visibility);
        for b in default_bindings() {
            broker
                .declare_and_bind(&b.queue_name, &b.routing_key)
                .expect("default bindings are consistent");
        }
        broker
    }

    /// Creates `queue_name` if needed and binds `routing_key` to it. Idempotent.
    pub fn declare_and_bind(&self, queue_name: &str, routing_key: &str) -> Result<(), BrokerError> {
        if queue_name.is_empty() {
            return Err(BrokerError::EmptyQueueName);
        }
        let mut st = self.state.lock();
        if let Some(existing) = st.bindings.get(routing_key) {
            if existing != queue_name {
                return Err(BrokerError::BindingConflict {
                    key: routing_key.to_string(),
                    existing: existing.clone(),
                });
            }
        }
        st.queues.entry(queue_name.to_string()).or_default();
        st.bindings.insert(routing_key.to_string(), queue_name.to_string());
        Ok(())
    }

    pub fn bindings(&self) -> Vec<Binding> {
        self.state
            .lock()
            .bindings
            .iter()
            .map(|(k, q)| Binding {
                routing_key: k.clone(),
                queue_name: q.clone(),
            })
            .collect()
    }

    pub fn publish(&self, routing_key: &str, payload: impl Into<String>) -> Result<PublishReceipt, BrokerError> {
        let receipt = {
            let mut st = self.state.lock();
            let queue = st
                .bindings
                .get(routing_key)
                .cloned()
                .ok_or_else(|| BrokerError::UnroutableKey(routing_key.to_string()))?;
            let q = st.queues.get_mut(&queue).expect("bound queues exist");
            q.buffer.push_back(Message {
                payload: payload.into(),
                deliveries: 0,
            });
            q.stats.published += 1;
            PublishReceipt {
                depth: q.buffer.len(),
                queue,
            }
        };
        self.available.notify_waiters();
        Ok(receipt)
    }

    /// Non-blocking pop: `None` when the buffer is empty.
    pub fn pop(&self, queue: &str, consumer: &ConsumerId) -> Result<Option<Delivery>, BrokerError> {
        let now = Instant::now();
        let mut st = self.state.lock();
        let tag = st.next_tag;
        let q = st
            .queues
            .get_mut(queue)
            .ok_or_else(|| BrokerError::QueueMissing(queue.to_string()))?;
        Self::expire_queue(q, now);
        let Some(mut message) = q.buffer.pop_front() else {
            return Ok(None);
        };
        message.deliveries += 1;
        let delivery = Delivery {
            tag,
            payload: message.payload.clone(),
            attempt: message.deliveries,
        };
        q.unacked.insert(
            tag,
            Unacked {
                message,
                consumer: consumer.clone(),
                deadline: now + self.visibility,
            },
        );
        st.next_tag += 1;
        Ok(Some(delivery))
    }

    /// Pops, waiting up to `wait` for a message to arrive.
    pub async fn pop_wait(
        &self,
        queue: &str,
        consumer: &ConsumerId,
        wait: Duration,
    ) -> Result<Option<Delivery>, BrokerError> {
        let deadline = tokio::time::Instant::now() + wait;
        loop {
            let notified = self.available.notified();
            tokio::pin!(notified);
            notified.as_mut().enable();
            if let Some(d) = self.pop(queue, consumer)? {
                return Ok(Some(d));
            }
            // Deadlines expire without a notification, so poll at least once a second.
            let step = (tokio::time::Instant::now() + Duration::from_secs(1)).min(deadline);
            if tokio::time::timeout_at(step, notified).await.is_err() && tokio::time::Instant::now() >= deadline {
                return self.pop(queue, consumer);
            }
        }
    }

    fn owned<'q>(q: &'q mut QueueState, tag: u64, consumer: &ConsumerId) -> Result<&'q mut Unacked, BrokerError> {
        match q.unacked.get_mut(&tag) {
            None => Err(BrokerError::UnknownTag(tag)),
            Some(u) if &u.consumer != consumer => Err(BrokerError::NotOwner(tag)),
            Some(u) => Ok(u),
        }
    }

    pub fn ack(&self, queue: &str, consumer: &ConsumerId, tag: u64) -> Result<(), BrokerError> {
        let mut st = self.state.lock();
        let q = st
            .queues
            .get_mut(queue)
            .ok_or_else(|| BrokerError::QueueMissing(queue.to_string()))?;
        Self::owned(q, tag, consumer)?;
        q.unacked.remove(&tag);
        q.stats.acked += 1;
        Ok(())
    }

    /// Rejects a delivery; the message returns to the head of its queue.
    pub fn nack(&self, queue: &str, consumer: &ConsumerId, tag: u64) -> Result<(), BrokerError> {
        {
            let mut st = self.state.lock();
            let q = st
                .queues
                .get_mut(queue)
                .ok_or_else(|| BrokerError::QueueMissing(queue.to_string()))?;
            Self::owned(q, tag, consumer)?;
            q.requeue(vec![tag]);
        }
        self.available.notify_waiters();
        Ok(())
    }

    /// Extends the visibility deadline of every delivery held by `consumer`.
    pub fn heartbeat(&self, consumer: &ConsumerId) -> usize {
        let deadline = Instant::now() + self.visibility;
        let mut st = self.state.lock();
        let mut held = 0;
        for q in st.queues.values_mut() {
            for u in q.unacked.values_mut().filter(|u| &u.consumer == consumer) {
                u.deadline = deadline;
                held += 1;
            }
        }
        held
    }

    /// Treats `consumer` as dead: all of its unacked deliveries are requeued.
    pub fn release_consumer(&self, consumer: &ConsumerId) -> usize {
        let mut released = 0;
        {
            let mut st = self.state.lock();
            for q in st.queues.values_mut() {
                let tags: Vec<u64> = q
                    .unacked
                    .iter()
                    .filter(|(_, u)| &u.consumer == consumer)
                    .map(|(t, _)| *t)
                    .collect();
                released += tags.len();
                q.requeue(tags);
            }
        }
        if released > 0 {
            self.available.notify_waiters();
        }
        released
    }

    fn expire_queue(q: &mut QueueState, now: Instant) -> usize {
        let expired: Vec<u64> = q
            .unacked
            .iter()
            .filter(|(_, u)| u.deadline <= now)
            .map(|(t, _)| *t)
            .collect();
        let n = expired.len();
        if n > 0 {
            tracing::warn!(count = n, "visibility deadline expired, requeueing");
            q.requeue(expired);
        }
        n
    }

    /// Requeues deliveries whose visibility deadline passed.
    pub fn expire_deadlines(&self) -> usize {
        let now = Instant::now();
        let n: usize = self
            .state
            .lock()
            .queues
            .values_mut()
            .map(|q| Self::expire_queue(q, now))
            .sum();
        if n > 0 {
            self.available.notify_waiters();
        }
        n
    }

    pub fn stats(&self, queue: &str) -> Result<QueueStats, BrokerError> {
        let st = self.state.lock();
        let q = st
            .queues
            .get(queue)
            .ok_or_else(|| BrokerError::QueueMissing(queue.to_string()))?;
        Ok(QueueStats {
            buffered: q.buffer.len(),
            unacked: q.unacked.len(),
            ..q.stats
        })
    }

    pub fn all_stats(&self) -> BTreeMap<String, QueueStats> {
        let names: Vec<String> = self.state.lock().queues.keys().cloned().collect();
        names
            .into_iter()
            .filter_map(|n| self.stats(&n).ok().map(|s| (n, s)))
            .collect()
    }

    /// Payloads currently buffered in `queue`, head first.
    pub fn peek_buffer(&self, queue: &str) -> Result<Vec<String>, BrokerError> {
        let st = self.state.lock();
        let q = st
            .queues
            .get(queue)
            .ok_or_else(|| BrokerError::QueueMissing(queue.to_string()))?;
        Ok(q.buffer.iter().map(|m| m.payload.clone()).collect())
    }

    /// Number of consumers holding deliveries, for diagnostics.
    pub fn consumers(&self) -> HashMap<ConsumerId, usize> {
        let st = self.state.lock();
        let mut out = HashMap::new();
        for q in st.queues.values() {
            for u in q.unacked.values() {
                *out.entry(u.consumer.clone()).or_insert(0) += 1;
            }
        }
        out
    }
}
