//! Worker-to-coordinator event relay.
//!
//! Workers publish [`PubSubMessage`]s over a framed TCP stream. The
//! publisher buffers while the coordinator is unreachable and flushes in
//! order once a connection is available.

use std::collections::VecDeque;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use cvgrid_core::job::{JobEvent, SessionId};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, Notify};

use crate::wire::{framed, recv_json, send_json};

pub const DEFAULT_BUFFER_LIMIT: usize = 10_000;

/// An event addressed to the session that submitted its job.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PubSubMessage {
    pub session_id: SessionId,
    pub event: JobEvent,
    /// Broker delivery attempt that produced the event.
    #[serde(default = "first_attempt")]
    pub attempt: u32,
}

fn first_attempt() -> u32 {
    1
}

struct Shared {
    queue: Mutex<VecDeque<PubSubMessage>>,
    wake: Notify,
    dropped: AtomicU64,
    sent: AtomicU64,
    closed: AtomicBool,
    limit: usize,
}

/// Buffered, ordered publisher. Clones share the buffer and connection.
#[derive(Clone)]
pub struct RelayPublisher {
    shared: Arc<Shared>,
}

impl std::fmt::Debug for RelayPublisher {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RelayPublisher")
            .field("pending", &self.pending())
            .field("dropped", &self.dropped())
            .finish()
    }
}

impl RelayPublisher {
    /// Starts the background sender for `addr`. Must be called within a Tokio runtime.
    pub fn spawn(addr: SocketAddr, limit: usize) -> Self {
        let shared = Arc::new(Shared {
            queue: Mutex::new(VecDeque::new()),
            wake: Notify::new(),
            dropped: AtomicU64::new(0),
            sent: AtomicU64::new(0),
            closed: AtomicBool::new(false),
            limit: limit.max(1),
        });
        let bg = shared.clone();
        tokio::spawn(async move { sender_loop(addr, bg).await });
        RelayPublisher { shared }
    }

    /// Queues `msg` for delivery. Never blocks; when the buffer is full the
    /// oldest pending message is discarded.
    pub fn publish(&self, msg: PubSubMessage) {
        if self.shared.closed.load(Ordering::SeqCst) {
            return;
        }
        {
            let mut q = self.shared.queue.lock();
            if q.len() >= self.shared.limit {
                q.pop_front();
                let total = self.shared.dropped.fetch_add(1, Ordering::SeqCst) + 1;
                tracing::warn!(dropped_total = total, limit = self.shared.limit, "relay buffer full, dropped oldest event");
            }
            q.push_back(msg);
        }
        self.shared.wake.notify_one();
    }

    pub fn pending(&self) -> usize {
        self.shared.queue.lock().len()
    }

    pub fn dropped(&self) -> u64 {
        self.shared.dropped.load(Ordering::SeqCst)
    }

    pub fn sent(&self) -> u64 {
        self.shared.sent.load(Ordering::SeqCst)
    }

    /// Stops the sender; pending and future messages are discarded.
    pub fn close(&self) {
        self.shared.closed.store(true, Ordering::SeqCst);
        self.shared.queue.lock().clear();
        self.shared.wake.notify_one();
    }

    /// Waits until everything queued so far has been written, or `timeout` passes.
    pub async fn flush(&self, timeout: Duration) -> bool {
        let deadline = tokio::time::Instant::now() + timeout;
        while self.pending() > 0 {
            if tokio::time::Instant::now() >= deadline {
                return false;
            }
            tokio::time::sleep(Duration::from_millis(5)).await;
        }
        true
    }
}

async fn sender_loop(addr: SocketAddr, shared: Arc<Shared>) {
    let mut backoff = Duration::from_millis(20);
    'connect: loop {
        if shared.closed.load(Ordering::SeqCst) {
            return;
        }
        let stream = match TcpStream::connect(addr).await {
            Ok(s) => s,
            Err(e) => {
                tracing::debug!(error = %e, %addr, "relay unreachable, buffering");
                tokio::time::sleep(backoff).await;
                backoff = (backoff * 2).min(Duration::from_millis(500));
                continue;
            }
        };
        stream.set_nodelay(true).ok();
        backoff = Duration::from_millis(20);
        let mut io = framed(stream);
        loop {
            let next = shared.queue.lock().front().cloned();
            let Some(msg) = next else {
                if shared.closed.load(Ordering::SeqCst) {
                    return;
                }
                shared.wake.notified().await;
                continue;
            };
            if let Err(e) = send_json(&mut io, &msg).await {
                tracing::debug!(error = %e, "relay connection lost");
                continue 'connect;
            }
            // Only the sender pops, so the front is still `msg` unless the
            // buffer overflowed meanwhile.
            let mut q = shared.queue.lock();
            if q.front() == Some(&msg) {
                q.pop_front();
            }
            shared.sent.fetch_add(1, Ordering::SeqCst);
        }
    }
}

/// Accepts relay connections and forwards decoded messages into `tx`.
pub async fn serve_relay(listener: TcpListener, tx: mpsc::UnboundedSender<PubSubMessage>) {
    loop {
        let Ok((stream, peer)) = listener.accept().await else {
            continue;
        };
        let tx = tx.clone();
        tokio::spawn(async move {
            let mut io = framed(stream);
            loop {
                match recv_json::<PubSubMessage>(&mut io).await {
                    Ok(Some(msg)) => {
                        if tx.send(msg).is_err() {
                            return;
                        }
                    }
                    Ok(None) => return,
                    Err(e) => {
                        tracing::debug!(error = %e, %peer, "relay stream error");
                        return;
                    }
                }
            }
        });
    }
}
