//! Length-prefixed frame transport and the broker's network protocol.
//!
//! Every frame is a 4-byte big-endian length followed by a UTF-8 JSON body.
//! A broker connection is one consumer: deliveries it pops are owned by the
//! connection and requeued when the connection closes.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use bytes::Bytes;
use futures::{SinkExt, StreamExt};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::net::{TcpListener, TcpStream, ToSocketAddrs};
use tokio_util::codec::{Framed, LengthDelimitedCodec};

use crate::broker::{Binding, Broker, BrokerError, ConsumerId, Delivery, PublishReceipt};

pub type FramedStream = Framed<TcpStream, LengthDelimitedCodec>;

pub const MAX_FRAME: usize = 64 * 1024 * 1024;

pub fn framed(stream: TcpStream) -> FramedStream {
    let codec = LengthDelimitedCodec::builder()
        .length_field_length(4)
        .big_endian()
        .max_frame_length(MAX_FRAME)
        .new_codec();
    Framed::new(stream, codec)
}

pub async fn send_json<T: Serialize>(io: &mut FramedStream, value: &T) -> std::io::Result<()> {
    let body = serde_json::to_vec(value).map_err(std::io::Error::other)?;
    io.send(Bytes::from(body)).await
}

/// Next frame decoded as `T`; `Ok(None)` on clean end of stream.
pub async fn recv_json<T: DeserializeOwned>(io: &mut FramedStream) -> std::io::Result<Option<T>> {
    match io.next().await {
        None => Ok(None),
        Some(frame) => {
            let frame = frame?;
            serde_json::from_slice(&frame)
                .map(Some)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
        }
    }
}

/// One broker protocol frame, used for both requests and responses.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub op: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queue: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub routing_key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wait_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attempt: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consumer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bindings: Option<Vec<Binding>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<BrokerError>,
}

impl Frame {
    fn op(op: &str) -> Self {
        Frame {
            op: op.to_string(),
            ..Frame::default()
        }
    }

    fn error(e: BrokerError) -> Self {
        Frame {
            error: Some(e),
            ..Frame::op("error")
        }
    }
}

static CONNECTIONS: AtomicU64 = AtomicU64::new(1);

/// Accepts broker connections until the listener task is dropped.
pub async fn serve_broker(listener: TcpListener, broker: Broker) {
    loop {
        let (stream, peer) = match listener.accept().await {
            Ok(conn) => conn,
            Err(e) => {
                tracing::warn!(error = %e, "broker accept failed");
                continue;
            }
        };
        let broker = broker.clone();
        tokio::spawn(async move {
            let n = CONNECTIONS.fetch_add(1, Ordering::Relaxed);
            let mut consumer = ConsumerId(format!("conn-{n}@{peer}"));
            let mut io = framed(stream);
            loop {
                let req: Frame = match recv_json(&mut io).await {
                    Ok(Some(f)) => f,
                    Ok(None) => break,
                    Err(e) => {
                        tracing::debug!(error = %e, %consumer, "broker connection error");
                        break;
                    }
                };
                if req.op == "hello" {
                    if let Some(name) = &req.consumer {
                        consumer = ConsumerId(format!("{name}#{n}"));
                    }
                }
                let resp = handle(&broker, &consumer, req).await;
                if send_json(&mut io, &resp).await.is_err() {
                    break;
                }
            }
            let released = broker.release_consumer(&consumer);
            if released > 0 {
                tracing::info!(%consumer, released, "consumer gone, deliveries requeued");
            }
        });
    }
}

async fn handle(broker: &Broker, consumer: &ConsumerId, req: Frame) -> Frame {
    let queue = req.queue.clone().unwrap_or_default();
    let missing = |field: &str| Frame::error(BrokerError::Protocol(format!("`{}` requires `{field}`", req.op)));
    match req.op.as_str() {
        "hello" => Frame {
            consumer: Some(consumer.0.clone()),
            ..Frame::op("ok")
        },
        "declare" => {
            let Some(key) = &req.routing_key else {
                return missing("routing_key");
            };
            match broker.declare_and_bind(&queue, key) {
                Ok(()) => Frame::op("ok"),
                Err(e) => Frame::error(e),
            }
        }
        "bindings" => Frame {
            bindings: Some(broker.bindings()),
            ..Frame::op("ok")
        },
        "publish" => {
            let (Some(key), Some(payload)) = (&req.routing_key, req.payload.clone()) else {
                return missing("routing_key and payload");
            };
            match broker.publish(key, payload) {
                Ok(r) => Frame {
                    queue: Some(r.queue),
                    depth: Some(r.depth),
                    ..Frame::op("ok")
                },
                Err(e) => Frame::error(e),
            }
        }
        "pop" => {
            let wait = Duration::from_millis(req.wait_ms.unwrap_or(0));
            match broker.pop_wait(&queue, consumer, wait).await {
                Ok(Some(d)) => Frame {
                    queue: Some(queue),
                    tag: Some(d.tag),
                    payload: Some(d.payload),
                    attempt: Some(d.attempt),
                    ..Frame::op("delivery")
                },
                Ok(None) => Frame::op("empty"),
                Err(e) => Frame::error(e),
            }
        }
        "ack" | "nack" => {
            let Some(tag) = req.tag else {
                return missing("tag");
            };
            let r = if req.op == "ack" {
                broker.ack(&queue, consumer, tag)
            } else {
                broker.nack(&queue, consumer, tag)
            };
            match r {
                Ok(()) => Frame::op("ok"),
                Err(e) => Frame::error(e),
            }
        }
        "heartbeat" => {
            broker.heartbeat(consumer);
            Frame::op("ok")
        }
        other => Frame::error(BrokerError::Protocol(format!("unknown op `{other}`"))),
    }
}

/// Client side of one broker connection (one consumer identity).
pub struct BrokerClient {
    io: FramedStream,
    consumer: String,
    peer: SocketAddr,
}

impl std::fmt::Debug for BrokerClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BrokerClient")
            .field("consumer", &self.consumer)
            .field("peer", &self.peer)
            .finish()
    }
}

impl BrokerClient {
    pub async fn connect(addr: impl ToSocketAddrs, name: &str) -> Result<Self, BrokerError> {
        let stream = TcpStream::connect(addr)
            .await
            .map_err(|e| BrokerError::Unreachable(e.to_string()))?;
        stream.set_nodelay(true).ok();
        let peer = stream.peer_addr().map_err(|e| BrokerError::Unreachable(e.to_string()))?;
        let mut client = BrokerClient {
            io: framed(stream),
            consumer: String::new(),
            peer,
        };
        let resp = client
            .call(Frame {
                consumer: Some(name.to_string()),
                ..Frame::op("hello")
            })
            .await?;
        client.consumer = resp.consumer.unwrap_or_default();
        Ok(client)
    }

    /// Connects with exponential backoff, giving up after `attempts` tries.
    pub async fn connect_with_retry(
        addr: SocketAddr,
        name: &str,
        attempts: u32,
        initial_backoff: Duration,
    ) -> Result<Self, BrokerError> {
        let mut backoff = initial_backoff;
        let mut last = BrokerError::Unreachable("no attempts made".into());
        for i in 0..attempts.max(1) {
            match BrokerClient::connect(addr, name).await {
                Ok(c) => return Ok(c),
                Err(e) => {
                    tracing::debug!(attempt = i + 1, error = %e, "broker connect failed");
                    last = e;
                }
            }
            if i + 1 < attempts {
                tokio::time::sleep(backoff).await;
                backoff = (backoff * 2).min(Duration::from_secs(5));
            }
        }
        Err(last)
    }

    /// The consumer identity the broker assigned to this connection.
    pub fn consumer(&self) -> &str {
        &self.consumer
    }

    async fn call(&mut self, req: Frame) -> Result<Frame, BrokerError> {
        let lost = |e: std::io::Error| BrokerError::Unreachable(e.to_string());
        send_json(&mut self.io, &req).await.map_err(lost)?;
        let resp: Frame = recv_json(&mut self.io)
            .await
            .map_err(lost)?
            .ok_or_else(|| BrokerError::Unreachable("connection closed".into()))?;
        match resp.error {
            Some(e) => Err(e),
            None => Ok(resp),
        }
    }

    pub async fn declare_and_bind(&mut self, queue: &str, routing_key: &str) -> Result<(), BrokerError> {
        self.call(Frame {
            queue: Some(queue.to_string()),
            routing_key: Some(routing_key.to_string()),
            ..Frame::op("declare")
        })
        .await
        .map(|_| ())
    }

    pub async fn bindings(&mut self) -> Result<Vec<Binding>, BrokerError> {
        Ok(self.call(Frame::op("bindings")).await?.bindings.unwrap_or_default())
    }

    pub async fn publish(&mut self, routing_key: &str, payload: &str) -> Result<PublishReceipt, BrokerError> {
        let r = self
            .call(Frame {
                routing_key: Some(routing_key.to_string()),
                payload: Some(payload.to_string()),
                ..Frame::op("publish")
            })
            .await?;
        Ok(PublishReceipt {
            queue: r.queue.unwrap_or_default(),
            depth: r.depth.unwrap_or_default(),
        })
    }

    pub async fn pop(&mut self, queue: &str, wait: Duration) -> Result<Option<Delivery>, BrokerError> {
        let r = self
            .call(Frame {
                queue: Some(queue.to_string()),
                wait_ms: Some(wait.as_millis() as u64),
                ..Frame::op("pop")
            })
            .await?;
        match r.op.as_str() {
            "empty" => Ok(None),
            "delivery" => match (r.tag, r.payload) {
                (Some(tag), Some(payload)) => Ok(Some(Delivery {
                    tag,
                    payload,
                    attempt: r.attempt.unwrap_or(1),
                })),
                _ => Err(BrokerError::Protocol("delivery without tag or payload".into())),
            },
            other => Err(BrokerError::Protocol(format!("unexpected reply `{other}`"))),
        }
    }

    pub async fn ack(&mut self, queue: &str, tag: u64) -> Result<(), BrokerError> {
        self.settle("ack", queue, tag).await
    }

    pub async fn nack(&mut self, queue: &str, tag: u64) -> Result<(), BrokerError> {
        self.settle("nack", queue, tag).await
    }

    async fn settle(&mut self, op: &str, queue: &str, tag: u64) -> Result<(), BrokerError> {
        self.call(Frame {
            queue: Some(queue.to_string()),
            tag: Some(tag),
            ..Frame::op(op)
        })
        .await
        .map(|_| ())
    }

    pub async fn heartbeat(&mut self) -> Result<(), BrokerError> {
        self.call(Frame::op("heartbeat")).await.map(|_| ())
    }
}

/// Binds a broker listener and serves it on a background task.
pub async fn spawn_broker(addr: SocketAddr, broker: Broker) -> std::io::Result<(SocketAddr, tokio::task::JoinHandle<()>)> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    let sweeper = broker.clone();
    let handle = tokio::spawn(async move {
        let sweep = async move {
            let mut tick = tokio::time::interval(Duration::from_millis(500));
            loop {
                tick.tick().await;
                sweeper.expire_deadlines();
            }
        };
        tokio::select! {
            _ = serve_broker(listener, broker) => {}
            _ = sweep => {}
        }
    });
    Ok((local, handle))
}

/// Shared client handle for code paths that interleave pops and acks.
pub type SharedClient = Arc<tokio::sync::Mutex<BrokerClient>>;
