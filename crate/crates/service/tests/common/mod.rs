#![allow(dead_code)]

use std::collections::VecDeque;
use std::time::Duration;

use futures::{SinkExt, StreamExt};
use serde_json::Value;
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

use cvgrid_core::vision::{encode_png, synthetic};

/// A client event channel.
pub struct Channel {
    ws: WebSocketStream<MaybeTlsStream<TcpStream>>,
    pub session: String,
    backlog: VecDeque<Value>,
}

impl Channel {
    pub async fn open(base_url: &str) -> Channel {
        let url = format!("{}/ws", base_url.replacen("http", "ws", 1));
        let (mut ws, _) = tokio_tungstenite::connect_async(url).await.expect("ws connect");
        let hello = next_text(&mut ws, Duration::from_secs(5)).await.expect("hello");
        assert_eq!(hello["type"], "hello", "first message must be hello");
        let session = hello["session_id"].as_str().unwrap().to_string();
        Channel {
            ws,
            session,
            backlog: VecDeque::new(),
        }
    }

    pub async fn send(&mut self, v: Value) {
        self.ws.send(Message::Text(v.to_string().into())).await.unwrap();
    }

    /// All events of `job_id` up to and including its `job_done`.
    pub async fn events_until_done(&mut self, job_id: &str, timeout: Duration) -> Vec<Value> {
        let deadline = tokio::time::Instant::now() + timeout;
        let mut out = Vec::new();
        let mut keep = VecDeque::new();
        while let Some(v) = self.backlog.pop_front() {
            if v["job_id"] == job_id {
                let done = v["type"] == "job_done";
                out.push(v);
                if done {
                    self.backlog.extend(keep);
                    return out;
                }
            } else {
                keep.push_back(v);
            }
        }
        self.backlog = keep;
        loop {
            let left = deadline.saturating_duration_since(tokio::time::Instant::now());
            let v = next_text(&mut self.ws, left)
                .await
                .unwrap_or_else(|| panic!("timed out waiting for job_done of {job_id}; got {out:?}"));
            if v["job_id"] == job_id {
                let done = v["type"] == "job_done";
                out.push(v);
                if done {
                    return out;
                }
            } else {
                self.backlog.push_back(v);
            }
        }
    }
}

async fn next_text(ws: &mut WebSocketStream<MaybeTlsStream<TcpStream>>, timeout: Duration) -> Option<Value> {
    loop {
        let msg = tokio::time::timeout(timeout, ws.next()).await.ok()??.ok()?;
        if let Message::Text(t) = msg {
            return serde_json::from_str(&t).ok();
        }
    }
}

pub fn spec_doc(exec: &str, params: &[(&str, &str)]) -> String {
    let params: serde_json::Map<String, Value> =
        params.iter().map(|(k, v)| (k.to_string(), Value::String(v.to_string()))).collect();
    serde_json::json!({
        "exec": exec,
        "maxim": 50,
        "config": [{ "name": exec, "path": "local:inputs", "output": "out", "params": params }],
    })
    .to_string()
}

pub async fn submit(
    base_url: &str,
    session: &str,
    spec: &str,
    images: &[(String, Vec<u8>)],
) -> reqwest::Response {
    let mut form = reqwest::multipart::Form::new().text("spec", spec.to_string());
    for (name, bytes) in images {
        form = form.part(
            "image",
            reqwest::multipart::Part::bytes(bytes.clone()).file_name(name.clone()),
        );
    }
    reqwest::Client::new()
        .post(format!("{base_url}/api/v1/jobs"))
        .header("X-Session-Id", session)
        .multipart(form)
        .send()
        .await
        .expect("http submit")
}

pub async fn status(base_url: &str, job_id: &str) -> Value {
    reqwest::get(format!("{base_url}/api/v1/jobs/{job_id}"))
        .await
        .unwrap()
        .json()
        .await
        .unwrap()
}

pub fn color_images(n: usize) -> Vec<(String, Vec<u8>)> {
    let colors = [[200, 30, 30], [30, 200, 30], [30, 30, 200], [220, 220, 40], [240, 240, 240], [20, 20, 20]];
    (0..n)
        .map(|i| {
            let img = synthetic::noisy_color(48, 40, colors[i % colors.len()], 12, i as u64);
            (format!("img{i}.png"), encode_png(&img))
        })
        .collect()
}

/// Overlapping windows of one synthetic scene, left to right.
pub fn stitch_images(n: usize) -> Vec<(String, Vec<u8>)> {
    let scene = synthetic::scene(100 + 40 * n as u32, 110, 42);
    (0..n)
        .map(|i| {
            let w = synthetic::window(&scene, 40 * i as u32, (i as u32 % 2) * 5, 120, 100);
            (format!("part{i}.png"), encode_png(&w))
        })
        .collect()
}

/// Checks per-task seq contiguity and that `job_done` is last and follows
/// every task's terminal event.
pub fn check_event_order(events: &[Value], tasks: usize) {
    let mut next = vec![0u64; tasks];
    let mut done = 0;
    for (i, e) in events.iter().enumerate() {
        match e["task"].as_u64() {
            Some(t) => {
                assert_eq!(e["seq"].as_u64().unwrap(), next[t as usize], "gap or duplicate in task {t}: {e}");
                next[t as usize] += 1;
                let final_failure = e["type"] == "failed"
                    && serde_json::from_str::<Value>(e["payload"].as_str().unwrap_or("{}"))
                        .map(|p| p["final"] == true)
                        .unwrap_or(false);
                if e["type"] == "task_done" || final_failure {
                    done += 1;
                }
            }
            None if e["type"] == "job_done" => {
                assert_eq!(i, events.len() - 1, "job_done must be last");
                assert_eq!(done, tasks, "job_done before every task finished");
            }
            None => {}
        }
    }
}
