use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::Arc;
use std::time::Duration;

use cvgrid_service::broker::{Broker, ConsumerId, DEFAULT_VISIBILITY_TIMEOUT};
use cvgrid_service::wire::{spawn_broker, BrokerClient};
use parking_lot::Mutex;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const QUEUES: [(&str, &str); 2] = [("classification.gpu", "classify"), ("stitching.cpu", "ImageStitch")];

#[derive(Debug, Clone)]
enum Op {
    Publish(usize),
    Pop(usize, usize),
    Ack(usize, usize),
    Nack(usize, usize),
    Kill(usize),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        3 => (0..2usize).prop_map(Op::Publish),
        3 => (0..2usize, 0..3usize).prop_map(|(q, c)| Op::Pop(q, c)),
        2 => (0..3usize, 0..8usize).prop_map(|(c, i)| Op::Ack(c, i)),
        1 => (0..3usize, 0..8usize).prop_map(|(c, i)| Op::Nack(c, i)),
        1 => (0..3usize).prop_map(Op::Kill),
    ]
}

/// Reference queue: a plain deque per queue plus a map of outstanding deliveries.
#[derive(Default)]
struct Model {
    buffers: [VecDeque<(u64, bool)>; 2],
    // tag -> (queue, message id, requeued, consumer)
    unacked: BTreeMap<u64, (usize, u64, bool, usize)>,
    next_tag: u64,
}

impl Model {
    fn requeue(&mut self, mut tags: Vec<u64>) {
        tags.sort_unstable();
        for tag in tags.into_iter().rev() {
            let (q, id, _, _) = self.unacked.remove(&tag).unwrap();
            self.buffers[q].push_front((id, true));
        }
    }
}

fn consumer(i: usize, generation: &[u32]) -> ConsumerId {
    ConsumerId(format!("c{i}#{}", generation[i]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn broker_matches_reference_model(ops in proptest::collection::vec(op(), 1..120)) {
        let broker = Broker::with_default_bindings(DEFAULT_VISIBILITY_TIMEOUT);
        let mut model = Model { next_tag: 1, ..Model::default() };
        let mut generation = [0u32; 3];
        let mut next_id = 0u64;
        let mut acked: HashMap<u64, u32> = HashMap::new();
        let mut last_fresh: [Option<u64>; 2] = [None, None];

        for op in ops {
            match op {
                Op::Publish(q) => {
                    let receipt = broker.publish(QUEUES[q].1, next_id.to_string()).unwrap();
                    prop_assert_eq!(receipt.queue.as_str(), QUEUES[q].0);
                    model.buffers[q].push_back((next_id, false));
                    next_id += 1;
                }
                Op::Pop(q, c) => {
                    let got = broker.pop(QUEUES[q].0, &consumer(c, &generation)).unwrap();
                    match model.buffers[q].pop_front() {
                        None => prop_assert!(got.is_none()),
                        Some((id, requeued)) => {
                            let d = got.expect("model has a message");
                            prop_assert_eq!(d.tag, model.next_tag);
                            prop_assert_eq!(d.payload.parse::<u64>().unwrap(), id);
                            if !requeued {
                                // Fresh messages come out in publish order.
                                if let Some(prev) = last_fresh[q] {
                                    prop_assert!(id > prev);
                                }
                                last_fresh[q] = Some(id);
                            }
                            model.unacked.insert(d.tag, (q, id, requeued, c));
                            model.next_tag += 1;
                        }
                    }
                }
                Op::Ack(c, i) | Op::Nack(c, i) => {
                    let held: Vec<u64> = model.unacked.iter().filter(|(_, v)| v.3 == c).map(|(t, _)| *t).collect();
                    if held.is_empty() {
                        continue;
                    }
                    let tag = held[i % held.len()];
                    let (q, id, _, _) = model.unacked[&tag];
                    // A different consumer may never settle someone else's delivery.
                    let other = consumer((c + 1) % 3, &generation);
                    prop_assert!(broker.ack(QUEUES[q].0, &other, tag).is_err());
                    if matches!(op, Op::Ack(..)) {
                        broker.ack(QUEUES[q].0, &consumer(c, &generation), tag).unwrap();
                        model.unacked.remove(&tag);
                        *acked.entry(id).or_default() += 1;
                    } else {
                        broker.nack(QUEUES[q].0, &consumer(c, &generation), tag).unwrap();
                        model.requeue(vec![tag]);
                    }
                    prop_assert!(broker.ack(QUEUES[q].0, &consumer(c, &generation), tag).is_err());
                }
                Op::Kill(c) => {
                    let released = broker.release_consumer(&consumer(c, &generation));
                    let tags: Vec<u64> = model.unacked.iter().filter(|(_, v)| v.3 == c).map(|(t, _)| *t).collect();
                    prop_assert_eq!(released, tags.len());
                    model.requeue(tags);
                    generation[c] += 1;
                }
            }
            // Conservation: every published message is buffered, held or acked.
            for (q, (name, _)) in QUEUES.iter().enumerate() {
                let stats = broker.stats(name).unwrap();
                let expected: Vec<String> = model.buffers[q].iter().map(|(id, _)| id.to_string()).collect();
                prop_assert_eq!(broker.peek_buffer(name).unwrap(), expected);
                prop_assert_eq!(stats.unacked, model.unacked.values().filter(|v| v.0 == q).count());
                prop_assert_eq!(stats.published, stats.buffered as u64 + stats.unacked as u64 + stats.acked);
            }
            prop_assert!(acked.values().all(|&n| n == 1));
        }
    }
}

async fn kill_schedule(seed: u64) {
    const MESSAGES: usize = 40;
    const CONSUMERS: usize = 3;
    let broker = Broker::with_default_bindings(DEFAULT_VISIBILITY_TIMEOUT);
    let (addr, server) = spawn_broker("127.0.0.1:0".parse().unwrap(), broker.clone()).await.unwrap();
    let mut producer = BrokerClient::connect(addr, "producer").await.unwrap();
    for i in 0..MESSAGES {
        producer.publish("classify", &i.to_string()).await.unwrap();
    }

    let acked: Arc<Mutex<HashMap<u64, u32>>> = Arc::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tasks = Vec::new();
    for c in 0..CONSUMERS {
        // Each consumer dies after a random number of deliveries, a few times over.
        let deaths: Vec<usize> = (0..rng.gen_range(0..4)).map(|_| rng.gen_range(1..6)).collect();
        let acked = acked.clone();
        tasks.push(tokio::spawn(async move {
            let mut deaths = deaths.into_iter();
            let mut die_after = deaths.next();
            let mut client = BrokerClient::connect(addr, &format!("c{c}")).await.unwrap();
            let mut taken = 0usize;
            let mut idle = 0;
            loop {
                let Some(d) = client.pop("classification.gpu", Duration::from_millis(50)).await.unwrap() else {
                    idle += 1;
                    if idle > 10 {
                        return;
                    }
                    continue;
                };
                idle = 0;
                taken += 1;
                if die_after == Some(taken) {
                    // Vanish while holding the delivery.
                    drop(client);
                    client = BrokerClient::connect(addr, &format!("c{c}")).await.unwrap();
                    taken = 0;
                    die_after = deaths.next();
                    continue;
                }
                client.ack("classification.gpu", d.tag).await.unwrap();
                *acked.lock().entry(d.payload.parse().unwrap()).or_default() += 1;
            }
        }));
    }
    for t in tasks {
        t.await.unwrap();
    }
    // Consumers may all idle out while a dropped delivery is still being requeued; drain the rest.
    let mut sweeper = BrokerClient::connect(addr, "sweeper").await.unwrap();
    while let Some(d) = sweeper.pop("classification.gpu", Duration::from_millis(200)).await.unwrap() {
        sweeper.ack("classification.gpu", d.tag).await.unwrap();
        *acked.lock().entry(d.payload.parse().unwrap()).or_default() += 1;
    }
    let acked = acked.lock();
    assert_eq!(acked.len(), MESSAGES, "seed {seed}: every message acked");
    assert!(acked.values().all(|&n| n == 1), "seed {seed}: no double ack");
    let stats = broker.stats("classification.gpu").unwrap();
    assert_eq!((stats.buffered, stats.unacked), (0, 0), "seed {seed}");
    assert_eq!(stats.acked, MESSAGES as u64);
    server.abort();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn at_least_once_under_random_consumer_kills() {
    for seed in 0..20 {
        kill_schedule(seed).await;
    }
}
