//! Real socket deployment: node servers, a scatter-gather coordinator
//! client, and heartbeat-driven failure detection. Frames and payloads are
//! identical to the in-process runtime.

use std::collections::BTreeSet;
use std::io::ErrorKind;
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicU8, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::time::Duration;

use crate::controller::DepthController;
use crate::error::{Result, SpiError};
use crate::fabric::load::LoadTracker;
use crate::fabric::node::NodeRuntime;
use crate::fabric::protocol::{
    ErrorPayload, Frame, HealthState, MsgType, SearchRequest, SearchResponse,
};
use crate::pipeline::{self, ShardResponse, ShardSearcher};
use crate::pyramid::ProgressiveEncoder;

pub const DEFAULT_HEARTBEAT_INTERVAL_MS: u64 = 500;
pub const DEFAULT_HEARTBEAT_MISSES: u32 = 3;
pub const DEFAULT_REQUEST_TIMEOUT_MS: u64 = 2_000;

/// Serve one node over TCP until `shutdown` flips. One thread per
/// connection; each connection carries length-prefixed frames.
pub fn serve_node(
    node: Arc<NodeRuntime>,
    listener: TcpListener,
    shutdown: Arc<AtomicBool>,
) -> std::io::Result<()> {
    listener.set_nonblocking(true)?;
    let mut workers = Vec::new();
    while !shutdown.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _addr)) => {
                stream.set_nodelay(true).ok();
                stream.set_nonblocking(false).ok();
                let node = Arc::clone(&node);
                let shutdown = Arc::clone(&shutdown);
                workers.push(std::thread::spawn(move || {
                    serve_connection(node, stream, shutdown);
                }));
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_millis(20));
            }
            Err(_) => break,
        }
    }
    for w in workers {
        let _ = w.join();
    }
    Ok(())
}

fn serve_connection(node: Arc<NodeRuntime>, mut stream: TcpStream, shutdown: Arc<AtomicBool>) {
    stream
        .set_read_timeout(Some(Duration::from_millis(200)))
        .ok();
    loop {
        if shutdown.load(Ordering::SeqCst) {
            return;
        }
        match Frame::read_from(&mut stream) {
            Ok(frame) => {
                // Down nodes stay silent: the failure detector, not an
                // error frame, reports them.
                if !node.is_up() {
                    continue;
                }
                let resp = node.handle_frame(&frame);
                if resp.write_to(&mut stream).is_err() {
                    return;
                }
            }
            Err(SpiError::Io(e))
                if e.kind() == ErrorKind::WouldBlock || e.kind() == ErrorKind::TimedOut =>
            {
                continue;
            }
            Err(_) => return,
        }
    }
}

/// Framed request/response client for one node. One in-flight request per
/// connection; concurrent scatter uses one client per node.
pub struct NodeClient {
    pub addr: String,
    stream: Mutex<Option<TcpStream>>,
    timeout: Duration,
    seq: AtomicU64,
}

impl NodeClient {
    pub fn new(addr: impl Into<String>, timeout: Duration) -> Self {
        NodeClient {
            addr: addr.into(),
            stream: Mutex::new(None),
            timeout,
            seq: AtomicU64::new(1),
        }
    }

    fn connect(&self) -> Result<TcpStream> {
        let addr: std::net::SocketAddr = self
            .addr
            .parse()
            .map_err(|e| SpiError::InvalidConfig(format!("bad address {}: {e}", self.addr)))?;
        let stream = TcpStream::connect_timeout(&addr, self.timeout)?;
        stream.set_nodelay(true).ok();
        stream.set_read_timeout(Some(self.timeout))?;
        stream.set_write_timeout(Some(self.timeout))?;
        Ok(stream)
    }

    /// Send one frame and wait for its response.
    pub fn request(&self, msg_type: MsgType, payload: Vec<u8>) -> Result<Frame> {
        let rid = self.seq.fetch_add(1, Ordering::Relaxed);
        let frame = Frame::new(msg_type, rid, payload);
        let mut guard = self.stream.lock().unwrap();
        if guard.is_none() {
            *guard = Some(self.connect()?);
        }
        let stream = guard.as_mut().unwrap();
        let outcome = (|| -> Result<Frame> {
            frame.write_to(stream)?;
            let resp = Frame::read_from(stream)?;
            if resp.request_id != rid {
                return Err(SpiError::Protocol(format!(
                    "response id {} for request {rid}",
                    resp.request_id
                )));
            }
            Ok(resp)
        })();
        if outcome.is_err() {
            // Drop the connection; stale bytes would corrupt the next call.
            *guard = None;
        }
        outcome
    }
}

/// Scatter one prepared frame payload to many nodes concurrently, collecting
/// until all respond or the timeout lapses.
///
/// Returns per-node responses plus the list of nodes that never answered.
/// Fewer responders than `quorum` is an error.
pub fn scatter_gather(
    clients: &[Arc<NodeClient>],
    targets: &[u32],
    msg_type: MsgType,
    payloads: Vec<Vec<u8>>,
    timeout: Duration,
    quorum: usize,
) -> Result<(Vec<(u32, Frame)>, Vec<u32>)> {
    if targets.is_empty() {
        return Err(SpiError::EmptyInput("scatter targets"));
    }
    debug_assert_eq!(targets.len(), payloads.len());
    let (tx, rx) = mpsc::channel();
    for (&node, payload) in targets.iter().zip(payloads) {
        let tx = tx.clone();
        let client = Arc::clone(&clients[node as usize]);
        std::thread::spawn(move || {
            let result = client.request(msg_type, payload);
            let _ = tx.send((node, result));
        });
    }
    drop(tx);
    let deadline = std::time::Instant::now() + timeout + Duration::from_millis(50);
    let mut responses = Vec::new();
    let mut missing: BTreeSet<u32> = targets.iter().copied().collect();
    while !missing.is_empty() {
        let remaining = deadline.saturating_duration_since(std::time::Instant::now());
        if remaining.is_zero() {
            break;
        }
        match rx.recv_timeout(remaining) {
            Ok((node, Ok(frame))) => {
                missing.remove(&node);
                responses.push((node, frame));
            }
            Ok((_node, Err(_))) => {
                // Unreachable node: leave it in the missing set.
                if missing.len() + responses.len() == targets.len() {
                    // All senders reported; stop early when nothing is left.
                    let reported = responses.len()
                        + targets.len()
                            - missing.len()
                            - responses.len();
                    if reported == targets.len() {
                        break;
                    }
                }
            }
            Err(_) => break,
        }
    }
    responses.sort_by_key(|(n, _)| *n);
    if responses.len() < quorum {
        return Err(SpiError::QuorumViolation {
            responded: responses.len(),
            total: targets.len(),
            quorum,
        });
    }
    Ok((responses, missing.into_iter().collect()))
}

/// Coordinator over socket-connected nodes: shard routing with EWMA load
/// balancing, heartbeat failure detection, concurrent per-level scatter.
pub struct SocketCoordinator {
    pub encoder: ProgressiveEncoder,
    pub controller: DepthController,
    pub clients: Vec<Arc<NodeClient>>,
    pub replication: u32,
    pub quorum: usize,
    pub timeout: Duration,
    health: Vec<AtomicU8>,
    loads: Mutex<LoadTracker>,
    route_seq: AtomicU64,
    route_window: usize,
}

impl SocketCoordinator {
    pub fn new(
        encoder: ProgressiveEncoder,
        controller: DepthController,
        addrs: &[String],
        replication: u32,
        quorum: usize,
        ewma_alpha: f64,
        timeout: Duration,
    ) -> Result<Self> {
        if addrs.is_empty() {
            return Err(SpiError::InvalidConfig("coordinator needs nodes".into()));
        }
        if replication == 0 || replication as usize > addrs.len() {
            return Err(SpiError::InvalidConfig("replication outside 1..=N".into()));
        }
        Ok(SocketCoordinator {
            encoder,
            controller,
            clients: addrs
                .iter()
                .map(|a| Arc::new(NodeClient::new(a.clone(), timeout)))
                .collect(),
            replication,
            quorum,
            timeout,
            health: addrs.iter().map(|_| AtomicU8::new(0)).collect(),
            loads: Mutex::new(LoadTracker::new(addrs.len(), ewma_alpha)?),
            route_seq: AtomicU64::new(0),
            route_window: 64,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.clients.len()
    }

    pub fn health_of(&self, node: u32) -> HealthState {
        HealthState::from_u8(self.health[node as usize].load(Ordering::SeqCst))
            .unwrap_or(HealthState::Down)
    }

    pub fn set_health(&self, node: u32, state: HealthState) {
        self.health[node as usize].store(state as u8, Ordering::SeqCst);
    }

    fn holders(&self, shard: u32) -> Vec<u32> {
        let n = self.n_nodes() as u32;
        (0..self.replication).map(|r| (shard + r) % n).collect()
    }

    fn route_shard(&self, shard: u32) -> Result<u32> {
        let eligible: Vec<u32> = self
            .holders(shard)
            .into_iter()
            .filter(|&h| self.health_of(h) == HealthState::Up)
            .collect();
        if eligible.is_empty() {
            return Err(SpiError::ShardUnavailable { shard });
        }
        let mut loads = self.loads.lock().unwrap();
        let node = loads.route(&eligible)?;
        loads.record_assignment(node, 1.0);
        let seq = self.route_seq.fetch_add(1, Ordering::SeqCst);
        if (seq + 1) % self.route_window as u64 == 0 {
            loads.close_window();
        }
        Ok(node)
    }

    /// One heartbeat pass: ping every node, demote on repeated misses.
    pub fn heartbeat_pass(&self, miss_counts: &mut [u32], max_misses: u32) {
        for (i, client) in self.clients.iter().enumerate() {
            match client.request(MsgType::Health, Vec::new()) {
                Ok(resp) if resp.msg_type == MsgType::Health as u8 => {
                    miss_counts[i] = 0;
                    self.set_health(i as u32, HealthState::Up);
                }
                _ => {
                    miss_counts[i] += 1;
                    if miss_counts[i] >= max_misses {
                        self.set_health(i as u32, HealthState::Down);
                    } else {
                        self.set_health(i as u32, HealthState::Suspect);
                    }
                }
            }
        }
    }

    /// Background failure detector.
    pub fn spawn_heartbeat(
        self: &Arc<Self>,
        interval: Duration,
        max_misses: u32,
        shutdown: Arc<AtomicBool>,
    ) -> std::thread::JoinHandle<()> {
        let coord = Arc::clone(self);
        std::thread::spawn(move || {
            let mut misses = vec![0u32; coord.n_nodes()];
            while !shutdown.load(Ordering::SeqCst) {
                coord.heartbeat_pass(&mut misses, max_misses);
                std::thread::sleep(interval);
            }
        })
    }

    pub fn retrieve(
        &self,
        query_source: &[f32],
        k: usize,
        plan_override: Option<&crate::controller::QueryPlan>,
    ) -> Result<(Vec<crate::index::SearchHit>, crate::pipeline::RetrievalTrace)> {
        let plan = match plan_override {
            Some(p) => p.clone(),
            None => {
                let q1 = self.encoder.encode_to_depth(query_source, 1)?;
                self.controller.plan(&q1[0], k)?
            }
        };
        pipeline::retrieve(self, &self.encoder, &plan, query_source, k)
    }
}

impl ShardSearcher for SocketCoordinator {
    fn shard_count(&self) -> usize {
        self.n_nodes()
    }

    fn quorum(&self) -> usize {
        self.quorum
    }

    fn search_shard(
        &self,
        shard: u32,
        level: u8,
        query: &[f32],
        k: usize,
        restrict: Option<&BTreeSet<u64>>,
    ) -> Result<ShardResponse> {
        let node = self.route_shard(shard)?;
        let req = SearchRequest {
            shard,
            level,
            k: k as u32,
            query: query.to_vec(),
            restrict: restrict.map(|s| s.iter().copied().collect()),
        };
        let payload = req.encode();
        let request_bytes = payload.len() + 13;
        match self.clients[node as usize].request(MsgType::Search, payload) {
            Ok(frame) if frame.msg_type == MsgType::SearchResult as u8 => {
                let decoded = SearchResponse::decode(&frame.payload)?;
                Ok(ShardResponse {
                    response_bytes: frame.encoded_len(),
                    hits: decoded.to_hits(),
                    stats: decoded.stats(),
                    served_by: decoded.served_by,
                    request_bytes,
                })
            }
            Ok(frame) if frame.msg_type == MsgType::Error as u8 => {
                let err = ErrorPayload::decode(&frame.payload)?;
                self.set_health(node, HealthState::Suspect);
                Err(SpiError::Protocol(format!("node {node}: {}", err.message)))
            }
            Ok(frame) => Err(SpiError::Protocol(format!(
                "unexpected response type {}",
                frame.msg_type
            ))),
            Err(e) => {
                self.set_health(node, HealthState::Suspect);
                Err(match e {
                    SpiError::Io(_) => SpiError::NodeDown(node),
                    other => other,
                })
            }
        }
    }

    /// Concurrent scatter: route every shard, dispatch in parallel, retry
    /// unanswered shards once on a replica before reporting them down.
    fn search_level(
        &self,
        level: u8,
        query: &[f32],
        per_shard_k: usize,
        restrict: Option<&BTreeSet<u64>>,
    ) -> Vec<(u32, Result<ShardResponse>)> {
        let shards: Vec<u32> = (0..self.shard_count() as u32).collect();
        let (tx, rx) = mpsc::channel();
        std::thread::scope(|scope| {
            for &shard in &shards {
                let tx = tx.clone();
                scope.spawn(move || {
                    let result = self.search_shard(shard, level, query, per_shard_k, restrict);
                    let _ = tx.send((shard, result));
                });
            }
            drop(tx);
        });
        let mut results: Vec<(u32, Result<ShardResponse>)> = rx.into_iter().collect();
        // Retry timed-out shards once on the next live replica.
        for entry in results.iter_mut() {
            let retry = matches!(entry.1, Err(SpiError::NodeDown(_)));
            if retry {
                entry.1 = self.search_shard(entry.0, level, query, per_shard_k, restrict);
            }
        }
        results.sort_by_key(|(s, _)| *s);
        results
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::TierCacheConfig;
    use crate::fabric::node::ShardStore;
    use crate::index::{IndexSpec, LevelIndex};
    use crate::math;
    use std::collections::BTreeMap;

    fn spawn_test_node(
        node_id: u32,
        shards: Vec<(u32, Vec<LevelIndex>)>,
    ) -> (Arc<NodeRuntime>, String, Arc<AtomicBool>, std::thread::JoinHandle<()>) {
        let node = Arc::new(NodeRuntime::new(node_id, TierCacheConfig::default(), false).unwrap());
        for (shard, levels) in shards {
            node.install_shard(shard, ShardStore::new(levels));
        }
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let shutdown = Arc::new(AtomicBool::new(false));
        let handle = {
            let node = Arc::clone(&node);
            let shutdown = Arc::clone(&shutdown);
            std::thread::spawn(move || {
                serve_node(node, listener, shutdown).unwrap();
            })
        };
        (node, addr, shutdown, handle)
    }

    fn unit_corpus(n: usize, dim: usize, seed: u64) -> BTreeMap<u64, Vec<f32>> {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        (0..n as u64)
            .map(|id| {
                let v: Vec<f32> = (0..dim).map(|_| rng.random::<f32>() - 0.5).collect();
                (id, math::normalized_f32(&v, "t").unwrap())
            })
            .collect()
    }

    #[test]
    fn framed_requests_over_real_sockets() {
        let corpus = unit_corpus(50, 8, 1);
        let idx = LevelIndex::build(&corpus, 1, IndexSpec::flat(), 0).unwrap();
        let (node, addr, shutdown, handle) = spawn_test_node(0, vec![(0, vec![idx])]);

        let client = NodeClient::new(addr, Duration::from_millis(1000));
        let req = SearchRequest {
            shard: 0,
            level: 1,
            k: 5,
            query: corpus[&3].clone(),
            restrict: None,
        };
        let resp = client.request(MsgType::Search, req.encode()).unwrap();
        assert_eq!(resp.msg_type, MsgType::SearchResult as u8);
        let decoded = SearchResponse::decode(&resp.payload).unwrap();
        assert_eq!(decoded.hits[0].0, 3, "self-query ranks first");

        // Health over the wire.
        let resp = client.request(MsgType::Health, Vec::new()).unwrap();
        assert_eq!(resp.msg_type, MsgType::Health as u8);
        assert_eq!(resp.payload, vec![HealthState::Up as u8]);

        shutdown.store(true, Ordering::SeqCst);
        handle.join().unwrap();
        drop(node);
    }

    #[test]
    fn scatter_gather_collects_and_reports_misses() {
        let corpus = unit_corpus(60, 8, 2);
        let idx = |seed| LevelIndex::build(&corpus, 1, IndexSpec::flat(), seed).unwrap();
        let (node_a, addr_a, stop_a, h_a) = spawn_test_node(0, vec![(0, vec![idx(0)])]);
        let (node_b, addr_b, stop_b, h_b) = spawn_test_node(1, vec![(1, vec![idx(1)])]);

        let clients = vec![
            Arc::new(NodeClient::new(addr_a, Duration::from_millis(500))),
            Arc::new(NodeClient::new(addr_b, Duration::from_millis(500))),
        ];
        let ping = |n: usize| vec![Vec::new(); n];
        // Both respond: empty miss list.
        let (resps, missing) = scatter_gather(
            &clients,
            &[0, 1],
            MsgType::Health,
            ping(2),
            Duration::from_millis(500),
            2,
        )
        .unwrap();
        assert_eq!(resps.len(), 2);
        assert!(missing.is_empty());

        // Kill node 1: it stops answering; quorum 2 now fails, quorum 1
        // reports the miss.
        node_b.set_health(HealthState::Down);
        let err = scatter_gather(
            &clients,
            &[0, 1],
            MsgType::Health,
            ping(2),
            Duration::from_millis(300),
            2,
        );
        assert!(matches!(err, Err(SpiError::QuorumViolation { .. })));
        let (resps, missing) = scatter_gather(
            &clients,
            &[0, 1],
            MsgType::Health,
            ping(2),
            Duration::from_millis(300),
            1,
        )
        .unwrap();
        assert_eq!(resps.len(), 1);
        assert_eq!(missing, vec![1]);

        stop_a.store(true, Ordering::SeqCst);
        stop_b.store(true, Ordering::SeqCst);
        h_a.join().unwrap();
        h_b.join().unwrap();
        drop((node_a, node_b));
    }
}
