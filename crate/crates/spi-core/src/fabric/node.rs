//! Node runtime: shard-level indexes behind a frame handler.
//!
//! Searches take read locks; inserts serialize through write locks. The
//! per-node tier cache fronts embedding fetches on the restricted
//! (refinement) path, charging simulated fetch costs to the node's ledger.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU8, Ordering};
use std::sync::{Mutex, RwLock};

use crate::cache::{simulated_cost_ms, CacheStats, TierCache, TierCacheConfig};
use crate::error::{Result, SpiError};
use crate::fabric::protocol::{
    ErrorCode, ErrorPayload, Frame, HealthState, InsertRequest, LoadReportPayload, MsgType,
    SearchRequest, SearchResponse,
};
use crate::index::{LevelIndex, SearchStats};
use crate::math;

/// Per-shard stack of level indexes.
pub struct ShardStore {
    pub levels: Vec<RwLock<LevelIndex>>,
}

impl ShardStore {
    pub fn new(levels: Vec<LevelIndex>) -> Self {
        ShardStore {
            levels: levels.into_iter().map(RwLock::new).collect(),
        }
    }
}

pub struct NodeRuntime {
    pub node_id: u32,
    shards: RwLock<BTreeMap<u32, ShardStore>>,
    cache: Mutex<TierCache<(u64, u8), Vec<f32>>>,
    health: AtomicU8,
    /// EWMA load estimate maintained by the owner (cluster or heartbeat).
    pub load_estimate: Mutex<f64>,
    /// Simulated milliseconds spent on cache-fronted embedding fetches.
    pub cache_cost_ms: Mutex<f64>,
    /// Whether the refinement gather path goes through the tier cache.
    pub cache_enabled: bool,
}

impl NodeRuntime {
    pub fn new(node_id: u32, cache_config: TierCacheConfig, cache_enabled: bool) -> Result<Self> {
        Ok(NodeRuntime {
            node_id,
            shards: RwLock::new(BTreeMap::new()),
            cache: Mutex::new(TierCache::new(cache_config)?),
            health: AtomicU8::new(HealthState::Up as u8),
            load_estimate: Mutex::new(0.0),
            cache_cost_ms: Mutex::new(0.0),
            cache_enabled,
        })
    }

    pub fn health(&self) -> HealthState {
        HealthState::from_u8(self.health.load(Ordering::SeqCst)).unwrap_or(HealthState::Down)
    }

    pub fn set_health(&self, state: HealthState) {
        self.health.store(state as u8, Ordering::SeqCst);
    }

    pub fn is_up(&self) -> bool {
        self.health() == HealthState::Up
    }

    pub fn install_shard(&self, shard: u32, store: ShardStore) {
        self.shards.write().unwrap().insert(shard, store);
    }

    pub fn drop_shard(&self, shard: u32) {
        self.shards.write().unwrap().remove(&shard);
    }

    pub fn shard_ids(&self) -> Vec<u32> {
        self.shards.read().unwrap().keys().copied().collect()
    }

    pub fn has_shard(&self, shard: u32) -> bool {
        self.shards.read().unwrap().contains_key(&shard)
    }

    pub fn cache_stats(&self) -> CacheStats {
        self.cache.lock().unwrap().stats()
    }

    /// Serialized snapshot bytes of one shard level, for replication and
    /// recovery.
    pub fn shard_level_bytes(&self, shard: u32, level: usize) -> Result<Vec<u8>> {
        let shards = self.shards.read().unwrap();
        let store = shards
            .get(&shard)
            .ok_or(SpiError::ShardUnavailable { shard })?;
        let idx = store.levels[level - 1].read().unwrap();
        Ok(crate::format::index_to_bytes(&idx))
    }

    /// Search one shard level. The restricted path fetches candidate
    /// embeddings through the tier cache when enabled, then scores them;
    /// the unrestricted path scans the index directly.
    pub fn search(
        &self,
        shard: u32,
        level: u8,
        query: &[f32],
        k: usize,
        restrict: Option<&BTreeSet<u64>>,
    ) -> Result<(Vec<(u64, f32)>, SearchStats)> {
        let shards = self.shards.read().unwrap();
        let store = shards
            .get(&shard)
            .ok_or(SpiError::ShardUnavailable { shard })?;
        let idx = store.levels[level as usize - 1].read().unwrap();

        if let (Some(set), true) = (restrict, self.cache_enabled) {
            let mut cache = self.cache.lock().unwrap();
            let mut scored: Vec<(u64, f32)> = Vec::new();
            let mut stats = SearchStats::default();
            for &id in set {
                let key = (id, level);
                let vec = match cache.get(&key) {
                    Some(v) => Some(v),
                    None => match idx.get_vector(id) {
                        Some(v) => {
                            cache.put(key, v.clone());
                            Some(v)
                        }
                        None => None,
                    },
                };
                match vec {
                    Some(v) => {
                        scored.push((id, math::dot_f32(query, &v)));
                        stats.scored_docs += 1;
                    }
                    None => stats.restrict_misses += 1,
                }
            }
            let cost = simulated_cost_ms(&cache.stats(), cache.config());
            *self.cache_cost_ms.lock().unwrap() = cost;
            let top = math::top_k_by_score(scored, k);
            return Ok((top, stats));
        }

        let (hits, stats) = idx.search(query, k, restrict)?;
        Ok((hits.into_iter().map(|h| (h.doc_id, h.score)).collect(), stats))
    }

    pub fn insert(&self, shard: u32, doc_id: u64, levels: &[Vec<f32>]) -> Result<()> {
        let shards = self.shards.read().unwrap();
        let store = shards
            .get(&shard)
            .ok_or(SpiError::ShardUnavailable { shard })?;
        if levels.len() != store.levels.len() {
            return Err(SpiError::DimensionMismatch {
                context: "insert level count",
                expected: store.levels.len(),
                got: levels.len(),
            });
        }
        for (l, vec) in levels.iter().enumerate() {
            store.levels[l].write().unwrap().insert(doc_id, vec)?;
        }
        Ok(())
    }

    pub fn remove(&self, shard: u32, doc_id: u64) -> Result<()> {
        let shards = self.shards.read().unwrap();
        let store = shards
            .get(&shard)
            .ok_or(SpiError::ShardUnavailable { shard })?;
        for level in &store.levels {
            level.write().unwrap().remove(doc_id)?;
        }
        Ok(())
    }

    /// Protocol entry point: one request frame in, exactly one response
    /// frame out. Never panics on malformed input.
    pub fn handle_frame(&self, frame: &Frame) -> Frame {
        let rid = frame.request_id;
        match MsgType::from_u8(frame.msg_type) {
            Some(MsgType::Search) => match SearchRequest::decode(&frame.payload) {
                Ok(req) => {
                    let restrict: Option<BTreeSet<u64>> =
                        req.restrict.as_ref().map(|ids| ids.iter().copied().collect());
                    match self.search(
                        req.shard,
                        req.level,
                        &req.query,
                        req.k as usize,
                        restrict.as_ref(),
                    ) {
                        Ok((hits, stats)) => {
                            let resp = SearchResponse {
                                served_by: self.node_id,
                                level: req.level,
                                hits,
                                scored_docs: stats.scored_docs as u64,
                                scored_centroids: stats.scored_centroids as u64,
                                restrict_misses: stats.restrict_misses as u64,
                            };
                            Frame::new(MsgType::SearchResult, rid, resp.encode())
                        }
                        Err(e) => error_frame(rid, error_code_for(&e), e.to_string()),
                    }
                }
                Err(e) => error_frame(rid, ErrorCode::BadRequest, e.to_string()),
            },
            Some(MsgType::Insert) => match InsertRequest::decode(&frame.payload) {
                Ok(req) => match self.insert(req.shard, req.doc_id, &req.levels) {
                    Ok(()) => Frame::new(MsgType::Ack, rid, Vec::new()),
                    Err(e) => error_frame(rid, error_code_for(&e), e.to_string()),
                },
                Err(e) => error_frame(rid, ErrorCode::BadRequest, e.to_string()),
            },
            Some(MsgType::Health) => {
                Frame::new(MsgType::Health, rid, vec![self.health() as u8])
            }
            Some(MsgType::LoadReport) => {
                let payload = LoadReportPayload {
                    node_id: self.node_id,
                    load: *self.load_estimate.lock().unwrap(),
                    cache: self.cache_stats(),
                };
                Frame::new(MsgType::LoadReport, rid, payload.encode())
            }
            Some(MsgType::SearchResult) | Some(MsgType::Ack) | Some(MsgType::Error) => {
                error_frame(
                    rid,
                    ErrorCode::BadRequest,
                    format!("{} is a response type", frame.msg_type),
                )
            }
            None => error_frame(
                rid,
                ErrorCode::UnknownType,
                format!("unknown message type {}", frame.msg_type),
            ),
        }
    }
}

fn error_code_for(e: &SpiError) -> ErrorCode {
    match e {
        SpiError::ShardUnavailable { .. } => ErrorCode::UnknownShard,
        SpiError::DuplicateDoc(_) => ErrorCode::DuplicateDoc,
        SpiError::UnknownDoc(_) => ErrorCode::UnknownDoc,
        SpiError::DimensionMismatch { .. } | SpiError::NonFinite(_) => ErrorCode::BadRequest,
        _ => ErrorCode::Internal,
    }
}

fn error_frame(rid: u64, code: ErrorCode, message: String) -> Frame {
    Frame::new(MsgType::Error, rid, ErrorPayload::new(code, message).encode())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::IndexSpec;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn test_node(cache_enabled: bool) -> NodeRuntime {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let vectors: BTreeMap<u64, Vec<f32>> = (0..100u64)
            .map(|id| {
                let v: Vec<f32> = (0..8).map(|_| rng.random::<f32>() - 0.5).collect();
                (id, math::normalized_f32(&v, "t").unwrap())
            })
            .collect();
        let idx = LevelIndex::build(&vectors, 1, IndexSpec::flat(), 0).unwrap();
        let node = NodeRuntime::new(0, TierCacheConfig::default(), cache_enabled).unwrap();
        node.install_shard(0, ShardStore::new(vec![idx]));
        node
    }

    #[test]
    fn every_frame_gets_exactly_one_response_with_matching_id() {
        let node = test_node(false);
        let cases = vec![
            Frame::new(MsgType::Health, 1, Vec::new()),
            Frame::new(MsgType::LoadReport, 2, Vec::new()),
            Frame::new(
                MsgType::Search,
                3,
                SearchRequest {
                    shard: 0,
                    level: 1,
                    k: 5,
                    query: vec![0.5; 8],
                    restrict: None,
                }
                .encode(),
            ),
            // Malformed search payload.
            Frame::new(MsgType::Search, 4, vec![1, 2, 3]),
            // Unknown message type.
            Frame {
                msg_type: 99,
                request_id: 5,
                payload: vec![],
            },
            // Response type sent as a request.
            Frame::new(MsgType::Ack, 6, Vec::new()),
            // Search against a shard the node does not hold.
            Frame::new(
                MsgType::Search,
                7,
                SearchRequest {
                    shard: 42,
                    level: 1,
                    k: 5,
                    query: vec![0.5; 8],
                    restrict: None,
                }
                .encode(),
            ),
        ];
        for frame in cases {
            let rid = frame.request_id;
            let resp = node.handle_frame(&frame);
            assert_eq!(resp.request_id, rid, "request id preserved");
            assert!(MsgType::from_u8(resp.msg_type).is_some());
        }
    }

    #[test]
    fn search_via_frames_matches_direct_call() {
        let node = test_node(false);
        let q = math::normalized_f32(&vec![0.3f32; 8], "t").unwrap();
        let (direct, _) = node.search(0, 1, &q, 10, None).unwrap();
        let frame = Frame::new(
            MsgType::Search,
            9,
            SearchRequest {
                shard: 0,
                level: 1,
                k: 10,
                query: q,
                restrict: None,
            }
            .encode(),
        );
        let resp = node.handle_frame(&frame);
        assert_eq!(resp.msg_type, MsgType::SearchResult as u8);
        let decoded = SearchResponse::decode(&resp.payload).unwrap();
        assert_eq!(decoded.hits, direct);
        assert_eq!(decoded.served_by, 0);
    }

    #[test]
    fn cached_gather_matches_uncached_scores() {
        let cached = test_node(true);
        let plain = test_node(false);
        let q = math::normalized_f32(&vec![-0.2f32; 8], "t").unwrap();
        let restrict: BTreeSet<u64> = (0..50u64).collect();
        let (a, sa) = cached.search(0, 1, &q, 10, Some(&restrict)).unwrap();
        let (b, sb) = plain.search(0, 1, &q, 10, Some(&restrict)).unwrap();
        assert_eq!(a, b, "cache must not change scores");
        assert_eq!(sa.scored_docs, sb.scored_docs);
        // Second pass hits the cache.
        let (_, _) = cached.search(0, 1, &q, 10, Some(&restrict)).unwrap();
        let stats = cached.cache_stats();
        assert!(stats.total_hits() >= 50, "repeat gather hits cache");
    }

    #[test]
    fn insert_frame_roundtrip_and_duplicate_error() {
        let node = test_node(false);
        let v = math::normalized_f32(&vec![0.9f32, 0.1, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], "t").unwrap();
        let ins = Frame::new(
            MsgType::Insert,
            11,
            InsertRequest {
                shard: 0,
                doc_id: 555,
                levels: vec![v.clone()],
            }
            .encode(),
        );
        assert_eq!(node.handle_frame(&ins).msg_type, MsgType::Ack as u8);
        let resp = node.handle_frame(&ins);
        assert_eq!(resp.msg_type, MsgType::Error as u8);
        let err = ErrorPayload::decode(&resp.payload).unwrap();
        assert_eq!(err.code, ErrorCode::DuplicateDoc as u8);
    }
}
