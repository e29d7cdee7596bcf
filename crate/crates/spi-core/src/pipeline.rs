//! Progressive coarse-to-fine retrieval.
//!
//! Level 1 scatter-searches every shard; each deeper level re-scores the
//! surviving candidate set (restricted search) with a shrinking budget.
//! Aggregation deduplicates by max score under the global tie rule. The
//! final ranking uses the scores of the terminal level only.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use crate::controller::QueryPlan;
use crate::error::{Result, SpiError};
use crate::index::{SearchHit, SearchStats};
use crate::math;
use crate::pyramid::ProgressiveEncoder;

/// One shard's answer to a level search.
#[derive(Debug, Clone)]
pub struct ShardResponse {
    pub hits: Vec<SearchHit>,
    pub stats: SearchStats,
    /// Node that served the call (shard id for the single-process engine).
    pub served_by: u32,
    /// Encoded frame sizes when the call crossed the wire (0 in-process).
    pub request_bytes: usize,
    pub response_bytes: usize,
}

/// Search surface the pipeline runs against: one shard for the
/// single-process engine, N partitions behind the fabric.
pub trait ShardSearcher {
    fn shard_count(&self) -> usize;

    fn search_shard(
        &self,
        shard: u32,
        level: u8,
        query: &[f32],
        k: usize,
        restrict: Option<&BTreeSet<u64>>,
    ) -> Result<ShardResponse>;

    /// One level's scatter over every shard. The default dispatches
    /// sequentially (deterministic in-process path); the socket coordinator
    /// overrides it with concurrent dispatch and timeouts.
    fn search_level(
        &self,
        level: u8,
        query: &[f32],
        per_shard_k: usize,
        restrict: Option<&BTreeSet<u64>>,
    ) -> Vec<(u32, Result<ShardResponse>)> {
        (0..self.shard_count() as u32)
            .map(|shard| {
                (
                    shard,
                    self.search_shard(shard, level, query, per_shard_k, restrict),
                )
            })
            .collect()
    }

    /// Shards whose results may be skipped before the retrieval fails
    /// (timeout tolerance). Data loss is never tolerated.
    fn quorum(&self) -> usize {
        self.shard_count()
    }

    /// Total indexed documents, when known. Budgets at or above this size
    /// disable the per-shard split so exhaustive retrieval stays exact even
    /// over uneven shards.
    fn total_docs(&self) -> Option<usize> {
        None
    }
}

/// Candidate set surviving one level.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub level: u8,
    /// (doc id, score at this level), tie-rule sorted, deduplicated.
    pub entries: Vec<(u64, f32)>,
    pub budget: usize,
}

/// Union partial per-shard results, deduplicate keeping the max score, sort
/// by the tie rule and truncate to the budget.
pub fn aggregate(partials: &[Vec<SearchHit>], level: u8, budget: usize) -> CandidateSet {
    let mut best: BTreeMap<u64, f32> = BTreeMap::new();
    for hits in partials {
        for h in hits {
            debug_assert_eq!(h.level, level, "partials must share one level");
            best.entry(h.doc_id)
                .and_modify(|s| {
                    if h.score > *s {
                        *s = h.score;
                    }
                })
                .or_insert(h.score);
        }
    }
    let entries = math::top_k_by_score(best.into_iter().collect(), budget);
    CandidateSet {
        level,
        entries,
        budget,
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ShardCall {
    pub shard: u32,
    pub node: u32,
    pub returned: usize,
    pub scored_docs: usize,
    pub scored_centroids: usize,
    pub restrict_misses: usize,
    pub request_bytes: usize,
    pub response_bytes: usize,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct LevelTrace {
    pub level: u8,
    pub budget: usize,
    pub per_shard_k: usize,
    /// Candidate count after aggregation.
    pub candidates: usize,
    pub shard_calls: Vec<ShardCall>,
    pub wall_ms: f64,
}

/// Execution record of one retrieval, serialized as JSON lines by the
/// bench harness.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RetrievalTrace {
    pub query_id: u64,
    pub predicted_depth: u8,
    pub confidence: f64,
    pub final_depth: u8,
    pub levels: Vec<LevelTrace>,
    pub scored_docs: usize,
    pub scored_centroids: usize,
    pub wall_ms: f64,
    /// Shards skipped under the quorum rule (timeouts, never data loss).
    pub skipped_shards: Vec<u32>,
}

impl RetrievalTrace {
    pub fn total_request_bytes(&self) -> usize {
        self.levels
            .iter()
            .flat_map(|l| &l.shard_calls)
            .map(|c| c.request_bytes)
            .sum()
    }

    pub fn total_response_bytes(&self) -> usize {
        self.levels
            .iter()
            .flat_map(|l| &l.shard_calls)
            .map(|c| c.response_bytes)
            .sum()
    }
}

/// Fraction of queries that terminated at each level 1..=max_level.
pub fn hit_attribution(traces: &[RetrievalTrace], max_level: u8) -> Vec<f64> {
    let mut counts = vec![0usize; max_level as usize];
    for t in traces {
        let l = (t.final_depth as usize).clamp(1, max_level as usize);
        counts[l - 1] += 1;
    }
    let n = traces.len().max(1) as f64;
    counts.iter().map(|c| *c as f64 / n).collect()
}

/// Execute one query against a shard set: encode, scatter level 1, refine
/// through `plan.final_depth`, return the top-k of the terminal level.
pub fn retrieve(
    searcher: &dyn ShardSearcher,
    encoder: &ProgressiveEncoder,
    plan: &QueryPlan,
    query_source: &[f32],
    k: usize,
) -> Result<(Vec<SearchHit>, RetrievalTrace)> {
    let start = Instant::now();
    let depth = plan.final_depth as usize;
    if depth == 0 || depth > encoder.levels() {
        return Err(SpiError::InvalidConfig(format!(
            "plan depth {depth} outside 1..={}",
            encoder.levels()
        )));
    }
    if plan.budgets.len() < depth {
        return Err(SpiError::InvalidConfig(
            "plan is missing per-level budgets".into(),
        ));
    }
    let queries = encoder.encode_to_depth(query_source, depth)?;
    let n_shards = searcher.shard_count();
    let quorum = searcher.quorum();

    let mut trace_levels = Vec::with_capacity(depth);
    let mut candidates: Option<CandidateSet> = None;
    let mut total_stats = SearchStats::default();
    let mut skipped: Vec<u32> = Vec::new();

    for level in 1..=depth {
        let level_start = Instant::now();
        let budget = plan.budgets[level - 1];
        // Budgets covering the whole corpus must not truncate any shard.
        let per_shard_k = match searcher.total_docs() {
            Some(total) if budget >= total => budget,
            _ => budget.div_ceil(n_shards),
        };
        let restrict: Option<BTreeSet<u64>> = match &candidates {
            None => None,
            Some(c) => Some(c.entries.iter().map(|(id, _)| *id).collect()),
        };

        let mut partials: Vec<Vec<SearchHit>> = Vec::with_capacity(n_shards);
        let mut shard_calls = Vec::with_capacity(n_shards);
        let responses = searcher.search_level(
            level as u8,
            &queries[level - 1],
            per_shard_k,
            restrict.as_ref(),
        );
        for (shard, result) in responses {
            match result {
                Ok(resp) => {
                    total_stats.add(&resp.stats);
                    shard_calls.push(ShardCall {
                        shard,
                        node: resp.served_by,
                        returned: resp.hits.len(),
                        scored_docs: resp.stats.scored_docs,
                        scored_centroids: resp.stats.scored_centroids,
                        restrict_misses: resp.stats.restrict_misses,
                        request_bytes: resp.request_bytes,
                        response_bytes: resp.response_bytes,
                    });
                    partials.push(resp.hits);
                }
                // Data loss is never quorum-tolerable.
                Err(e @ SpiError::ShardUnavailable { .. }) => return Err(e),
                Err(SpiError::NodeDown(_)) | Err(SpiError::Protocol(_)) => {
                    if !skipped.contains(&shard) {
                        skipped.push(shard);
                    }
                }
                Err(e) => return Err(e),
            }
        }
        let responded = n_shards - skipped.len();
        if responded < quorum {
            return Err(SpiError::QuorumViolation {
                responded,
                total: n_shards,
                quorum,
            });
        }

        let agg = aggregate(&partials, level as u8, budget);
        trace_levels.push(LevelTrace {
            level: level as u8,
            budget,
            per_shard_k,
            candidates: agg.entries.len(),
            shard_calls,
            wall_ms: level_start.elapsed().as_secs_f64() * 1e3,
        });
        candidates = Some(agg);
    }

    let last = candidates.expect("depth >= 1 always produces candidates");
    let hits: Vec<SearchHit> = last
        .entries
        .iter()
        .take(k)
        .map(|&(doc_id, score)| SearchHit {
            doc_id,
            score,
            level: last.level,
        })
        .collect();

    let trace = RetrievalTrace {
        query_id: 0,
        predicted_depth: plan.predicted,
        confidence: plan.confidence,
        final_depth: plan.final_depth,
        levels: trace_levels,
        scored_docs: total_stats.scored_docs,
        scored_centroids: total_stats.scored_centroids,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        skipped_shards: skipped,
    };
    Ok((hits, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hit(doc_id: u64, score: f32) -> SearchHit {
        SearchHit {
            doc_id,
            score,
            level: 1,
        }
    }

    #[test]
    fn aggregate_disjoint_is_concat_truncated() {
        let a = vec![hit(1, 0.9), hit(2, 0.5)];
        let b = vec![hit(3, 0.7), hit(4, 0.1)];
        let agg = aggregate(&[a, b], 1, 3);
        assert_eq!(
            agg.entries,
            vec![(1u64, 0.9f32), (3, 0.7), (2, 0.5)]
        );
    }

    #[test]
    fn aggregate_dedups_keeping_max() {
        let a = vec![hit(7, 0.8)];
        let b = vec![hit(7, 0.9)];
        let agg = aggregate(&[a, b], 1, 10);
        assert_eq!(agg.entries, vec![(7u64, 0.9f32)]);
    }

    #[test]
    fn aggregate_matches_naive_union_sort() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(3);
        for _ in 0..20 {
            let partials: Vec<Vec<SearchHit>> = (0..4)
                .map(|_| {
                    (0..rng.random_range(0..30))
                        .map(|_| hit(rng.random_range(0..40), (rng.random::<f32>() * 100.0).round() / 100.0))
                        .collect()
                })
                .collect();
            let budget = rng.random_range(1..20);

            // Naive oracle: collect all, fold max by id, sort, truncate.
            let mut naive: BTreeMap<u64, f32> = BTreeMap::new();
            for hs in &partials {
                for h in hs {
                    let e = naive.entry(h.doc_id).or_insert(f32::NEG_INFINITY);
                    if h.score > *e {
                        *e = h.score;
                    }
                }
            }
            let mut naive: Vec<(u64, f32)> = naive.into_iter().collect();
            naive.sort_by(math::cmp_score_id);
            naive.truncate(budget);

            let agg = aggregate(&partials, 1, budget);
            assert_eq!(agg.entries, naive);
        }
    }

    #[test]
    fn attribution_fractions_sum_to_one() {
        let mk = |d: u8| RetrievalTrace {
            query_id: 0,
            predicted_depth: d,
            confidence: 0.0,
            final_depth: d,
            levels: vec![],
            scored_docs: 0,
            scored_centroids: 0,
            wall_ms: 0.0,
            skipped_shards: vec![],
        };
        let traces: Vec<RetrievalTrace> =
            (0..10).map(|i| mk(if i < 4 { 1 } else if i < 7 { 2 } else { 3 })).collect();
        let attr = hit_attribution(&traces, 3);
        assert_eq!(attr, vec![0.4, 0.3, 0.3]);
        assert!((attr.iter().sum::<f64>() - 1.0).abs() < 1e-9);

        let fixed: Vec<RetrievalTrace> = (0..5).map(|_| mk(3)).collect();
        assert_eq!(hit_attribution(&fixed, 3), vec![0.0, 0.0, 1.0]);
    }
}
