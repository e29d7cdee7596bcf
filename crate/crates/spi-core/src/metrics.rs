//! Retrieval quality and cost metrics.

use std::collections::BTreeMap;

use crate::error::{Result, SpiError};
use crate::math;

/// Exact cosine top-k by full scan under the global tie rule. Ground truth
/// for every recall measurement.
pub fn oracle_topk(
    vectors: &BTreeMap<u64, Vec<f32>>,
    query: &[f32],
    k: usize,
) -> Vec<(u64, f32)> {
    let scored: Vec<(u64, f32)> = vectors
        .iter()
        .map(|(&id, v)| {
            let qn = math::norm_f32(query);
            let vn = math::norm_f32(v);
            let denom = qn * vn;
            let s = if denom > 0.0 {
                math::dot_f32(query, v) / denom
            } else {
                0.0
            };
            (id, s)
        })
        .collect();
    math::top_k_by_score(scored, k)
}

/// recall@k: fraction of the exact top-k present in the returned top-k.
pub fn recall_at_k(results: &[u64], truth: &[u64], k: usize) -> f64 {
    if k == 0 || truth.is_empty() {
        return 1.0;
    }
    let k = k.min(truth.len());
    let truth_k = &truth[..k];
    let hits = results
        .iter()
        .take(k)
        .filter(|id| truth_k.contains(id))
        .count();
    hits as f64 / k as f64
}

/// NDCG@k with binary gains and log2 discounts.
pub fn ndcg_at_k(results: &[u64], truth: &[u64], k: usize) -> f64 {
    let k = k.min(truth.len().max(1));
    let truth_k = &truth[..k.min(truth.len())];
    let mut dcg = 0.0;
    for (i, id) in results.iter().take(k).enumerate() {
        if truth_k.contains(id) {
            dcg += 1.0 / ((i + 2) as f64).log2();
        }
    }
    let mut idcg = 0.0;
    for i in 0..truth_k.len().min(k) {
        idcg += 1.0 / ((i + 2) as f64).log2();
    }
    if idcg > 0.0 {
        dcg / idcg
    } else {
        0.0
    }
}

/// MRR@k: reciprocal rank of the first relevant result, 0 when none.
pub fn mrr_at_k(results: &[u64], truth: &[u64], k: usize) -> f64 {
    let truth_k = &truth[..k.min(truth.len())];
    for (i, id) in results.iter().take(k).enumerate() {
        if truth_k.contains(id) {
            return 1.0 / (i + 1) as f64;
        }
    }
    0.0
}

/// Aggregated quality / cost measurements for one benchmark run.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MetricsRecord {
    pub queries: usize,
    /// Queries dropped because no truth row existed.
    pub excluded: usize,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub recall_at_10: f64,
    pub recall_at_20: f64,
    pub ndcg_at_10: f64,
    pub mrr_at_10: f64,
    pub mean_latency_ms: f64,
    pub p50_latency_ms: f64,
    pub p99_latency_ms: f64,
    pub qps: f64,
    pub index_bytes: u64,
    pub mean_scored_docs: f64,
    pub mean_scored_centroids: f64,
}

/// Compute the metric block from per-query results and truth, aligned by
/// query id. Queries missing from `truth` are excluded and counted.
pub fn compute_metrics(
    results: &BTreeMap<u64, Vec<u64>>,
    truth: &BTreeMap<u64, Vec<u64>>,
    latencies_ms: &[f64],
    index_bytes: u64,
    scored_docs: &[usize],
    scored_centroids: &[usize],
) -> Result<MetricsRecord> {
    if results.is_empty() {
        return Err(SpiError::EmptyInput("metrics results"));
    }
    let mut excluded = 0usize;
    let mut r1 = 0.0;
    let mut r5 = 0.0;
    let mut r10 = 0.0;
    let mut r20 = 0.0;
    let mut ndcg = 0.0;
    let mut mrr = 0.0;
    let mut counted = 0usize;
    for (qid, res) in results {
        let Some(t) = truth.get(qid) else {
            excluded += 1;
            continue;
        };
        r1 += recall_at_k(res, t, 1);
        r5 += recall_at_k(res, t, 5);
        r10 += recall_at_k(res, t, 10);
        r20 += recall_at_k(res, t, 20);
        ndcg += ndcg_at_k(res, t, 10);
        mrr += mrr_at_k(res, t, 10);
        counted += 1;
    }
    if counted == 0 {
        return Err(SpiError::EmptyInput("metrics: no aligned queries"));
    }
    let n = counted as f64;
    let mean_latency = mean(latencies_ms);
    let total_s: f64 = latencies_ms.iter().sum::<f64>() / 1e3;
    Ok(MetricsRecord {
        queries: counted,
        excluded,
        recall_at_1: r1 / n,
        recall_at_5: r5 / n,
        recall_at_10: r10 / n,
        recall_at_20: r20 / n,
        ndcg_at_10: ndcg / n,
        mrr_at_10: mrr / n,
        mean_latency_ms: mean_latency,
        p50_latency_ms: percentile(latencies_ms, 0.50),
        p99_latency_ms: percentile(latencies_ms, 0.99),
        qps: if total_s > 0.0 {
            latencies_ms.len() as f64 / total_s
        } else {
            0.0
        },
        index_bytes,
        mean_scored_docs: mean_usize(scored_docs),
        mean_scored_centroids: mean_usize(scored_centroids),
    })
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn mean_usize(v: &[usize]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<usize>() as f64 / v.len() as f64
    }
}

/// Nearest-rank percentile on a sorted copy.
pub fn percentile(v: &[f64], p: f64) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::{brute_force_topk, IndexSpec, LevelIndex};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn perfect_results_score_one() {
        let truth: Vec<u64> = (0..10).collect();
        assert_eq!(recall_at_k(&truth, &truth, 10), 1.0);
        assert_eq!(ndcg_at_k(&truth, &truth, 10), 1.0);
        assert_eq!(mrr_at_k(&truth, &truth, 10), 1.0);
    }

    #[test]
    fn first_relevant_at_rank_three() {
        let truth = vec![42u64];
        let results = vec![1u64, 2, 42, 3];
        assert!((mrr_at_k(&results, &truth, 10) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_equals_full_take() {
        let mut vectors = BTreeMap::new();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for id in 0..50u64 {
            let v: Vec<f32> = (0..8).map(|_| rng.random::<f32>() - 0.5).collect();
            vectors.insert(id, math::normalized_f32(&v, "t").unwrap());
        }
        let q: Vec<f32> = (0..8).map(|_| rng.random::<f32>() - 0.5).collect();
        let all = oracle_topk(&vectors, &q, 50);
        assert_eq!(all.len(), 50);
        assert!(all.windows(2).all(|w| w[0].1 >= w[1].1));
        let self_q = vectors[&7].clone();
        let top = oracle_topk(&vectors, &self_q, 1);
        assert_eq!(top[0].0, 7);
        assert!((top[0].1 - 1.0).abs() < 1e-6);
    }

    /// The oracle agrees with Flat index search on random instances.
    #[test]
    fn oracle_agrees_with_flat_index() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for round in 0..100 {
            let n = rng.random_range(5..60);
            let mut vectors = BTreeMap::new();
            for id in 0..n as u64 {
                let v: Vec<f32> = (0..6).map(|_| rng.random::<f32>() - 0.5).collect();
                vectors.insert(id, math::normalized_f32(&v, "t").unwrap());
            }
            let idx = LevelIndex::build(&vectors, 1, IndexSpec::flat(), 0).unwrap();
            let q: Vec<f32> = (0..6).map(|_| rng.random::<f32>() - 0.5).collect();
            let qn = math::normalized_f32(&q, "t").unwrap();
            let k = rng.random_range(1..=n);
            let (hits, _) = idx.search(&qn, k, None).unwrap();
            let oracle = oracle_topk(&vectors, &qn, k);
            assert_eq!(
                hits.iter().map(|h| h.doc_id).collect::<Vec<_>>(),
                oracle.iter().map(|(id, _)| *id).collect::<Vec<_>>(),
                "round {round}"
            );
            let brute = brute_force_topk(&vectors, &qn, k);
            assert_eq!(oracle.iter().map(|x| x.0).collect::<Vec<_>>(),
                       brute.iter().map(|x| x.0).collect::<Vec<_>>());
        }
    }

    /// Randomized metric block matches an independent scalar recomputation.
    #[test]
    fn metrics_match_independent_recomputation() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let mut results = BTreeMap::new();
        let mut truth = BTreeMap::new();
        for qid in 0..40u64 {
            let res: Vec<u64> = (0..20).map(|_| rng.random_range(0..100u64)).collect();
            let tr: Vec<u64> = (0..20).map(|_| rng.random_range(0..100u64)).collect();
            results.insert(qid, res);
            if qid % 10 != 9 {
                truth.insert(qid, tr);
            }
        }
        let lat: Vec<f64> = (0..40).map(|_| rng.random::<f64>() * 10.0).collect();
        let scored: Vec<usize> = (0..40).map(|_| rng.random_range(100..1000)).collect();
        let rec = compute_metrics(&results, &truth, &lat, 1234, &scored, &[]).unwrap();

        // Independent recomputation, written as plain loops.
        let mut exp_r10 = 0.0;
        let mut exp_ndcg = 0.0;
        let mut exp_mrr = 0.0;
        let mut counted = 0;
        for (qid, res) in &results {
            let Some(t) = truth.get(qid) else { continue };
            counted += 1;
            let t10: Vec<u64> = t.iter().take(10).copied().collect();
            let mut hits = 0;
            for r in res.iter().take(10) {
                if t10.contains(r) {
                    hits += 1;
                }
            }
            exp_r10 += hits as f64 / 10.0;
            let mut dcg = 0.0;
            for (i, r) in res.iter().take(10).enumerate() {
                if t10.contains(r) {
                    dcg += 1.0 / ((i as f64) + 2.0).log2();
                }
            }
            let mut idcg = 0.0;
            for i in 0..10 {
                idcg += 1.0 / ((i as f64) + 2.0).log2();
            }
            exp_ndcg += dcg / idcg;
            let mut rr = 0.0;
            for (i, r) in res.iter().take(10).enumerate() {
                if t10.contains(r) {
                    rr = 1.0 / (i as f64 + 1.0);
                    break;
                }
            }
            exp_mrr += rr;
        }
        let n = counted as f64;
        assert_eq!(rec.queries, counted);
        assert_eq!(rec.excluded, 4);
        assert!((rec.recall_at_10 - exp_r10 / n).abs() < 1e-9);
        assert!((rec.ndcg_at_10 - exp_ndcg / n).abs() < 1e-9);
        assert!((rec.mrr_at_10 - exp_mrr / n).abs() < 1e-9);
        assert!(rec.p50_latency_ms <= rec.p99_latency_ms);
    }
}
