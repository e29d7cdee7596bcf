//! Cross-level semantic consistency measurement.

use crate::error::{Result, SpiError};
use crate::math;
use crate::pyramid::{ProgressiveEncoder, PyramidEmbedding};

/// Mean over the batch of the summed squared cross-level deviations
/// sum_{l=1}^{L-1} ||e_l - proj_l(e_{l+1})||^2, with raw (unnormalized)
/// projections exactly as in the training objective.
pub fn consistency_loss(enc: &ProgressiveEncoder, batch: &[PyramidEmbedding]) -> Result<f64> {
    if batch.is_empty() {
        return Err(SpiError::EmptyInput("consistency batch"));
    }
    let levels = enc.levels();
    let mut acc = 0.0;
    for pyr in batch {
        if pyr.levels.len() != levels {
            return Err(SpiError::DimensionMismatch {
                context: "pyramid level count",
                expected: levels,
                got: pyr.levels.len(),
            });
        }
        for l in 1..levels {
            let upper = math::to_f64(pyr.level(l + 1));
            let pred = enc.projection(l).matvec(&upper);
            let lower = pyr.level(l);
            let mut d2 = 0.0;
            for (e, p) in lower.iter().zip(&pred) {
                let d = *e as f64 - p;
                d2 += d * d;
            }
            acc += d2;
        }
    }
    Ok(acc / batch.len() as f64)
}

/// Measured cross-level consistency between levels `l < lp`.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ConsistencyReport {
    pub level_from: usize,
    pub level_to: usize,
    /// Mean cosine between e_l and the projection of e_lp down to level l.
    pub rho: f64,
    /// 1 - rho.
    pub drift: f64,
    /// Mean top-K neighbor overlap between the two levels (self excluded).
    pub recall_preservation: f64,
    /// Mean and max squared deviation ||e_l - proj||^2 with the projection
    /// normalized to unit length (the bounded-norm instantiation with m = 1;
    /// cosine is scale-invariant so rho itself is unaffected).
    pub eps_mean: f64,
    pub eps_max: f64,
    /// Documents skipped because a projected vector had zero norm.
    pub excluded: usize,
}

impl ConsistencyReport {
    /// The measured quantities must satisfy rho >= 1 - eps/2 (unit norms).
    pub fn bound_holds_mean(&self) -> bool {
        self.rho >= 1.0 - self.eps_mean / 2.0 - 1e-9
    }
    pub fn bound_holds_max(&self) -> bool {
        self.rho >= 1.0 - self.eps_max / 2.0 - 1e-9
    }
}

/// Measure rho(l, lp) = E_d[cos(e_l, proj(e_lp))] over a corpus, plus the
/// top-K recall preservation between the two levels. Projection between
/// non-adjacent levels composes the adjacent maps.
///
/// `max_queries` caps the number of documents the means run over (an evenly
/// spread deterministic subset); neighbor sets are always computed against
/// the full corpus.
pub fn semantic_consistency(
    enc: &ProgressiveEncoder,
    corpus: &[PyramidEmbedding],
    level_from: usize,
    level_to: usize,
    k: usize,
    max_queries: usize,
) -> Result<ConsistencyReport> {
    if corpus.is_empty() {
        return Err(SpiError::EmptyInput("consistency corpus"));
    }
    if level_from >= level_to || level_to > enc.levels() {
        return Err(SpiError::InvalidConfig(format!(
            "need 1 <= l < lp <= L, got ({level_from}, {level_to})"
        )));
    }
    let query_idx = spread_indices(corpus.len(), max_queries.max(1));

    let mut cos_acc = 0.0;
    let mut eps_acc = 0.0;
    let mut eps_max = 0.0f64;
    let mut excluded = 0usize;
    let mut counted = 0usize;
    for &qi in &query_idx {
        let pyr = &corpus[qi];
        let lower = math::to_f64(pyr.level(level_from));
        let upper = math::to_f64(pyr.level(level_to));
        let mut pred = enc.project_down(level_to, level_from, &upper);
        let pn = math::norm_f64(&pred);
        let ln = math::norm_f64(&lower);
        if pn < 1e-12 || ln < 1e-12 {
            excluded += 1;
            continue;
        }
        let cos = math::dot_f64(&lower, &pred) / (ln * pn);
        cos_acc += cos;
        for v in &mut pred {
            *v /= pn;
        }
        let mut d2 = 0.0;
        for (e, p) in lower.iter().zip(&pred) {
            let d = e / ln - p;
            d2 += d * d;
        }
        eps_acc += d2;
        eps_max = eps_max.max(d2);
        counted += 1;
    }
    if counted == 0 {
        return Err(SpiError::ZeroVector("all projections degenerate"));
    }
    let rho = cos_acc / counted as f64;

    let recall_preservation = neighbor_overlap(corpus, &query_idx, level_from, level_to, k);

    Ok(ConsistencyReport {
        level_from,
        level_to,
        rho,
        drift: 1.0 - rho,
        recall_preservation,
        eps_mean: eps_acc / counted as f64,
        eps_max,
        excluded,
    })
}

fn spread_indices(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    (0..max).map(|i| i * n / max).collect()
}

/// Mean fraction of each query document's top-k neighbor set (within the
/// full corpus, self excluded) shared between the two levels.
fn neighbor_overlap(
    corpus: &[PyramidEmbedding],
    query_idx: &[usize],
    la: usize,
    lb: usize,
    k: usize,
) -> f64 {
    let n = corpus.len();
    if n < 2 || k == 0 || query_idx.is_empty() {
        return 1.0;
    }
    let k = k.min(n - 1);
    let mut overlap_acc = 0.0;
    for &qi in query_idx {
        let q = &corpus[qi];
        let top = |level: usize| -> Vec<u64> {
            let qv = q.level(level);
            let mut scored: Vec<(u64, f32)> = corpus
                .iter()
                .enumerate()
                .filter(|(di, _)| *di != qi)
                .map(|(_, d)| (d.doc_id, math::dot_f32(qv, d.level(level))))
                .collect();
            scored.sort_by(math::cmp_score_id);
            scored.truncate(k);
            scored.into_iter().map(|(id, _)| id).collect()
        };
        let ta = top(la);
        let tb = top(lb);
        let inter = ta.iter().filter(|id| tb.contains(id)).count();
        overlap_acc += inter as f64 / k as f64;
    }
    overlap_acc / query_idx.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Mat;
    use crate::pyramid::{build_pyramid, random_encoder, PyramidDims};

    fn sample_pyramids(enc: &ProgressiveEncoder, n: usize, seed: u64) -> Vec<PyramidEmbedding> {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let src: Vec<f32> = (0..enc.dims.source_dim())
                    .map(|_| rng.random::<f32>() * 2.0 - 1.0)
                    .collect();
                build_pyramid(i as u64, &src, enc).unwrap()
            })
            .collect()
    }

    /// An exact inverse projection yields zero loss and rho = 1.
    #[test]
    fn exact_projection_is_lossless() {
        let dims = PyramidDims::new(vec![4, 8]).unwrap();
        let mut enc = random_encoder(dims, 0.0, 2);
        // Make level 2 the identity-padded level 1, and proj the truncation:
        // proj(e2) recovers e1 exactly.
        for stage in &mut enc.stages {
            stage.refine.scale(0.0);
            for b in &mut stage.bias {
                *b = 0.0;
            }
            stage.skip = Mat::identity_pad(8, 4);
        }
        enc.projections[0] = Mat::identity_pad(4, 8);
        let pyr = sample_pyramids(&enc, 20, 5);
        let loss = consistency_loss(&enc, &pyr).unwrap();
        assert!(loss < 1e-10, "loss {loss}");
        let rep = semantic_consistency(&enc, &pyr, 1, 2, 5, usize::MAX).unwrap();
        assert!((rep.rho - 1.0).abs() < 1e-9);
        assert!(rep.drift.abs() < 1e-9);
        assert!(rep.bound_holds_mean() && rep.bound_holds_max());
    }

    /// Orthonormal vector pairs are exactly 2.0 apart in squared distance.
    #[test]
    fn orthogonal_projection_scores_two() {
        let dims = PyramidDims::new(vec![2, 4]).unwrap();
        let mut enc = random_encoder(dims, 0.0, 3);
        // e1 ends up one-hot on axis 0; make proj map e2 onto axis 1.
        enc.base_reducer = Mat::from_fn(2, 4, |r, c| if r == 0 && c == 0 { 1.0 } else { 0.0 });
        for stage in &mut enc.stages {
            stage.refine.scale(0.0);
            for b in &mut stage.bias {
                *b = 0.0;
            }
            stage.skip = Mat::identity_pad(4, 2);
        }
        // proj(e2): rotate the padded e1 (axis 0) onto axis 1.
        enc.projections[0] = Mat::from_fn(2, 4, |r, c| if r == 1 && c == 0 { 1.0 } else { 0.0 });
        let mut src = vec![0.0f32; 4];
        src[0] = 2.0;
        let pyr = vec![build_pyramid(0, &src, &enc).unwrap()];
        let loss = consistency_loss(&enc, &pyr).unwrap();
        assert!((loss - 2.0).abs() < 1e-9, "per-term loss {loss}");
    }

    /// Random batch agrees with a naive scalar-loop recomputation.
    #[test]
    fn matches_naive_double_loop_oracle() {
        let dims = PyramidDims::new(vec![3, 5, 9]).unwrap();
        let enc = random_encoder(dims, 0.5, 7);
        let pyrs = sample_pyramids(&enc, 17, 13);

        // Independent recomputation with explicit index loops.
        let mut naive = 0.0f64;
        for pyr in &pyrs {
            for l in 1..3usize {
                let proj = enc.projection(l);
                let upper = pyr.level(l + 1);
                let lower = pyr.level(l);
                for r in 0..proj.rows {
                    let mut pred = 0.0f64;
                    for c in 0..proj.cols {
                        pred += proj.at(r, c) * upper[c] as f64;
                    }
                    let d = lower[r] as f64 - pred;
                    naive += d * d;
                }
            }
        }
        naive /= pyrs.len() as f64;

        let fast = consistency_loss(&enc, &pyrs).unwrap();
        let rel = (fast - naive).abs() / naive.abs().max(1e-12);
        assert!(rel < 1e-6, "relative error {rel}");
    }

    #[test]
    fn bound_coherence_on_random_encoder() {
        let dims = PyramidDims::new(vec![3, 5, 9]).unwrap();
        let enc = random_encoder(dims, 0.5, 19);
        let pyrs = sample_pyramids(&enc, 50, 29);
        for (a, b) in [(1usize, 2usize), (2, 3), (1, 3)] {
            let rep = semantic_consistency(&enc, &pyrs, a, b, 5, usize::MAX).unwrap();
            assert!(rep.bound_holds_mean(), "mean bound failed for ({a},{b}): {rep:?}");
            assert!(rep.bound_holds_max(), "max bound failed for ({a},{b}): {rep:?}");
            assert!(rep.rho >= -1.0 && rep.rho <= 1.0);
        }
    }
}
