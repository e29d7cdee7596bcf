//! Joint training of the progressive encoder.
//!
//! Total loss = sum_l alpha_l * InfoNCE_l + beta * consistency + gamma * reg,
//! minimized by plain mini-batch gradient descent with momentum. Gradients
//! are computed by a hand-rolled reverse pass through the level recurrence
//! (including the per-level normalization and the source blend at the finest
//! level); the analytic gradients are validated against central finite
//! differences in the test suite.

use crate::error::{Result, SpiError};
use crate::math::{self, Mat};
use crate::pyramid::{ProgressiveEncoder, Stage};

/// One batch of (anchor, positive) source-vector pairs. In-batch negatives
/// require at least two pairs.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub anchors: Vec<Vec<f32>>,
    pub positives: Vec<Vec<f32>>,
}

impl TrainingBatch {
    pub fn new(anchors: Vec<Vec<f32>>, positives: Vec<Vec<f32>>) -> Result<Self> {
        if anchors.len() != positives.len() {
            return Err(SpiError::InvalidConfig(format!(
                "anchors ({}) and positives ({}) differ in length",
                anchors.len(),
                positives.len()
            )));
        }
        if anchors.len() < 2 {
            return Err(SpiError::TooFewVectors {
                context: "training batch (in-batch negatives)",
                required: 2,
                got: anchors.len(),
            });
        }
        Ok(TrainingBatch { anchors, positives })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// Fraction of batches held out for the before/after loss comparison.
    pub holdout_frac: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.5,
            momentum: 0.9,
            epochs: 10,
            holdout_frac: 0.1,
        }
    }
}

/// Per-epoch mean loss components over the training batches.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub retrieval: Vec<f64>,
    pub consistency: f64,
    pub reg: f64,
    pub total: f64,
}

#[derive(Debug)]
pub struct TrainReport {
    pub encoder: ProgressiveEncoder,
    pub history: Vec<EpochStats>,
    pub holdout_before: f64,
    pub holdout_after: f64,
    /// Set when a loss went non-finite; the returned encoder is the last
    /// finite checkpoint.
    pub diverged_at: Option<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct LossParts {
    pub retrieval: Vec<f64>,
    pub consistency: f64,
    pub reg: f64,
    pub total: f64,
}

/// Gradient accumulator shaped like the trainable parameters.
pub(crate) struct GradBuf {
    pub stages: Vec<Stage>,
    pub projections: Vec<Mat>,
}

impl GradBuf {
    fn zeros_like(enc: &ProgressiveEncoder) -> Self {
        GradBuf {
            stages: enc
                .stages
                .iter()
                .map(|s| Stage {
                    refine: Mat::zeros(s.refine.rows, s.refine.cols),
                    bias: vec![0.0; s.bias.len()],
                    skip: Mat::zeros(s.skip.rows, s.skip.cols),
                })
                .collect(),
            projections: enc
                .projections
                .iter()
                .map(|p| Mat::zeros(p.rows, p.cols))
                .collect(),
        }
    }

    fn scale(&mut self, s: f64) {
        for st in &mut self.stages {
            st.refine.scale(s);
            st.skip.scale(s);
            for b in &mut st.bias {
                *b *= s;
            }
        }
        for p in &mut self.projections {
            p.scale(s);
        }
    }

    fn add_scaled(&mut self, s: f64, other: &GradBuf) {
        for (a, b) in self.stages.iter_mut().zip(&other.stages) {
            a.refine.add_scaled(s, &b.refine);
            a.skip.add_scaled(s, &b.skip);
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += s * y;
            }
        }
        for (a, b) in self.projections.iter_mut().zip(&other.projections) {
            a.add_scaled(s, b);
        }
    }
}

/// Forward intermediates of one document.
struct DocTrace {
    source: Vec<f64>,
    /// Normalized level embeddings, 1-based at index l-1.
    e: Vec<Vec<f64>>,
    /// Pre-normalization norms per level.
    n: Vec<f64>,
}

fn forward_doc(enc: &ProgressiveEncoder, source: &[f32]) -> Result<DocTrace> {
    let src = math::to_f64(source);
    let levels = enc.levels();
    let mut e: Vec<Vec<f64>> = Vec::with_capacity(levels);
    let mut n: Vec<f64> = Vec::with_capacity(levels);

    let mut r1 = enc.base_reducer.matvec(&src);
    let n1 = math::norm_f64(&r1);
    if !n1.is_finite() || n1 < 1e-12 {
        return Err(SpiError::ZeroVector("training level-1"));
    }
    for v in &mut r1 {
        *v /= n1;
    }
    e.push(r1);
    n.push(n1);

    for l in 2..=levels {
        let stage = enc.stage(l);
        let mut raw = stage.refine.matvec(&e[l - 2]);
        for (r, b) in raw.iter_mut().zip(&stage.bias) {
            *r += b;
        }
        let skip = stage.skip.matvec(&e[0]);
        for (r, s) in raw.iter_mut().zip(&skip) {
            *r += s;
        }
        if l == levels {
            let lam = enc.source_blend;
            for (r, s) in raw.iter_mut().zip(&src) {
                *r = lam * s + (1.0 - lam) * *r;
            }
        }
        let nl = math::norm_f64(&raw);
        if !nl.is_finite() || nl < 1e-12 {
            return Err(SpiError::ZeroVector("training refined level"));
        }
        for v in &mut raw {
            *v /= nl;
        }
        e.push(raw);
        n.push(nl);
    }
    Ok(DocTrace { source: src, e, n })
}

/// Backpropagate accumulated embedding gradients of one document into the
/// parameter gradient buffer. `ge[l-1]` holds dLoss/d e_l on entry.
fn backward_doc(enc: &ProgressiveEncoder, trace: &DocTrace, mut ge: Vec<Vec<f64>>, grad: &mut GradBuf) {
    let levels = enc.levels();
    for l in (2..=levels).rev() {
        let g = std::mem::take(&mut ge[l - 1]);
        if g.iter().all(|v| *v == 0.0) {
            continue;
        }
        let e = &trace.e[l - 1];
        // Through normalization: d raw = (g - (g . e) e) / n.
        let ge_dot = math::dot_f64(&g, e);
        let inv_n = 1.0 / trace.n[l - 1];
        let mut gr: Vec<f64> = g
            .iter()
            .zip(e)
            .map(|(gv, ev)| (gv - ge_dot * ev) * inv_n)
            .collect();
        // The finest level blends the raw source; only the refinement branch
        // carries parameters.
        if l == levels {
            let w = 1.0 - enc.source_blend;
            for v in &mut gr {
                *v *= w;
            }
        }
        let sg = &mut grad.stages[l - 2];
        sg.refine.add_outer(1.0, &gr, &trace.e[l - 2]);
        for (b, v) in sg.bias.iter_mut().zip(&gr) {
            *b += v;
        }
        sg.skip.add_outer(1.0, &gr, &trace.e[0]);

        let stage = enc.stage(l);
        let back_prev = stage.refine.matvec_t(&gr);
        for (dst, v) in ge[l - 2].iter_mut().zip(&back_prev) {
            *dst += v;
        }
        let back_one = stage.skip.matvec_t(&gr);
        for (dst, v) in ge[0].iter_mut().zip(&back_one) {
            *dst += v;
        }
    }
    // Level 1 is produced by the fixed base reducer: nothing to train there.
    let _ = trace.source;
}

/// Loss and parameter gradients for one batch.
pub(crate) fn batch_loss_grad(
    enc: &ProgressiveEncoder,
    batch: &TrainingBatch,
) -> Result<(LossParts, GradBuf)> {
    let levels = enc.levels();
    let b = batch.len();
    let tau = enc.temperature;
    let w = &enc.weights;

    let anchors: Vec<DocTrace> = batch
        .anchors
        .iter()
        .map(|v| forward_doc(enc, v))
        .collect::<Result<_>>()?;
    let positives: Vec<DocTrace> = batch
        .positives
        .iter()
        .map(|v| forward_doc(enc, v))
        .collect::<Result<_>>()?;

    // Embedding-gradient slots per doc per level.
    let mut ge_a: Vec<Vec<Vec<f64>>> = anchors
        .iter()
        .map(|t| t.e.iter().map(|e| vec![0.0; e.len()]).collect())
        .collect();
    let mut ge_p: Vec<Vec<Vec<f64>>> = positives
        .iter()
        .map(|t| t.e.iter().map(|e| vec![0.0; e.len()]).collect())
        .collect();

    let mut grad = GradBuf::zeros_like(enc);
    let mut parts = LossParts {
        retrieval: vec![0.0; levels],
        ..Default::default()
    };

    // In-batch InfoNCE per level: rows are anchors, columns positives.
    for l in 1..=levels {
        let alpha = w.alpha[l - 1];
        let mut level_loss = 0.0;
        let mut sims = vec![0.0f64; b * b];
        for i in 0..b {
            for j in 0..b {
                sims[i * b + j] = math::dot_f64(&anchors[i].e[l - 1], &positives[j].e[l - 1]) / tau;
            }
        }
        for i in 0..b {
            let row = &sims[i * b..(i + 1) * b];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            level_loss += -(exps[i] / z).ln();
            if alpha > 0.0 {
                for j in 0..b {
                    let softmax = exps[j] / z;
                    let ds = (softmax - if i == j { 1.0 } else { 0.0 }) / b as f64;
                    let coef = alpha * ds / tau;
                    for (dst, v) in ge_a[i][l - 1].iter_mut().zip(&positives[j].e[l - 1]) {
                        *dst += coef * v;
                    }
                    for (dst, v) in ge_p[j][l - 1].iter_mut().zip(&anchors[i].e[l - 1]) {
                        *dst += coef * v;
                    }
                }
            }
        }
        parts.retrieval[l - 1] = level_loss / b as f64;
    }

    // Cross-level consistency over anchors and positives.
    let n_docs = (2 * b) as f64;
    let mut cons = 0.0;
    {
        let mut docs: Vec<(&DocTrace, &mut Vec<Vec<f64>>)> = Vec::with_capacity(2 * b);
        for (t, g) in anchors.iter().zip(ge_a.iter_mut()) {
            docs.push((t, g));
        }
        for (t, g) in positives.iter().zip(ge_p.iter_mut()) {
            docs.push((t, g));
        }
        for (trace, ge) in docs {
            for l in 1..levels {
                let proj = enc.projection(l);
                let pred = proj.matvec(&trace.e[l]);
                let diff: Vec<f64> = trace.e[l - 1]
                    .iter()
                    .zip(&pred)
                    .map(|(e, p)| e - p)
                    .collect();
                cons += math::dot_f64(&diff, &diff);
                if w.beta > 0.0 {
                    let coef = 2.0 * w.beta / n_docs;
                    for (dst, d) in ge[l - 1].iter_mut().zip(&diff) {
                        *dst += coef * d;
                    }
                    grad.projections[l - 1].add_outer(-coef, &diff, &trace.e[l]);
                    let back = proj.matvec_t(&diff);
                    for (dst, v) in ge[l].iter_mut().zip(&back) {
                        *dst -= coef * v;
                    }
                }
            }
        }
    }
    parts.consistency = cons / n_docs;

    // Parameter-norm regularizer over every trained parameter.
    let mut reg = 0.0;
    for (sg, s) in grad.stages.iter_mut().zip(&enc.stages) {
        reg += s.refine.frobenius_sq() + s.skip.frobenius_sq();
        reg += s.bias.iter().map(|v| v * v).sum::<f64>();
        if w.gamma > 0.0 {
            sg.refine.add_scaled(2.0 * w.gamma, &s.refine);
            sg.skip.add_scaled(2.0 * w.gamma, &s.skip);
            for (g, v) in sg.bias.iter_mut().zip(&s.bias) {
                *g += 2.0 * w.gamma * v;
            }
        }
    }
    for (pg, p) in grad.projections.iter_mut().zip(&enc.projections) {
        reg += p.frobenius_sq();
        if w.gamma > 0.0 {
            pg.add_scaled(2.0 * w.gamma, p);
        }
    }
    parts.reg = reg;

    for (trace, ge) in anchors.iter().zip(ge_a) {
        backward_doc(enc, trace, ge, &mut grad);
    }
    for (trace, ge) in positives.iter().zip(ge_p) {
        backward_doc(enc, trace, ge, &mut grad);
    }

    parts.total = parts
        .retrieval
        .iter()
        .zip(&w.alpha)
        .map(|(l, a)| a * l)
        .sum::<f64>()
        + w.beta * parts.consistency
        + w.gamma * parts.reg;
    Ok((parts, grad))
}

/// Loss only (no gradients), used for holdout evaluation.
pub fn batch_loss(enc: &ProgressiveEncoder, batch: &TrainingBatch) -> Result<LossParts> {
    // The gradient path is cheap at desk scale; reuse it.
    Ok(batch_loss_grad(enc, batch)?.0)
}

fn mean_holdout_loss(enc: &ProgressiveEncoder, batches: &[TrainingBatch]) -> Result<f64> {
    if batches.is_empty() {
        return Ok(f64::INFINITY);
    }
    let mut acc = 0.0;
    for b in batches {
        acc += batch_loss(enc, b)?.total;
    }
    Ok(acc / batches.len() as f64)
}

/// Train the encoder in place over the given batch stream.
///
/// The returned encoder is the checkpoint with the best holdout loss seen,
/// so it never regresses past the untrained initialization. A non-finite
/// loss aborts with the last finite checkpoint and `diverged_at` set.
pub fn train_encoder(
    init: ProgressiveEncoder,
    batches: &[TrainingBatch],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if batches.is_empty() {
        return Err(SpiError::EmptyInput("training batches"));
    }
    init.weights.validate(init.levels())?;

    let n_holdout = ((batches.len() as f64 * cfg.holdout_frac).round() as usize)
        .min(batches.len() - 1);
    let (train, holdout) = batches.split_at(batches.len() - n_holdout);

    let holdout_before = mean_holdout_loss(&init, holdout)?;
    let mut enc = init.clone();
    let mut best = init.clone();
    let mut best_loss = holdout_before;
    let mut velocity = GradBuf::zeros_like(&enc);
    let mut history = Vec::new();
    let mut diverged_at = None;

    'epochs: for epoch in 0..cfg.epochs {
        let mut sums = LossParts {
            retrieval: vec![0.0; enc.levels()],
            ..Default::default()
        };
        for batch in train {
            // A blown-up forward pass (zero or non-finite norms) is the same
            // failure mode as a non-finite loss: abort to the last checkpoint.
            let (parts, grad) = match batch_loss_grad(&enc, batch) {
                Ok(v) => v,
                Err(SpiError::ZeroVector(_)) | Err(SpiError::NonFinite(_)) => {
                    diverged_at = Some(epoch);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            if !parts.total.is_finite() {
                diverged_at = Some(epoch);
                break 'epochs;
            }
            for (s, v) in sums.retrieval.iter_mut().zip(&parts.retrieval) {
                *s += v;
            }
            sums.consistency += parts.consistency;
            sums.reg += parts.reg;
            sums.total += parts.total;

            velocity.scale(cfg.momentum);
            velocity.add_scaled(-cfg.learning_rate, &grad);
            for (stage, vs) in enc.stages.iter_mut().zip(&velocity.stages) {
                stage.refine.add_scaled(1.0, &vs.refine);
                stage.skip.add_scaled(1.0, &vs.skip);
                for (b, v) in stage.bias.iter_mut().zip(&vs.bias) {
                    *b += v;
                }
            }
            for (proj, vp) in enc.projections.iter_mut().zip(&velocity.projections) {
                proj.add_scaled(1.0, vp);
            }
        }
        let finite = enc.stages.iter().all(|s| {
            s.refine.is_finite() && s.skip.is_finite() && s.bias.iter().all(|v| v.is_finite())
        }) && enc.projections.iter().all(|p| p.is_finite());
        if !finite {
            diverged_at = Some(epoch);
            break;
        }
        let nb = train.len() as f64;
        history.push(EpochStats {
            epoch,
            retrieval: sums.retrieval.iter().map(|v| v / nb).collect(),
            consistency: sums.consistency / nb,
            reg: sums.reg / nb,
            total: sums.total / nb,
        });
        let hl = mean_holdout_loss(&enc, holdout)?;
        if hl.is_finite() && hl <= best_loss {
            best_loss = hl;
            best = enc.clone();
        }
    }

    let holdout_after = mean_holdout_loss(&best, holdout)?;
    Ok(TrainReport {
        encoder: best,
        history,
        holdout_before,
        holdout_after,
        diverged_at,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::{random_encoder, PyramidDims};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn toy_batch(n: usize, dim: usize, seed: u64) -> TrainingBatch {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let anchors: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect())
            .collect();
        let positives: Vec<Vec<f32>> = anchors
            .iter()
            .map(|a| {
                a.iter()
                    .map(|x| x + (rng.random::<f32>() - 0.5) * 0.1)
                    .collect()
            })
            .collect();
        TrainingBatch::new(anchors, positives).unwrap()
    }

    /// Flatten every trainable parameter for the finite-difference sweep.
    fn param_slots(enc: &mut ProgressiveEncoder) -> Vec<*mut f64> {
        let mut slots = Vec::new();
        for s in &mut enc.stages {
            for v in &mut s.refine.data {
                slots.push(v as *mut f64);
            }
            for v in &mut s.bias {
                slots.push(v as *mut f64);
            }
            for v in &mut s.skip.data {
                slots.push(v as *mut f64);
            }
        }
        for p in &mut enc.projections {
            for v in &mut p.data {
                slots.push(v as *mut f64);
            }
        }
        slots
    }

    fn grad_slots(g: &GradBuf) -> Vec<f64> {
        let mut out = Vec::new();
        for s in &g.stages {
            out.extend_from_slice(&s.refine.data);
            out.extend_from_slice(&s.bias);
            out.extend_from_slice(&s.skip.data);
        }
        for p in &g.projections {
            out.extend_from_slice(&p.data);
        }
        out
    }

    /// Analytic gradients match central finite differences to 1e-4 relative
    /// on a 3-doc, 2-level toy instance.
    #[test]
    fn gradients_match_finite_differences() {
        let dims = PyramidDims::new(vec![3, 5]).unwrap();
        let mut enc = random_encoder(dims, 0.5, 11);
        enc.weights = crate::pyramid::LossWeights {
            alpha: vec![0.6, 0.4],
            beta: 0.7,
            gamma: 1e-3,
        };
        let batch = toy_batch(3, 5, 21);

        let (_, grad) = batch_loss_grad(&enc, &batch).unwrap();
        let analytic = grad_slots(&grad);
        let slots = param_slots(&mut enc);
        assert_eq!(analytic.len(), slots.len());

        let h = 1e-5;
        let mut max_rel = 0.0f64;
        for (i, &slot) in slots.iter().enumerate() {
            let orig = unsafe { *slot };
            unsafe { *slot = orig + h };
            let up = batch_loss(&enc, &batch).unwrap().total;
            unsafe { *slot = orig - h };
            let down = batch_loss(&enc, &batch).unwrap().total;
            unsafe { *slot = orig };
            let fd = (up - down) / (2.0 * h);
            let denom = fd.abs().max(analytic[i].abs()).max(1e-6);
            let rel = (fd - analytic[i]).abs() / denom;
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel < 1e-4, "max relative gradient error {max_rel}");
    }

    /// With a degenerate all-equal batch, every similarity coincides and the
    /// per-pair contrastive loss is exactly ln(batch size).
    #[test]
    fn uniform_similarities_give_log_batch_loss() {
        let dims = PyramidDims::new(vec![3, 5]).unwrap();
        let enc = random_encoder(dims, 0.5, 3);
        let v: Vec<f32> = vec![0.3, -0.2, 0.9, 0.1, 0.5];
        let batch = TrainingBatch::new(vec![v.clone(); 4], vec![v.clone(); 4]).unwrap();
        let parts = batch_loss(&enc, &batch).unwrap();
        for l in &parts.retrieval {
            assert!((l - (4.0f64).ln()).abs() < 1e-9, "loss {l}");
        }
    }

    /// beta = 0, gamma = 0, alpha = (0, 1): the total reduces to the level-2
    /// contrastive term alone.
    #[test]
    fn degenerate_weights_isolate_final_level() {
        let dims = PyramidDims::new(vec![3, 5]).unwrap();
        let mut enc = random_encoder(dims, 0.5, 9);
        enc.weights = crate::pyramid::LossWeights {
            alpha: vec![0.0, 1.0],
            beta: 0.0,
            gamma: 0.0,
        };
        let batch = toy_batch(4, 5, 33);
        let parts = batch_loss(&enc, &batch).unwrap();
        assert!((parts.total - parts.retrieval[1]).abs() < 1e-12);
    }

    #[test]
    fn training_does_not_regress_holdout() {
        let dims = PyramidDims::new(vec![4, 8]).unwrap();
        let enc = random_encoder(dims, 0.5, 17);
        let batches: Vec<TrainingBatch> = (0..8).map(|i| toy_batch(8, 8, 100 + i)).collect();
        let cfg = TrainConfig {
            epochs: 5,
            learning_rate: 0.2,
            ..Default::default()
        };
        let report = train_encoder(enc, &batches, &cfg).unwrap();
        assert!(report.diverged_at.is_none());
        assert!(
            report.holdout_after <= report.holdout_before + 1e-12,
            "holdout {} -> {}",
            report.holdout_before,
            report.holdout_after
        );
        assert_eq!(report.history.len(), 5);
    }

    #[test]
    fn divergence_returns_last_finite_checkpoint() {
        let dims = PyramidDims::new(vec![4, 8]).unwrap();
        let enc = random_encoder(dims, 0.5, 23);
        let batches: Vec<TrainingBatch> = (0..4).map(|i| toy_batch(8, 8, 300 + i)).collect();
        let cfg = TrainConfig {
            epochs: 8,
            learning_rate: 1e200,
            momentum: 0.9,
            holdout_frac: 0.25,
        };
        let report = train_encoder(enc, &batches, &cfg).unwrap();
        assert!(report.diverged_at.is_some());
        assert!(report
            .encoder
            .stages
            .iter()
            .all(|s| s.refine.is_finite() && s.skip.is_finite()));
    }

    #[test]
    fn batch_requires_two_pairs() {
        let v = vec![0.1f32; 4];
        assert!(TrainingBatch::new(vec![v.clone()], vec![v.clone()]).is_err());
    }
}
