//! Query-adaptive retrieval depth control.
//!
//! A multinomial logistic classifier over the coarse query embedding plus
//! its component-energy entropy predicts the cheapest sufficient depth.
//! Low-confidence predictions escalate by one level.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Result, SpiError};
use crate::math::{self, Mat};

/// Shannon entropy of the query's normalized component-energy distribution
/// p_k = q_k^2 / ||q||^2, with 0 ln 0 = 0. Scale-invariant; bounded by
/// ln(dim).
pub fn query_entropy(q: &[f32]) -> Result<f64> {
    if q.is_empty() {
        return Err(SpiError::EmptyInput("entropy query"));
    }
    if !math::all_finite_f32(q) {
        return Err(SpiError::NonFinite("entropy query"));
    }
    let total: f64 = q.iter().map(|x| (*x as f64) * (*x as f64)).sum();
    if total <= 0.0 {
        return Err(SpiError::ZeroVector("entropy query"));
    }
    let mut h = 0.0;
    for x in q {
        let p = (*x as f64) * (*x as f64) / total;
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    Ok(h.max(0.0))
}

/// Per-level candidate budget schedule: N_l = max(k, ceil(N_1 / r^(l-1)))
/// with N_1 = `coarse_factor` * k.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BudgetSchedule {
    pub coarse_factor: usize,
    pub shrink: usize,
}

impl Default for BudgetSchedule {
    fn default() -> Self {
        BudgetSchedule {
            coarse_factor: 32,
            shrink: 4,
        }
    }
}

impl BudgetSchedule {
    pub fn budgets(&self, k: usize, depth: usize) -> Vec<usize> {
        let n1 = self.coarse_factor * k;
        (0..depth)
            .map(|i| {
                let denom = (self.shrink as u64).pow(i as u32).max(1);
                let b = (n1 as u64).div_ceil(denom) as usize;
                b.max(k)
            })
            .collect()
    }
}

/// Controller output for one query.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct QueryPlan {
    /// Predicted depth before escalation.
    pub predicted: u8,
    /// Uncertainty sigma = 1 - max class probability.
    pub confidence: f64,
    /// Depth actually retrieved to.
    pub final_depth: u8,
    /// Per-level candidate budgets for levels 1..=final_depth.
    pub budgets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
enum ControllerMode {
    /// Untrained default: every query runs to the full depth.
    FixedDepth,
    /// Degenerate single-class training set.
    Constant { level: u8 },
    Trained {
        /// class weights: n_classes x (feat_dim + 1) with trailing bias.
        weights: Mat,
        /// Depth each class index maps to.
        classes: Vec<u8>,
        /// Feature standardization (means, stds) for [q1..., H].
        feat_mean: Vec<f64>,
        feat_std: Vec<f64>,
    },
}

/// Depth controller. Immutable after training; `plan` is pure.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthController {
    pub max_level: u8,
    /// Escalation threshold: escalate when sigma > theta.
    pub theta: f64,
    pub schedule: BudgetSchedule,
    mode: ControllerMode,
}

impl DepthController {
    /// Untrained fallback: plans always run to the full depth with sigma 0.
    pub fn fixed_depth(max_level: u8, schedule: BudgetSchedule) -> Self {
        DepthController {
            max_level,
            theta: 0.4,
            schedule,
            mode: ControllerMode::FixedDepth,
        }
    }

    pub fn is_trained(&self) -> bool {
        matches!(self.mode, ControllerMode::Trained { .. })
    }

    /// Class probabilities over depths for a coarse query vector.
    fn probabilities(&self, q1: &[f32]) -> Result<Vec<(u8, f64)>> {
        match &self.mode {
            ControllerMode::FixedDepth => Ok(vec![(self.max_level, 1.0)]),
            ControllerMode::Constant { level } => Ok(vec![(*level, 1.0)]),
            ControllerMode::Trained {
                weights,
                classes,
                feat_mean,
                feat_std,
            } => {
                let h = query_entropy(q1)?;
                let mut feat: Vec<f64> = q1.iter().map(|x| *x as f64).collect();
                feat.push(h);
                if feat.len() != feat_mean.len() {
                    return Err(SpiError::DimensionMismatch {
                        context: "controller features",
                        expected: feat_mean.len() - 1,
                        got: q1.len(),
                    });
                }
                for i in 0..feat.len() {
                    feat[i] = (feat[i] - feat_mean[i]) / feat_std[i];
                }
                feat.push(1.0);
                let logits = weights.matvec(&feat);
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                Ok(classes
                    .iter()
                    .zip(&exps)
                    .map(|(c, e)| (*c, e / z))
                    .collect())
            }
        }
    }

    /// Predict depth and budgets: final depth is the argmax class, escalated
    /// by one level when sigma exceeds theta (clamped at the max level).
    pub fn plan(&self, q1: &[f32], k: usize) -> Result<QueryPlan> {
        let probs = self.probabilities(q1)?;
        // argmax with ties to the shallower level
        let mut best = probs[0];
        for p in &probs[1..] {
            if p.1 > best.1 {
                best = *p;
            }
        }
        let sigma = 1.0 - best.1;
        let predicted = best.0;
        let final_depth = if sigma <= self.theta {
            predicted
        } else {
            (predicted + 1).min(self.max_level)
        };
        Ok(QueryPlan {
            predicted,
            confidence: sigma,
            final_depth,
            budgets: self.schedule.budgets(k, final_depth as usize),
        })
    }
}

/// One labeled query example for controller training.
#[derive(Debug, Clone, serde::Serialize)]
pub struct LabeledQuery {
    pub query_id: u64,
    pub q1: Vec<f32>,
    pub entropy: f64,
    pub label: u8,
    /// recall@K at each depth 1..=L, recorded by the labeling run.
    pub recall_at_depth: Vec<f64>,
}

/// Labeling result with the label histogram.
#[derive(Debug, Clone)]
pub struct LabeledSet {
    pub queries: Vec<LabeledQuery>,
    pub histogram: BTreeMap<u8, usize>,
}

/// Assign each query the smallest depth whose recall@K reaches `tau` times
/// the recall at full depth. `recall_at_depth` runs full retrieval at every
/// fixed depth and returns recall against the exact oracle per depth.
pub fn label_queries<F>(
    q1_vectors: &[Vec<f32>],
    max_level: u8,
    tau: f64,
    mut recall_at_depth: F,
) -> Result<LabeledSet>
where
    F: FnMut(usize, u8) -> Result<f64>,
{
    if q1_vectors.is_empty() {
        return Err(SpiError::EmptyInput("label queries"));
    }
    let mut queries = Vec::with_capacity(q1_vectors.len());
    let mut histogram = BTreeMap::new();
    for (qi, q1) in q1_vectors.iter().enumerate() {
        let mut recalls = Vec::with_capacity(max_level as usize);
        for depth in 1..=max_level {
            recalls.push(recall_at_depth(qi, depth)?);
        }
        let full = recalls[max_level as usize - 1];
        let mut label = max_level;
        for depth in 1..=max_level {
            if recalls[depth as usize - 1] >= tau * full {
                label = depth;
                break;
            }
        }
        *histogram.entry(label).or_insert(0) += 1;
        queries.push(LabeledQuery {
            query_id: qi as u64,
            q1: q1.clone(),
            entropy: query_entropy(q1)?,
            label,
            recall_at_depth: recalls,
        });
    }
    Ok(LabeledSet { queries, histogram })
}

#[derive(Debug, Clone)]
pub struct ControllerTrainConfig {
    pub theta: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub holdout_frac: f64,
    pub seed: u64,
    /// Classes with fewer examples are merged into the next deeper class.
    pub min_class_examples: usize,
}

impl Default for ControllerTrainConfig {
    fn default() -> Self {
        ControllerTrainConfig {
            theta: 0.4,
            epochs: 200,
            learning_rate: 0.5,
            holdout_frac: 0.2,
            seed: 7,
            min_class_examples: 10,
        }
    }
}

#[derive(Debug)]
pub struct ControllerTrainReport {
    pub controller: DepthController,
    pub holdout_accuracy: f64,
    /// Largest class share in the holdout: the prior baseline.
    pub class_prior: f64,
    pub merged_labels: BTreeMap<u8, u8>,
}

/// Train the multinomial logistic controller on a labeled set.
///
/// Classes below the example minimum merge upward (deeper); a single-class
/// set degenerates to a constant controller with sigma = 0.
pub fn train_controller(
    labeled: &LabeledSet,
    max_level: u8,
    schedule: BudgetSchedule,
    cfg: &ControllerTrainConfig,
) -> Result<ControllerTrainReport> {
    if labeled.queries.is_empty() {
        return Err(SpiError::EmptyInput("controller training set"));
    }

    // Merge sparse classes into the next deeper level.
    let mut counts: BTreeMap<u8, usize> = BTreeMap::new();
    for q in &labeled.queries {
        *counts.entry(q.label).or_insert(0) += 1;
    }
    let mut merged_labels: BTreeMap<u8, u8> = BTreeMap::new();
    let mut kept: Vec<u8> = Vec::new();
    for (&label, &count) in &counts {
        if count >= cfg.min_class_examples || label == max_level {
            kept.push(label);
        }
    }
    if kept.is_empty() {
        kept.push(max_level);
    }
    for (&label, _) in &counts {
        let target = kept
            .iter()
            .copied()
            .find(|k| *k >= label)
            .unwrap_or(*kept.last().unwrap());
        if target != label {
            merged_labels.insert(label, target);
        }
    }
    let relabel = |l: u8| merged_labels.get(&l).copied().unwrap_or(l);

    let classes: Vec<u8> = {
        let mut c: Vec<u8> = labeled
            .queries
            .iter()
            .map(|q| relabel(q.label))
            .collect::<std::collections::BTreeSet<u8>>()
            .into_iter()
            .collect();
        c.sort_unstable();
        c
    };

    if classes.len() == 1 {
        return Ok(ControllerTrainReport {
            controller: DepthController {
                max_level,
                theta: cfg.theta,
                schedule,
                mode: ControllerMode::Constant { level: classes[0] },
            },
            holdout_accuracy: 1.0,
            class_prior: 1.0,
            merged_labels,
        });
    }

    // Features: [q1..., entropy], standardized.
    let feat_dim = labeled.queries[0].q1.len() + 1;
    let features: Vec<Vec<f64>> = labeled
        .queries
        .iter()
        .map(|q| {
            let mut f: Vec<f64> = q.q1.iter().map(|x| *x as f64).collect();
            f.push(q.entropy);
            f
        })
        .collect();
    let labels: Vec<usize> = labeled
        .queries
        .iter()
        .map(|q| classes.iter().position(|c| *c == relabel(q.label)).unwrap())
        .collect();

    let n = features.len();
    let mut feat_mean = vec![0.0; feat_dim];
    for f in &features {
        for (m, x) in feat_mean.iter_mut().zip(f) {
            *m += x / n as f64;
        }
    }
    let mut feat_std = vec![0.0; feat_dim];
    for f in &features {
        for i in 0..feat_dim {
            feat_std[i] += (f[i] - feat_mean[i]).powi(2) / n as f64;
        }
    }
    for s in &mut feat_std {
        *s = s.sqrt().max(1e-9);
    }
    let standardized: Vec<Vec<f64>> = features
        .iter()
        .map(|f| {
            let mut z: Vec<f64> = f
                .iter()
                .enumerate()
                .map(|(i, x)| (x - feat_mean[i]) / feat_std[i])
                .collect();
            z.push(1.0);
            z
        })
        .collect();

    // Shuffled split, seeded.
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    order.shuffle(&mut rng);
    let n_holdout = ((n as f64 * cfg.holdout_frac) as usize).clamp(1, n - 1);
    let (holdout_idx, train_idx) = order.split_at(n_holdout);

    let n_classes = classes.len();
    let mut weights = Mat::zeros(n_classes, feat_dim + 1);
    // Full-batch gradient descent on the multinomial cross-entropy.
    for _ in 0..cfg.epochs {
        let mut grad = Mat::zeros(n_classes, feat_dim + 1);
        for &i in train_idx {
            let z = &standardized[i];
            let logits = weights.matvec(z);
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let zsum: f64 = exps.iter().sum();
            for c in 0..n_classes {
                let p = exps[c] / zsum;
                let d = p - if labels[i] == c { 1.0 } else { 0.0 };
                grad.add_outer(d / train_idx.len() as f64, &one_hot(n_classes, c), z);
            }
        }
        weights.add_scaled(-cfg.learning_rate, &grad);
    }

    let controller = DepthController {
        max_level,
        theta: cfg.theta,
        schedule,
        mode: ControllerMode::Trained {
            weights,
            classes: classes.clone(),
            feat_mean,
            feat_std,
        },
    };

    let mut correct = 0usize;
    let mut class_counts: BTreeMap<u8, usize> = BTreeMap::new();
    for &i in holdout_idx {
        let plan_probs = controller.probabilities(&labeled.queries[i].q1)?;
        let mut best = plan_probs[0];
        for p in &plan_probs[1..] {
            if p.1 > best.1 {
                best = *p;
            }
        }
        let truth = relabel(labeled.queries[i].label);
        if best.0 == truth {
            correct += 1;
        }
        *class_counts.entry(truth).or_insert(0) += 1;
    }
    let holdout_accuracy = correct as f64 / holdout_idx.len() as f64;
    let class_prior = class_counts
        .values()
        .map(|c| *c as f64 / holdout_idx.len() as f64)
        .fold(0.0, f64::max);

    Ok(ControllerTrainReport {
        controller,
        holdout_accuracy,
        class_prior,
        merged_labels,
    })
}

fn one_hot(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

// Serialization access for the checkpoint format.
pub(crate) enum ControllerModeView<'a> {
    FixedDepth,
    Constant(u8),
    Trained {
        weights: &'a Mat,
        classes: &'a [u8],
        feat_mean: &'a [f64],
        feat_std: &'a [f64],
    },
}

impl DepthController {
    pub(crate) fn mode_view(&self) -> ControllerModeView<'_> {
        match &self.mode {
            ControllerMode::FixedDepth => ControllerModeView::FixedDepth,
            ControllerMode::Constant { level } => ControllerModeView::Constant(*level),
            ControllerMode::Trained {
                weights,
                classes,
                feat_mean,
                feat_std,
            } => ControllerModeView::Trained {
                weights,
                classes,
                feat_mean,
                feat_std,
            },
        }
    }

    pub(crate) fn from_parts(
        max_level: u8,
        theta: f64,
        schedule: BudgetSchedule,
        mode_tag: u8,
        constant_level: u8,
        trained: Option<(Mat, Vec<u8>, Vec<f64>, Vec<f64>)>,
    ) -> Result<Self> {
        let mode = match mode_tag {
            0 => ControllerMode::FixedDepth,
            1 => ControllerMode::Constant {
                level: constant_level,
            },
            2 => {
                let (weights, classes, feat_mean, feat_std) =
                    trained.ok_or_else(|| SpiError::Format("missing trained payload".into()))?;
                ControllerMode::Trained {
                    weights,
                    classes,
                    feat_mean,
                    feat_std,
                }
            }
            other => return Err(SpiError::Format(format!("bad controller mode {other}"))),
        };
        Ok(DepthController {
            max_level,
            theta,
            schedule,
            mode,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn entropy_point_mass_is_zero() {
        let mut q = vec![0.0f32; 16];
        q[3] = 0.7;
        assert!(query_entropy(&q).unwrap().abs() < 1e-12);
    }

    #[test]
    fn entropy_uniform_is_log_dim() {
        let q = vec![0.25f32; 16];
        let h = query_entropy(&q).unwrap();
        assert!((h - (16.0f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn entropy_two_point_uniform_is_ln2() {
        let mut q = vec![0.0f32; 8];
        q[0] = (0.5f32).sqrt();
        q[1] = (0.5f32).sqrt();
        let h = query_entropy(&q).unwrap();
        assert!((h - (2.0f64).ln()).abs() < 1e-6);
    }

    #[test]
    fn entropy_is_scale_invariant() {
        let q: Vec<f32> = (0..12).map(|i| (i as f32 * 0.7).sin()).collect();
        let scaled: Vec<f32> = q.iter().map(|x| x * -37.5).collect();
        let a = query_entropy(&q).unwrap();
        let b = query_entropy(&scaled).unwrap();
        // Exact up to the f32 rounding of the scaled components.
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }

    #[test]
    fn entropy_rejects_zero_vector() {
        assert!(matches!(
            query_entropy(&[0.0, 0.0]),
            Err(SpiError::ZeroVector(_))
        ));
    }

    #[test]
    fn budget_schedule_shrinks_and_floors_at_k() {
        let s = BudgetSchedule::default();
        let b = s.budgets(10, 3);
        assert_eq!(b, vec![320, 80, 20]);
        let b = s.budgets(10, 4);
        assert_eq!(b, vec![320, 80, 20, 10]);
        assert!(b.windows(2).all(|w| w[0] >= w[1]));
        assert!(b.iter().all(|x| *x >= 10));
    }

    #[test]
    fn fixed_depth_plans_full_depth() {
        let c = DepthController::fixed_depth(3, BudgetSchedule::default());
        let q = vec![0.5f32; 16];
        let plan = c.plan(&q, 10).unwrap();
        assert_eq!(plan.final_depth, 3);
        assert_eq!(plan.predicted, 3);
        assert_eq!(plan.confidence, 0.0);
        assert_eq!(plan.budgets.len(), 3);
    }

    fn synthetic_labeled(n: usize, dim: usize, seed: u64, separable: bool) -> LabeledSet {
        // Easy class: energy on the first coordinate (low entropy); hard
        // class: spread energy (high entropy).
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut queries = Vec::new();
        let mut histogram = BTreeMap::new();
        for i in 0..n {
            let easy = i % 2 == 0;
            let mut q = vec![0.0f32; dim];
            if easy {
                q[0] = 1.0;
                for x in q.iter_mut().skip(1) {
                    *x = (rng.random::<f32>() - 0.5) * 0.1;
                }
            } else {
                for x in q.iter_mut() {
                    *x = rng.random::<f32>() - 0.5;
                }
            }
            let label = if separable {
                if easy {
                    1
                } else {
                    3
                }
            } else {
                // Random labels: no signal.
                1 + (rng.random::<u32>() % 3) as u8
            };
            *histogram.entry(label).or_insert(0) += 1;
            queries.push(LabeledQuery {
                query_id: i as u64,
                entropy: query_entropy(&q).unwrap(),
                q1: q,
                label,
                recall_at_depth: vec![],
            });
        }
        LabeledSet { queries, histogram }
    }

    #[test]
    fn separable_labels_train_accurately() {
        let set = synthetic_labeled(400, 16, 3, true);
        let report = train_controller(
            &set,
            3,
            BudgetSchedule::default(),
            &ControllerTrainConfig::default(),
        )
        .unwrap();
        assert!(
            report.holdout_accuracy >= 0.95,
            "accuracy {}",
            report.holdout_accuracy
        );
    }

    #[test]
    fn random_labels_stay_near_prior() {
        let set = synthetic_labeled(600, 16, 5, false);
        let report = train_controller(
            &set,
            3,
            BudgetSchedule::default(),
            &ControllerTrainConfig::default(),
        )
        .unwrap();
        assert!(
            (report.holdout_accuracy - report.class_prior).abs() <= 0.1,
            "accuracy {} vs prior {}",
            report.holdout_accuracy,
            report.class_prior
        );
    }

    #[test]
    fn single_class_set_returns_constant_controller() {
        let mut set = synthetic_labeled(50, 8, 9, true);
        for q in &mut set.queries {
            q.label = 2;
        }
        let report = train_controller(
            &set,
            3,
            BudgetSchedule::default(),
            &ControllerTrainConfig::default(),
        )
        .unwrap();
        let plan = report.controller.plan(&set.queries[0].q1, 10).unwrap();
        assert_eq!(plan.predicted, 2);
        assert_eq!(plan.confidence, 0.0);
        assert_eq!(plan.final_depth, 2);
    }

    #[test]
    fn escalation_rules() {
        // sigma > theta escalates by one, clamped at L.
        let c = DepthController {
            max_level: 3,
            theta: 0.4,
            schedule: BudgetSchedule::default(),
            mode: ControllerMode::Constant { level: 3 },
        };
        let q = vec![0.3f32; 8];
        let plan = c.plan(&q, 10).unwrap();
        assert_eq!(plan.final_depth, 3, "sigma 0 never escalates");

        // Raising theta can only lower or keep the final depth.
        let set = synthetic_labeled(300, 16, 11, true);
        let report = train_controller(
            &set,
            3,
            BudgetSchedule::default(),
            &ControllerTrainConfig::default(),
        )
        .unwrap();
        let mut ctl = report.controller;
        for q in set.queries.iter().take(40) {
            let mut prev_depth = None;
            for theta in [0.0, 0.2, 0.4, 0.6, 0.8, 1.0] {
                ctl.theta = theta;
                let plan = ctl.plan(&q.q1, 10).unwrap();
                if let Some(prev) = prev_depth {
                    assert!(
                        plan.final_depth <= prev,
                        "final depth must be nonincreasing in theta"
                    );
                }
                prev_depth = Some(plan.final_depth);
            }
        }
    }

    #[test]
    fn label_queries_histogram_and_tau_zero() {
        let q1s: Vec<Vec<f32>> = (0..20)
            .map(|i| vec![1.0 + i as f32, 0.5, 0.2, 0.1])
            .collect();
        // Depth-1 recall already matches full depth for even queries.
        let set = label_queries(&q1s, 3, 0.98, |qi, depth| {
            Ok(if qi % 2 == 0 || depth == 3 { 1.0 } else { 0.2 })
        })
        .unwrap();
        assert_eq!(set.histogram[&1], 10);
        assert_eq!(set.histogram[&3], 10);

        // tau = 0 labels everything depth 1.
        let set = label_queries(&q1s, 3, 0.0, |_, _| Ok(0.5)).unwrap();
        assert_eq!(set.histogram[&1], 20);
    }
}
