//! Shared experiment setup: corpus, trained encoder, single-process engine,
//! labeled queries, trained controller. Every step is seeded; encoder and
//! controller pass through their checkpoint formats so results match what a
//! file-based pipeline would produce.

use std::collections::BTreeMap;

use crate::controller::{
    label_queries, train_controller, BudgetSchedule, ControllerTrainConfig, DepthController,
    LabeledSet,
};
use crate::corpus::{self, Corpus, CorpusSpec, QuerySet};
use crate::engine::{PyramidCorpus, SpiEngine};
use crate::error::Result;
use crate::format;
use crate::index::IndexSpec;
use crate::metrics::{oracle_topk, recall_at_k};
use crate::pipeline::ShardSearcher;
use crate::pyramid::train::{train_encoder, TrainConfig, TrainReport};
use crate::pyramid::{LossWeights, ProgressiveEncoder, PyramidDims};

#[derive(Debug, Clone)]
pub struct WorldConfig {
    pub corpus: CorpusSpec,
    pub dims: Vec<usize>,
    pub source_blend: f64,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub n_train_batches: usize,
    pub batch_size: usize,
    pub positive_std: f32,
    pub index_specs: Vec<IndexSpec>,
    pub k: usize,
    pub schedule: BudgetSchedule,
    pub theta: f64,
    pub label_tau: f64,
    pub n_label_queries: usize,
    pub n_eval_queries: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            corpus: CorpusSpec::default(),
            dims: vec![16, 32, 64],
            source_blend: 0.5,
            loss: LossWeights::default_for(3),
            train: TrainConfig {
                learning_rate: 0.05,
                ..Default::default()
            },
            n_train_batches: 60,
            batch_size: 128,
            positive_std: 0.05,
            index_specs: vec![
                IndexSpec::ivf(64, 8),
                IndexSpec::flat(),
                IndexSpec::flat(),
            ],
            k: 10,
            schedule: BudgetSchedule::default(),
            theta: 0.4,
            label_tau: 0.98,
            n_label_queries: 500,
            n_eval_queries: 500,
            seed: 42,
        }
    }
}

pub struct World {
    pub config: WorldConfig,
    pub corpus: Corpus,
    pub encoder: ProgressiveEncoder,
    pub train_report: TrainReport,
    pub pyramids: PyramidCorpus,
    pub engine: SpiEngine,
    pub controller: DepthController,
    pub controller_accuracy: f64,
    pub controller_prior: f64,
    pub labeled: LabeledSet,
    pub eval_queries: QuerySet,
    /// Exact top-k over the finest-level vectors, per eval query.
    pub eval_truth: Vec<Vec<u64>>,
}

/// Train an encoder for a corpus under a world config (shared by the level
/// ablation, which varies the dims).
pub fn train_world_encoder(
    cfg: &WorldConfig,
    corpus: &Corpus,
    dims: Vec<usize>,
    source_blend: f64,
) -> Result<(ProgressiveEncoder, TrainReport)> {
    let dims = PyramidDims::new(dims)?;
    let levels = dims.levels();
    let mut init = ProgressiveEncoder::init(dims, &corpus.vectors, source_blend, cfg.seed)?;
    init.weights = if cfg.loss.alpha.len() == levels {
        cfg.loss.clone()
    } else {
        LossWeights {
            alpha: vec![1.0 / levels as f64; levels],
            ..cfg.loss.clone()
        }
    };
    if levels == 1 {
        // Nothing to train: no refinement stages, no projections.
        let report = TrainReport {
            encoder: init.clone(),
            history: Vec::new(),
            holdout_before: 0.0,
            holdout_after: 0.0,
            diverged_at: None,
        };
        return Ok((init, report));
    }
    let batches = corpus::training_batches(
        corpus,
        cfg.n_train_batches,
        cfg.batch_size,
        cfg.positive_std,
        cfg.seed,
    )?;
    let report = train_encoder(init, &batches, &cfg.train)?;
    // Checkpoint round-trip: downstream behavior matches a reloaded file.
    let encoder = format::encoder_from_bytes(&format::encoder_to_bytes(&report.encoder))?;
    Ok((encoder, report))
}

/// Oracle recall of a full retrieval at a fixed depth, for one query.
pub fn depth_recall(
    engine: &SpiEngine,
    query: &[f32],
    depth: u8,
    k: usize,
    truth: &[u64],
) -> Result<f64> {
    let plan = engine.fixed_plan(depth, k);
    let (hits, _) = engine.retrieve(query, k, Some(&plan))?;
    let ids: Vec<u64> = hits.iter().map(|h| h.doc_id).collect();
    Ok(recall_at_k(&ids, truth, k))
}

/// Exact finest-level truth for a set of queries against an engine's corpus.
pub fn finest_truth(
    encoder: &ProgressiveEncoder,
    level_map: &BTreeMap<u64, Vec<f32>>,
    queries: &[Vec<f32>],
    k: usize,
) -> Result<Vec<Vec<u64>>> {
    let depth = encoder.levels();
    queries
        .iter()
        .map(|q| {
            let ql = encoder.encode_to_depth(q, depth)?;
            Ok(oracle_topk(level_map, &ql[depth - 1], k)
                .into_iter()
                .map(|(id, _)| id)
                .collect())
        })
        .collect()
}

/// Build the full world: corpus, encoder, engine, labels, controller.
pub fn build_world(cfg: &WorldConfig) -> Result<World> {
    let corpus = corpus::generate(&cfg.corpus)?;
    let (encoder, train_report) =
        train_world_encoder(cfg, &corpus, cfg.dims.clone(), cfg.source_blend)?;
    let pyramids = PyramidCorpus::from_sources(&corpus.ids, &corpus.vectors, &encoder)?;

    let fallback = DepthController::fixed_depth(encoder.levels() as u8, cfg.schedule);
    let engine = SpiEngine::build(
        &pyramids,
        encoder.clone(),
        fallback,
        &cfg.index_specs,
        cfg.seed,
    )?;

    // Oracle labeling run over a dedicated query set.
    let label_queries_set = corpus::generate_queries(&corpus, cfg.n_label_queries, cfg.seed ^ 1)?;
    let finest_map = pyramids.level_map(encoder.levels());
    let label_truth = finest_truth(&encoder, &finest_map, &label_queries_set.vectors, cfg.k)?;
    let q1s: Vec<Vec<f32>> = label_queries_set
        .vectors
        .iter()
        .map(|q| Ok(encoder.encode_to_depth(q, 1)?.pop().unwrap()))
        .collect::<Result<_>>()?;
    let max_level = engine.levels() as u8;
    let labeled = label_queries(&q1s, max_level, cfg.label_tau, |qi, depth| {
        depth_recall(
            &engine,
            &label_queries_set.vectors[qi],
            depth,
            cfg.k,
            &label_truth[qi],
        )
    })?;

    let ctl_report = train_controller(
        &labeled,
        max_level,
        cfg.schedule,
        &ControllerTrainConfig {
            theta: cfg.theta,
            seed: cfg.seed ^ 2,
            ..Default::default()
        },
    )?;
    let controller =
        format::controller_from_bytes(&format::controller_to_bytes(&ctl_report.controller))?;

    let eval_queries = corpus::generate_queries(&corpus, cfg.n_eval_queries, cfg.seed ^ 3)?;
    let eval_truth = finest_truth(&encoder, &finest_map, &eval_queries.vectors, cfg.k)?;

    // Swap the trained controller into the engine.
    let engine = SpiEngine {
        controller: controller.clone(),
        ..engine
    };

    Ok(World {
        config: cfg.clone(),
        corpus,
        encoder,
        train_report,
        pyramids,
        engine,
        controller,
        controller_accuracy: ctl_report.holdout_accuracy,
        controller_prior: ctl_report.class_prior,
        labeled,
        eval_queries,
        eval_truth,
    })
}

/// Retrieval cost/quality of one engine pass over queries with a plan
/// chooser. Queries run sequentially for determinism.
pub struct ArmResult {
    pub recall: f64,
    pub mean_scored_docs: f64,
    pub mean_scored_total: f64,
    pub traces: Vec<crate::pipeline::RetrievalTrace>,
    pub per_query_recall: Vec<f64>,
    pub wall_ms: Vec<f64>,
}

pub fn run_arm<S: ShardSearcher>(
    searcher: &S,
    encoder: &ProgressiveEncoder,
    queries: &[Vec<f32>],
    truth: &[Vec<u64>],
    k: usize,
    mut plan_for: impl FnMut(usize, &[f32]) -> Result<crate::controller::QueryPlan>,
) -> Result<ArmResult> {
    let mut traces = Vec::with_capacity(queries.len());
    let mut per_query_recall = Vec::with_capacity(queries.len());
    let mut wall_ms = Vec::with_capacity(queries.len());
    let mut scored = 0usize;
    let mut scored_total = 0usize;
    for (qi, q) in queries.iter().enumerate() {
        let plan = plan_for(qi, q)?;
        let (hits, mut trace) = crate::pipeline::retrieve(searcher, encoder, &plan, q, k)?;
        trace.query_id = qi as u64;
        let ids: Vec<u64> = hits.iter().map(|h| h.doc_id).collect();
        per_query_recall.push(recall_at_k(&ids, &truth[qi], k));
        scored += trace.scored_docs;
        scored_total += trace.scored_docs + trace.scored_centroids;
        wall_ms.push(trace.wall_ms);
        traces.push(trace);
    }
    let n = queries.len().max(1) as f64;
    Ok(ArmResult {
        recall: per_query_recall.iter().sum::<f64>() / n,
        mean_scored_docs: scored as f64 / n,
        mean_scored_total: scored_total as f64 / n,
        traces,
        per_query_recall,
        wall_ms,
    })
}
