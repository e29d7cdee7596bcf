//! The named experiments.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;

use serde_json::{json, Value};

use crate::bench::world::{
    build_world, depth_recall, finest_truth, run_arm, train_world_encoder, WorldConfig,
};
use crate::bench::{fmt_f, CsvOut, ExperimentConfig};
use crate::controller::{label_queries, QueryPlan};
use crate::corpus::{self, Corpus, CorpusSpec};
use crate::engine::{PyramidCorpus, SpiEngine};
use crate::error::{Result, SpiError};
use crate::fabric::cluster::{
    simulate_qps, work_from_traces, ClusterConfig, SimCluster,
};
use crate::index::IndexSpec;
use crate::metrics::percentile;
use crate::pipeline::hit_attribution;
use crate::pyramid::consistency::semantic_consistency;
use crate::pyramid::{build_pyramid, PyramidEmbedding};

fn world_config_from(cfg: &ExperimentConfig) -> Result<WorldConfig> {
    let mut w = WorldConfig {
        seed: cfg.seed,
        ..Default::default()
    };
    w.corpus.seed = cfg.seed;
    w.corpus.n_docs = cfg.get_usize("n_docs", w.corpus.n_docs)?;
    w.corpus.n_clusters = cfg.get_usize("n_clusters", w.corpus.n_clusters)?;
    w.corpus.dim = cfg.get_usize("dim", w.corpus.dim)?;
    if w.corpus.dim != 64 {
        return Err(SpiError::InvalidConfig(
            "experiments assume the 64-dim default corpus (dims 16/32/64)".into(),
        ));
    }
    w.k = cfg.get_usize("k", w.k)?;
    w.theta = cfg.get_f64("theta", w.theta)?;
    w.train.epochs = cfg.get_usize("epochs", w.train.epochs)?;
    w.train.learning_rate = cfg.get_f64("learning_rate", w.train.learning_rate)?;
    w.n_label_queries = cfg.get_usize("n_label_queries", w.n_label_queries)?;
    w.n_eval_queries = cfg.get_usize("n_eval_queries", w.n_eval_queries)?;
    let n_lists = cfg.get_usize("n_lists", 64)?;
    let n_probe = cfg.get_usize("n_probe", 8)?;
    w.index_specs[0] = IndexSpec::ivf(n_lists, n_probe);
    Ok(w)
}

fn all_pyramids(
    world_corpus: &Corpus,
    encoder: &crate::pyramid::ProgressiveEncoder,
) -> Result<Vec<PyramidEmbedding>> {
    world_corpus
        .ids
        .iter()
        .zip(&world_corpus.vectors)
        .map(|(&id, v)| build_pyramid(id, v, encoder))
        .collect()
}

fn write_training_history(
    cfg: &ExperimentConfig,
    name: &str,
    report: &crate::pyramid::train::TrainReport,
) -> Result<()> {
    let levels = report
        .history
        .first()
        .map(|e| e.retrieval.len())
        .unwrap_or(0);
    let mut header = String::from("epoch");
    for l in 1..=levels {
        header.push_str(&format!(",retrieval_l{l}"));
    }
    header.push_str(",consistency,reg,total");
    let mut out = CsvOut::create(&cfg.out_dir.join(format!("{name}_training.csv")), &header)?;
    for e in &report.history {
        let mut row = format!("{}", e.epoch);
        for r in &e.retrieval {
            row.push_str(&format!(",{}", fmt_f(*r)));
        }
        row.push_str(&format!(
            ",{},{},{}",
            fmt_f(e.consistency),
            fmt_f(e.reg),
            fmt_f(e.total)
        ));
        out.row(&row)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// consistency
// ---------------------------------------------------------------------------

pub fn consistency(cfg: &ExperimentConfig) -> Result<Value> {
    let wc = world_config_from(cfg)?;
    let world = build_world(&wc)?;
    write_training_history(cfg, &cfg.name, &world.train_report)?;

    let sample_n = cfg.get_usize("consistency_sample", 1000)?;
    let all = all_pyramids(&world.corpus, &world.encoder)?;

    let mut out = CsvOut::create(
        &cfg.out_dir.join(format!("{}.csv", cfg.name)),
        "level_from,level_to,rho,drift,recall_preservation,eps_mean,eps_max,bound_mean_ok,bound_max_ok,excluded",
    )?;
    let mut rows = Vec::new();
    for (a, b) in [(1usize, 2usize), (2, 3), (1, 3)] {
        let rep = semantic_consistency(&world.encoder, &all, a, b, world.config.k, sample_n)?;
        out.row(&format!(
            "{a},{b},{},{},{},{},{},{},{},{}",
            fmt_f(rep.rho),
            fmt_f(rep.drift),
            fmt_f(rep.recall_preservation),
            fmt_f(rep.eps_mean),
            fmt_f(rep.eps_max),
            rep.bound_holds_mean(),
            rep.bound_holds_max(),
            rep.excluded
        ))?;
        rows.push(json!({
            "pair": [a, b],
            "rho": rep.rho,
            "drift": rep.drift,
            "recall_preservation": rep.recall_preservation,
            "eps_mean": rep.eps_mean,
            "eps_max": rep.eps_max,
            "bound_mean_ok": rep.bound_holds_mean(),
            "bound_max_ok": rep.bound_holds_max(),
        }));
    }
    let loss = crate::pyramid::consistency::consistency_loss(&world.encoder, &all)?;
    Ok(json!({
        "experiment": "consistency",
        "seed": cfg.seed,
        "n_docs": world.corpus.len(),
        "sample": sample_n.min(all.len()),
        "consistency_loss": loss,
        "holdout_before": world.train_report.holdout_before,
        "holdout_after": world.train_report.holdout_after,
        "pairs": rows,
    }))
}

// ---------------------------------------------------------------------------
// levels-ablation
// ---------------------------------------------------------------------------

fn dims_for_levels(levels: usize) -> Vec<usize> {
    match levels {
        1 => vec![64],
        2 => vec![16, 64],
        3 => vec![16, 32, 64],
        _ => vec![16, 32, 48, 64],
    }
}

pub fn levels_ablation(cfg: &ExperimentConfig) -> Result<Value> {
    let mut wc = world_config_from(cfg)?;
    // The ablation isolates depth: identity finest level so every variant
    // shares one ground truth over the source vectors, and a generous
    // coarse budget so deeper stacks do not starve.
    wc.source_blend = 1.0;
    wc.schedule = crate::controller::BudgetSchedule {
        coarse_factor: cfg.get_usize("coarse_factor", 64)?,
        shrink: 4,
    };
    let corpus = corpus::generate(&wc.corpus)?;
    let queries = corpus::generate_queries(&corpus, wc.n_eval_queries, cfg.seed ^ 3)?;

    // One truth for all variants: exact top-k over unit-normalized sources.
    let source_map: BTreeMap<u64, Vec<f32>> = corpus.id_map();
    let truth: Vec<Vec<u64>> = queries
        .vectors
        .iter()
        .map(|q| {
            crate::metrics::oracle_topk(&source_map, q, wc.k)
                .into_iter()
                .map(|(id, _)| id)
                .collect()
        })
        .collect();

    let flat_cost = corpus.len() as f64;
    let mut out = CsvOut::create(
        &cfg.out_dir.join(format!("{}.csv", cfg.name)),
        "levels,recall_at_10,mean_scored_docs,scored_fraction,mean_scored_total",
    )?;
    let mut timings = CsvOut::create(
        &cfg.out_dir.join(format!("{}_timings.csv", cfg.name)),
        "levels,mean_wall_ms,p50_wall_ms,p99_wall_ms",
    )?;

    let grid: Vec<usize> = vec![1, 2, 3, 4];
    let mut rows = Vec::new();
    for &levels in &grid {
        let dims = dims_for_levels(levels);
        let (encoder, _) = train_world_encoder(&wc, &corpus, dims, 1.0)?;
        let pyramids = PyramidCorpus::from_sources(&corpus.ids, &corpus.vectors, &encoder)?;
        let mut specs = vec![IndexSpec::flat(); levels];
        if levels > 1 {
            specs[0] = wc.index_specs[0];
        }
        let controller = crate::controller::DepthController::fixed_depth(levels as u8, wc.schedule);
        let engine = SpiEngine::build(&pyramids, encoder.clone(), controller, &specs, cfg.seed)?;
        let plan = engine.fixed_plan(levels as u8, wc.k);
        let arm = run_arm(
            &engine,
            &encoder,
            &queries.vectors,
            &truth,
            wc.k,
            |_, _| Ok(plan.clone()),
        )?;
        let fraction = arm.mean_scored_docs / flat_cost;
        out.row(&format!(
            "{levels},{},{},{},{}",
            fmt_f(arm.recall),
            fmt_f(arm.mean_scored_docs),
            fmt_f(fraction),
            fmt_f(arm.mean_scored_total)
        ))?;
        timings.row(&format!(
            "{levels},{},{},{}",
            fmt_f(arm.wall_ms.iter().sum::<f64>() / arm.wall_ms.len() as f64),
            fmt_f(percentile(&arm.wall_ms, 0.5)),
            fmt_f(percentile(&arm.wall_ms, 0.99)),
        ))?;
        rows.push(json!({
            "levels": levels,
            "recall_at_10": arm.recall,
            "mean_scored_docs": arm.mean_scored_docs,
            "scored_fraction": fraction,
        }));
    }

    let argmin = rows
        .iter()
        .min_by(|a, b| {
            a["mean_scored_docs"]
                .as_f64()
                .partial_cmp(&b["mean_scored_docs"].as_f64())
                .unwrap()
        })
        .unwrap()["levels"]
        .clone();
    Ok(json!({
        "experiment": "levels-ablation",
        "seed": cfg.seed,
        "grid": grid,
        "rows": rows,
        "argmin_scored_levels": argmin,
        "flat_scan_cost": flat_cost,
    }))
}

// ---------------------------------------------------------------------------
// control-ablation
// ---------------------------------------------------------------------------

pub fn control_ablation(cfg: &ExperimentConfig) -> Result<Value> {
    let mut wc = world_config_from(cfg)?;
    // Many narrow lists keep the coarse scan lean (so early termination
    // pays) while still covering the hard-query neighborhoods.
    let n_probe = cfg.get_usize("n_probe", 12)?;
    wc.index_specs[0] = IndexSpec::ivf(cfg.get_usize("n_lists", 512)?, n_probe);
    let world = build_world(&wc)?;
    write_training_history(cfg, &cfg.name, &world.train_report)?;

    // Labeled-query export.
    {
        let mut out = CsvOut::create(
            &cfg.out_dir.join("labeled_queries.csv"),
            "query_id,label,entropy,recall_d1,recall_d2,recall_d3",
        )?;
        for q in &world.labeled.queries {
            let mut row = format!("{},{},{}", q.query_id, q.label, fmt_f(q.entropy));
            for r in &q.recall_at_depth {
                row.push_str(&format!(",{}", fmt_f(*r)));
            }
            out.row(&row)?;
        }
    }

    let k = wc.k;
    let engine = &world.engine;
    let eval = &world.eval_queries.vectors;
    let truth = &world.eval_truth;
    let max_level = engine.levels() as u8;

    // Adaptive arm.
    let adaptive = run_arm(engine, &world.encoder, eval, truth, k, |_, q| {
        engine.plan(q, k)
    })?;
    // Fixed-depth arm.
    let fixed_plan = engine.fixed_plan(max_level, k);
    let fixed = run_arm(engine, &world.encoder, eval, truth, k, |_, _| {
        Ok(fixed_plan.clone())
    })?;
    // Random-depth arm at equal cost: the adaptive depth histogram,
    // permuted across queries so depth no longer tracks difficulty.
    let mut depths: Vec<u8> = adaptive.traces.iter().map(|t| t.final_depth).collect();
    {
        use rand::seq::SliceRandom;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x52414e44);
        depths.shuffle(&mut rng);
    }
    let random = run_arm(engine, &world.encoder, eval, truth, k, |qi, _| {
        Ok(engine.fixed_plan(depths[qi], k))
    })?;

    // Oracle-depth labels for the eval set feed the recall-bound check.
    let eval_q1: Vec<Vec<f32>> = eval
        .iter()
        .map(|q| Ok(world.encoder.encode_to_depth(q, 1)?.pop().unwrap()))
        .collect::<Result<_>>()?;
    let eval_labeled = label_queries(&eval_q1, max_level, wc.label_tau, |qi, depth| {
        depth_recall(engine, &eval[qi], depth, k, &truth[qi])
    })?;
    let oracle_level_recall: f64 = eval_labeled
        .queries
        .iter()
        .map(|q| q.recall_at_depth[q.label as usize - 1])
        .sum::<f64>()
        / eval_labeled.queries.len() as f64;

    let all = all_pyramids(&world.corpus, &world.encoder)?;
    let rho_12 = semantic_consistency(&world.encoder, &all, 1, 2, k, 1000)?;
    let rho_23 = semantic_consistency(&world.encoder, &all, 2, 3, k, 1000)?;
    let rho_min = rho_12.rho.min(rho_23.rho);

    let p = world.controller_accuracy;
    let bound_rhs = (p + (1.0 - p) * rho_min) * oracle_level_recall - 0.03;

    let reduction = 1.0 - adaptive.mean_scored_docs / fixed.mean_scored_docs;
    let attr_adaptive = hit_attribution(&adaptive.traces, max_level);
    let attr_fixed = hit_attribution(&fixed.traces, max_level);

    // Routing audit: oracle label vs adaptive final depth, with the mean
    // per-query recall sacrifice of stopping where the plan stopped.
    let mut confusion: BTreeMap<(u8, u8), usize> = BTreeMap::new();
    let mut sacrifice = 0.0;
    for (q, trace) in eval_labeled.queries.iter().zip(&adaptive.traces) {
        *confusion
            .entry((q.label, trace.final_depth))
            .or_insert(0) += 1;
        let stopped = q.recall_at_depth[(trace.final_depth as usize - 1).min(q.recall_at_depth.len() - 1)];
        let full = q.recall_at_depth[q.recall_at_depth.len() - 1];
        sacrifice += (full - stopped).max(0.0);
    }
    let sacrifice = sacrifice / eval_labeled.queries.len() as f64;
    let confusion_json: BTreeMap<String, usize> = confusion
        .into_iter()
        .map(|((l, d), c)| (format!("label{l}_depth{d}"), c))
        .collect();

    let mut out = CsvOut::create(
        &cfg.out_dir.join(format!("{}.csv", cfg.name)),
        "arm,recall_at_10,mean_scored_docs,mean_scored_total,attr_l1,attr_l2,attr_l3",
    )?;
    for (name, arm, attr) in [
        ("adaptive", &adaptive, &attr_adaptive),
        ("fixed", &fixed, &attr_fixed),
        ("random", &random, &hit_attribution(&random.traces, max_level)),
    ] {
        out.row(&format!(
            "{name},{},{},{},{},{},{}",
            fmt_f(arm.recall),
            fmt_f(arm.mean_scored_docs),
            fmt_f(arm.mean_scored_total),
            fmt_f(attr[0]),
            fmt_f(*attr.get(1).unwrap_or(&0.0)),
            fmt_f(*attr.get(2).unwrap_or(&0.0)),
        ))?;
    }

    Ok(json!({
        "experiment": "control-ablation",
        "seed": cfg.seed,
        "controller_accuracy": p,
        "controller_prior": world.controller_prior,
        "label_histogram": world.labeled.histogram.iter().map(|(k, v)| (k.to_string(), *v)).collect::<BTreeMap<String, usize>>(),
        "adaptive": {
            "recall_at_10": adaptive.recall,
            "mean_scored_docs": adaptive.mean_scored_docs,
            "attribution": attr_adaptive,
        },
        "fixed": {
            "recall_at_10": fixed.recall,
            "mean_scored_docs": fixed.mean_scored_docs,
        },
        "random": {
            "recall_at_10": random.recall,
            "mean_scored_docs": random.mean_scored_docs,
        },
        "scored_reduction": reduction,
        "recall_gap_adaptive_vs_fixed": fixed.recall - adaptive.recall,
        "routing_confusion": confusion_json,
        "mean_recall_sacrifice": sacrifice,
        "recall_bound": {
            "p": p,
            "rho_min": rho_min,
            "oracle_level_recall": oracle_level_recall,
            "spi_recall": adaptive.recall,
            "rhs": bound_rhs,
            "holds": adaptive.recall >= bound_rhs,
        },
    }))
}

// ---------------------------------------------------------------------------
// scaling
// ---------------------------------------------------------------------------

pub fn scaling(cfg: &ExperimentConfig) -> Result<Value> {
    let per_node_docs = cfg.get_usize("per_node_docs", 2000)?;
    let n_queries = cfg.get_usize("n_queries", 400)?;
    let parallelism = cfg.get_usize("node_parallelism", 1)?;
    let encode_ms = cfg.get_f64("encode_cost_ms", 3.0)?;
    let grid: Vec<u32> = vec![1, 2, 4, 8, 16];

    // One encoder for every cluster size, trained on the single-node corpus.
    let base_spec = CorpusSpec {
        n_docs: per_node_docs,
        seed: cfg.seed,
        ..Default::default()
    };
    let wc = WorldConfig {
        corpus: base_spec.clone(),
        seed: cfg.seed,
        ..Default::default()
    };
    let base_corpus = corpus::generate(&base_spec)?;
    let (encoder, _) = train_world_encoder(&wc, &base_corpus, vec![16, 32, 64], 0.5)?;

    let specs = [
        IndexSpec::ivf(64, 8),
        IndexSpec::flat(),
        IndexSpec::flat(),
    ];
    let mut cost = crate::fabric::cluster::SimCostModel::default();
    cost.encode_ms = encode_ms;
    let latency = crate::fabric::cluster::LatencyModel::default();

    let mut out = CsvOut::create(
        &cfg.out_dir.join(format!("{}.csv", cfg.name)),
        "nodes,docs,qps,speedup,efficiency,sim_latency_ms,added_network_ms,makespan_ms,balance_ratio",
    )?;
    let mut rows = Vec::new();
    let mut qps1 = 0.0f64;
    for &n in &grid {
        let spec = CorpusSpec {
            n_docs: per_node_docs * n as usize,
            seed: cfg.seed,
            ..Default::default()
        };
        let corpus_n = corpus::generate(&spec)?;
        let pyramids = PyramidCorpus::from_sources(&corpus_n.ids, &corpus_n.vectors, &encoder)?;
        let controller =
            crate::controller::DepthController::fixed_depth(3, Default::default());
        let replication = 2u32.min(n);
        let cluster = SimCluster::build(
            &pyramids,
            encoder.clone(),
            controller,
            &specs,
            ClusterConfig::new(n, replication, cfg.seed),
        )?;
        let queries = corpus::generate_queries(&corpus_n, n_queries, cfg.seed ^ 7)?;
        let plan = QueryPlan {
            predicted: 3,
            confidence: 0.0,
            final_depth: 3,
            budgets: crate::controller::BudgetSchedule::default().budgets(10, 3),
        };
        let traces: Vec<_> = queries
            .vectors
            .iter()
            .map(|q| Ok(cluster.retrieve(q, 10, Some(&plan))?.1))
            .collect::<Result<_>>()?;
        let works = work_from_traces(&traces, &[16, 32, 64]);
        let report = simulate_qps(&works, n, parallelism, &latency, &cost, 0.9, 64)?;
        if n == 1 {
            qps1 = report.qps;
        }
        let speedup = report.qps / qps1;
        let efficiency = speedup / n as f64;
        out.row(&format!(
            "{n},{},{},{},{},{},{},{},{}",
            spec.n_docs,
            fmt_f(report.qps),
            fmt_f(speedup),
            fmt_f(efficiency),
            fmt_f(report.mean_latency_ms),
            fmt_f(report.added_network_ms),
            fmt_f(report.makespan_ms),
            fmt_f(cluster.balance_ratio),
        ))?;
        rows.push(json!({
            "nodes": n,
            "docs": spec.n_docs,
            "qps": report.qps,
            "speedup": speedup,
            "efficiency": efficiency,
            "sim_latency_ms": report.mean_latency_ms,
            "added_network_ms": report.added_network_ms,
            "utilization": report.utilization,
        }));
    }

    Ok(json!({
        "experiment": "scaling",
        "seed": cfg.seed,
        "per_node_docs": per_node_docs,
        "n_queries": n_queries,
        "cost_model": {
            "encode_ms": cost.encode_ms,
            "score_ns_per_component": cost.score_ns_per_component,
            "aggregate_ns_per_candidate": cost.aggregate_ns_per_candidate,
        },
        "rows": rows,
    }))
}

// ---------------------------------------------------------------------------
// streaming
// ---------------------------------------------------------------------------

pub fn streaming(cfg: &ExperimentConfig) -> Result<Value> {
    let base_docs = cfg.get_usize("n_docs", 10_000)?;
    let stream_docs = cfg.get_usize("stream_docs", 1_000)?;
    let n_queries = cfg.get_usize("n_queries", 300)?;
    let spec = CorpusSpec {
        n_docs: base_docs + stream_docs,
        seed: cfg.seed,
        ..Default::default()
    };
    let full = corpus::generate(&spec)?;

    // Seeded split into base corpus and stream.
    use rand::seq::SliceRandom;
    use rand_chacha::rand_core::SeedableRng;
    let mut order: Vec<usize> = (0..full.len()).collect();
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x535452);
    order.shuffle(&mut rng);
    let (base_idx, stream_idx) = order.split_at(base_docs);
    let mut base_idx = base_idx.to_vec();
    base_idx.sort_unstable();
    let mut stream_idx = stream_idx.to_vec();
    stream_idx.sort_unstable();

    let sub_corpus = |idx: &[usize]| -> Corpus {
        Corpus {
            spec: spec.clone(),
            ids: idx.iter().map(|&i| full.ids[i]).collect(),
            vectors: idx.iter().map(|&i| full.vectors[i].clone()).collect(),
            cluster_of: idx.iter().map(|&i| full.cluster_of[i]).collect(),
            group_of: idx.iter().map(|&i| full.group_of[i]).collect(),
            group_centers: full.group_centers.clone(),
            group_coarse: full.group_coarse.clone(),
            group_cluster: full.group_cluster.clone(),
            centers: full.centers.clone(),
            tight: full.tight.clone(),
        }
    };
    let base = sub_corpus(&base_idx);

    let wc = WorldConfig {
        corpus: spec.clone(),
        seed: cfg.seed,
        ..Default::default()
    };
    let (encoder, _) = train_world_encoder(&wc, &base, vec![16, 32, 64], 0.5)?;
    let specs = [
        IndexSpec::ivf(64, 8),
        IndexSpec::flat(),
        IndexSpec::flat(),
    ];
    let controller = crate::controller::DepthController::fixed_depth(3, Default::default());

    let base_pyr = PyramidCorpus::from_sources(&base.ids, &base.vectors, &encoder)?;
    let cluster = SimCluster::build(
        &base_pyr,
        encoder.clone(),
        controller.clone(),
        &specs,
        ClusterConfig::new(4, 2, cfg.seed),
    )?;

    let queries = corpus::generate_queries(&full, n_queries, cfg.seed ^ 9)?;
    let plan = QueryPlan {
        predicted: 3,
        confidence: 0.0,
        final_depth: 3,
        budgets: crate::controller::BudgetSchedule::default().budgets(10, 3),
    };

    // Concurrent phase: stream inserts while queries keep running.
    let cluster = Arc::new(cluster);
    let stop = Arc::new(AtomicBool::new(false));
    let concurrent_ok = Arc::new(AtomicUsize::new(0));
    let concurrent_err = Arc::new(AtomicUsize::new(0));
    let query_workers: Vec<_> = (0..4)
        .map(|w| {
            let cluster = Arc::clone(&cluster);
            let stop = Arc::clone(&stop);
            let ok = Arc::clone(&concurrent_ok);
            let err = Arc::clone(&concurrent_err);
            let qs = queries.vectors.clone();
            let plan = plan.clone();
            std::thread::spawn(move || {
                let mut qi = w;
                while !stop.load(Ordering::Relaxed) {
                    match cluster.retrieve(&qs[qi % qs.len()], 10, Some(&plan)) {
                        Ok(_) => ok.fetch_add(1, Ordering::Relaxed),
                        Err(_) => err.fetch_add(1, Ordering::Relaxed),
                    };
                    qi += 4;
                }
            })
        })
        .collect();

    for &i in &stream_idx {
        cluster.insert(full.ids[i], &full.vectors[i])?;
    }
    stop.store(true, Ordering::SeqCst);
    for w in query_workers {
        w.join().map_err(|_| SpiError::Other("query worker panicked".into()))?;
    }

    // Quality: streamed system vs a full rebuild over the same documents.
    let full_pyr = PyramidCorpus::from_sources(&full.ids, &full.vectors, &encoder)?;
    let rebuilt = SimCluster::build(
        &full_pyr,
        encoder.clone(),
        controller,
        &specs,
        ClusterConfig::new(4, 2, cfg.seed),
    )?;

    let mut overlap_acc = 0.0;
    let mut streamed_wall = Vec::new();
    for q in &queries.vectors {
        let (streamed_hits, trace) = cluster.retrieve(q, 10, Some(&plan))?;
        let (rebuilt_hits, _) = rebuilt.retrieve(q, 10, Some(&plan))?;
        let rebuilt_ids: Vec<u64> = rebuilt_hits.iter().map(|h| h.doc_id).collect();
        let inter = streamed_hits
            .iter()
            .filter(|h| rebuilt_ids.contains(&h.doc_id))
            .count();
        overlap_acc += inter as f64 / 10.0;
        streamed_wall.push(trace.wall_ms);
    }
    let recall_vs_rebuilt = overlap_acc / queries.vectors.len() as f64;

    let mut out = CsvOut::create(
        &cfg.out_dir.join(format!("{}.csv", cfg.name)),
        "base_docs,streamed_docs,recall_vs_rebuilt,concurrent_queries_ok,concurrent_queries_failed",
    )?;
    out.row(&format!(
        "{base_docs},{stream_docs},{},{},{}",
        fmt_f(recall_vs_rebuilt),
        concurrent_ok.load(Ordering::SeqCst),
        concurrent_err.load(Ordering::SeqCst),
    ))?;

    Ok(json!({
        "experiment": "streaming",
        "seed": cfg.seed,
        "base_docs": base_docs,
        "streamed_docs": stream_docs,
        "recall_vs_rebuilt": recall_vs_rebuilt,
        "rebuild_triggered": false,
        "concurrent_queries_ok": concurrent_ok.load(Ordering::SeqCst),
        "concurrent_queries_failed": concurrent_err.load(Ordering::SeqCst),
    }))
}

// ---------------------------------------------------------------------------
// exactness
// ---------------------------------------------------------------------------

pub fn exactness(cfg: &ExperimentConfig) -> Result<Value> {
    let n_docs = cfg.get_usize("n_docs", 2000)?;
    let n_queries = cfg.get_usize("n_queries", 100)?;
    let spec = CorpusSpec {
        n_docs,
        seed: cfg.seed,
        ..Default::default()
    };
    let corpus = corpus::generate(&spec)?;
    let wc = WorldConfig {
        corpus: spec,
        seed: cfg.seed,
        ..Default::default()
    };
    let (encoder, _) = train_world_encoder(&wc, &corpus, vec![16, 32, 64], 0.5)?;
    let pyramids = PyramidCorpus::from_sources(&corpus.ids, &corpus.vectors, &encoder)?;
    let controller = crate::controller::DepthController::fixed_depth(3, Default::default());
    let specs = vec![IndexSpec::flat(); 3];
    let cluster = SimCluster::build(
        &pyramids,
        encoder.clone(),
        controller,
        &specs,
        ClusterConfig::new(4, 2, cfg.seed),
    )?;

    let queries = corpus::generate_queries(&corpus, n_queries, cfg.seed ^ 11)?;
    let finest_map = pyramids.level_map(3);
    let plan = QueryPlan {
        predicted: 3,
        confidence: 0.0,
        final_depth: 3,
        budgets: vec![n_docs; 3],
    };
    let mut mismatches = 0usize;
    for q in &queries.vectors {
        let (hits, _) = cluster.retrieve(q, 10, Some(&plan))?;
        let ql = encoder.encode(q)?.pop().unwrap();
        let oracle = crate::metrics::oracle_topk(&finest_map, &ql, 10);
        let got: Vec<(u64, f32)> = hits.iter().map(|h| (h.doc_id, h.score)).collect();
        if got != oracle {
            mismatches += 1;
        }
    }

    let mut out = CsvOut::create(
        &cfg.out_dir.join(format!("{}.csv", cfg.name)),
        "n_docs,n_queries,mismatches",
    )?;
    out.row(&format!("{n_docs},{n_queries},{mismatches}"))?;

    Ok(json!({
        "experiment": "exactness",
        "seed": cfg.seed,
        "n_docs": n_docs,
        "n_queries": n_queries,
        "mismatches": mismatches,
        "exact": mismatches == 0,
    }))
}

// ---------------------------------------------------------------------------
// fault-tolerance
// ---------------------------------------------------------------------------

pub fn fault_tolerance(cfg: &ExperimentConfig) -> Result<Value> {
    let n_docs = cfg.get_usize("n_docs", 4000)?;
    let n_queries = cfg.get_usize("n_queries", 200)?;
    let n_nodes = 4u32;
    let spec = CorpusSpec {
        n_docs,
        seed: cfg.seed,
        ..Default::default()
    };
    let corpus = corpus::generate(&spec)?;
    let wc = WorldConfig {
        corpus: spec.clone(),
        seed: cfg.seed,
        ..Default::default()
    };
    let (encoder, _) = train_world_encoder(&wc, &corpus, vec![16, 32, 64], 0.5)?;
    let pyramids = PyramidCorpus::from_sources(&corpus.ids, &corpus.vectors, &encoder)?;
    let controller = crate::controller::DepthController::fixed_depth(3, Default::default());
    let specs = [
        IndexSpec::ivf(32, 8),
        IndexSpec::flat(),
        IndexSpec::flat(),
    ];
    let queries = corpus::generate_queries(&corpus, n_queries, cfg.seed ^ 13)?;
    let finest_map = pyramids.level_map(3);
    let truth = finest_truth(&encoder, &finest_map, &queries.vectors, 10)?;
    let plan = QueryPlan {
        predicted: 3,
        confidence: 0.0,
        final_depth: 3,
        budgets: crate::controller::BudgetSchedule::default().budgets(10, 3),
    };

    let build = |replication: u32| -> Result<SimCluster> {
        SimCluster::build(
            &pyramids,
            encoder.clone(),
            controller.clone(),
            &specs,
            ClusterConfig::new(n_nodes, replication, cfg.seed),
        )
    };

    // Healthy baseline.
    let healthy = build(2)?;
    let healthy_arm = run_arm(&healthy, &encoder, &queries.vectors, &truth, 10, |_, _| {
        Ok(plan.clone())
    })?;

    let mut out = CsvOut::create(
        &cfg.out_dir.join(format!("{}.csv", cfg.name)),
        "scenario,killed_node,queries_ok,queries_failed,recall_at_10,recall_ratio_vs_healthy",
    )?;
    out.row(&format!(
        "healthy,-1,{},0,{},{}",
        n_queries,
        fmt_f(healthy_arm.recall),
        fmt_f(1.0)
    ))?;

    // Kill each node in turn mid-run with replication.
    let mut chaos_rows = Vec::new();
    for kill in 0..n_nodes {
        let cluster = build(2)?;
        let mut recall_acc = 0.0;
        let mut failures = 0usize;
        for (qi, q) in queries.vectors.iter().enumerate() {
            if qi == n_queries / 3 {
                cluster.kill(kill);
            }
            match cluster.retrieve(q, 10, Some(&plan)) {
                Ok((hits, _)) => {
                    let ids: Vec<u64> = hits.iter().map(|h| h.doc_id).collect();
                    recall_acc += crate::metrics::recall_at_k(&ids, &truth[qi], 10);
                }
                Err(_) => failures += 1,
            }
        }
        let recall = recall_acc / (n_queries - failures).max(1) as f64;
        let ratio = recall / healthy_arm.recall;
        out.row(&format!(
            "kill_r2,{kill},{},{failures},{},{}",
            n_queries - failures,
            fmt_f(recall),
            fmt_f(ratio)
        ))?;
        chaos_rows.push(json!({
            "killed_node": kill,
            "failures": failures,
            "recall_at_10": recall,
            "recall_ratio_vs_healthy": ratio,
        }));
    }

    // Unreplicated loss must fail loudly, not degrade silently.
    let r1 = build(1)?;
    r1.kill(1);
    let mut shard_unavailable = 0usize;
    let mut silent = 0usize;
    for q in queries.vectors.iter().take(50) {
        match r1.retrieve(q, 10, Some(&plan)) {
            Err(SpiError::ShardUnavailable { .. }) => shard_unavailable += 1,
            Err(_) => {}
            Ok(_) => silent += 1,
        }
    }
    out.row(&format!(
        "kill_r1,1,{silent},{shard_unavailable},0.000000,0.000000"
    ))?;

    Ok(json!({
        "experiment": "fault-tolerance",
        "seed": cfg.seed,
        "healthy_recall": healthy_arm.recall,
        "chaos": chaos_rows,
        "r1_shard_unavailable_errors": shard_unavailable,
        "r1_silent_successes": silent,
    }))
}
