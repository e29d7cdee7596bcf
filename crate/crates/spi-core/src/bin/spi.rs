//! Command-line interface for corpus generation, training, index building,
//! retrieval, experiments, and the socket runtime.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};

use spi_core::bench::{run_experiment, ExperimentConfig, OutputFormat};
use spi_core::controller::{
    label_queries, train_controller, BudgetSchedule, ControllerTrainConfig, DepthController,
};
use spi_core::corpus::{self, CorpusSpec};
use spi_core::engine::{PyramidCorpus, SpiEngine};
use spi_core::error::SpiError;
use spi_core::fabric::node::{NodeRuntime, ShardStore};
use spi_core::fabric::socket::{serve_node, SocketCoordinator};
use spi_core::format::{self, StorageMode};
use spi_core::index::IndexSpec;
use spi_core::pyramid::train::TrainConfig;
use spi_core::pyramid::{LossWeights, ProgressiveEncoder, PyramidDims};

#[derive(Parser)]
#[command(name = "spi", about = "Multi-resolution pyramid vector search", version)]
struct Cli {
    /// Master random seed.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,

    /// key=value config file overriding defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for generated files and reports.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Summary format echoed to stdout.
    #[arg(long, global = true, default_value = "json")]
    format: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic clustered corpus file.
    GenCorpus {
        #[arg(long, default_value_t = 10_000)]
        n_docs: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 50)]
        n_clusters: usize,
        #[arg(long, default_value = "float32")]
        storage: String,
        /// Output corpus path (.spim).
        #[arg(long)]
        file: Option<PathBuf>,
    },

    /// Validate and convert an embedding file (SPIM or CSV) into SPIM.
    Ingest {
        file: PathBuf,
        #[arg(long, default_value = "float32")]
        storage: String,
        #[arg(long)]
        output: Option<PathBuf>,
    },

    /// Train the progressive encoder on a corpus file.
    TrainEncoder {
        corpus: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = vec![16usize, 32, 64])]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 0.5)]
        learning_rate: f64,
        #[arg(long, default_value_t = 0.5)]
        source_blend: f64,
        #[arg(long)]
        output: Option<PathBuf>,
    },

    /// Build per-level index files from a corpus and an encoder checkpoint.
    BuildIndex {
        corpus: PathBuf,
        encoder: PathBuf,
        #[arg(long, default_value_t = 64)]
        n_lists: usize,
        #[arg(long, default_value_t = 8)]
        n_probe: usize,
        /// Backend for the coarse level: flat, ivf, or ivf_pq.
        #[arg(long, default_value = "ivf")]
        backend: String,
        #[arg(long, default_value_t = 8)]
        pq_subspaces: usize,
        #[arg(long, default_value_t = 8)]
        pq_bits: u8,
    },

    /// Label queries with their cheapest sufficient retrieval depth.
    LabelQueries {
        corpus: PathBuf,
        encoder: PathBuf,
        #[arg(long, default_value_t = 500)]
        n_queries: usize,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 0.98)]
        tau: f64,
    },

    /// Train the depth controller from a labeled-query CSV.
    TrainController {
        labels: PathBuf,
        #[arg(long, default_value_t = 0.4)]
        theta: f64,
        #[arg(long)]
        output: Option<PathBuf>,
    },

    /// Run one query against locally built index files.
    Query {
        corpus: PathBuf,
        encoder: PathBuf,
        /// Query vector as comma-separated floats, or @file.csv.
        #[arg(long)]
        vector: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Optional coordinator address for remote retrieval.
        #[arg(long)]
        coordinator: Option<String>,
    },

    /// Run a named experiment (consistency, levels-ablation,
    /// control-ablation, scaling, streaming, exactness, fault-tolerance).
    Bench {
        experiment: String,
        #[arg(long, default_value_t = 1)]
        repetitions: usize,
        /// Extra key=value overrides.
        #[arg(long, value_delimiter = ',')]
        set: Vec<String>,
    },

    /// Serve a node over TCP from a node config file.
    ServeNode {
        #[arg(long)]
        node_config: PathBuf,
    },

    /// Serve a scatter-gather coordinator over TCP.
    ServeCoordinator {
        #[arg(long)]
        coordinator_config: PathBuf,
    },
}

fn parse_kv_file(path: &Path) -> Result<BTreeMap<String, String>, SpiError> {
    let text = std::fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(SpiError::InvalidConfig(format!(
                "{}:{}: expected key=value",
                path.display(),
                lineno + 1
            )));
        };
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn storage_mode(name: &str) -> Result<StorageMode, SpiError> {
    match name {
        "float32" => Ok(StorageMode::Float32),
        "int8" | "int8scaled" => Ok(StorageMode::Int8Scaled),
        other => Err(SpiError::InvalidConfig(format!(
            "storage mode {other:?}, expected float32 or int8"
        ))),
    }
}

fn load_corpus(path: &Path, seed: u64) -> Result<corpus::Corpus, SpiError> {
    let spec = CorpusSpec {
        seed,
        ..Default::default()
    };
    corpus::ingest_file(path, &spec)
}

fn run(cli: Cli) -> Result<(), SpiError> {
    std::fs::create_dir_all(&cli.out)?;
    let config_overrides = match &cli.config {
        Some(path) => parse_kv_file(path)?,
        None => BTreeMap::new(),
    };

    match cli.command {
        Command::GenCorpus {
            n_docs,
            dim,
            n_clusters,
            storage,
            file,
        } => {
            let spec = CorpusSpec {
                n_docs,
                dim,
                n_clusters,
                seed: cli.seed,
                storage: storage_mode(&storage)?,
                ..Default::default()
            };
            let corpus = corpus::generate(&spec)?;
            let path = file.unwrap_or_else(|| cli.out.join("corpus.spim"));
            corpus::write_corpus(&corpus, &path, spec.storage)?;
            println!(
                "{}",
                serde_json::json!({
                    "corpus": path,
                    "n_docs": corpus.len(),
                    "dim": spec.dim,
                    "clusters": spec.n_clusters,
                })
            );
        }

        Command::Ingest {
            file,
            storage,
            output,
        } => {
            let corpus = load_corpus(&file, cli.seed)?;
            let mode = storage_mode(&storage)?;
            let out = output.unwrap_or_else(|| cli.out.join("ingested.spim"));
            corpus::write_corpus(&corpus, &out, mode)?;
            println!(
                "{}",
                serde_json::json!({
                    "ingested": out,
                    "n_docs": corpus.len(),
                    "dim": corpus.spec.dim,
                })
            );
        }

        Command::TrainEncoder {
            corpus: corpus_path,
            dims,
            epochs,
            learning_rate,
            source_blend,
            output,
        } => {
            let corpus = load_corpus(&corpus_path, cli.seed)?;
            let dims_v = PyramidDims::new(dims)?;
            let mut encoder =
                ProgressiveEncoder::init(dims_v, &corpus.vectors, source_blend, cli.seed)?;
            encoder.weights = LossWeights::default_for(encoder.levels());
            let batches = corpus::training_batches(&corpus, 60, 128, 0.05, cli.seed)?;
            let report = spi_core::pyramid::train::train_encoder(
                encoder,
                &batches,
                &TrainConfig {
                    epochs,
                    learning_rate,
                    ..Default::default()
                },
            )?;
            if let Some(epoch) = report.diverged_at {
                return Err(SpiError::TrainingDiverged { epoch });
            }
            let out = output.unwrap_or_else(|| cli.out.join("encoder.spie"));
            std::fs::write(&out, format::encoder_to_bytes(&report.encoder))?;
            // Per-epoch loss history alongside the checkpoint.
            let hist_path = cli.out.join("training_history.csv");
            let mut hist = String::from("epoch");
            let levels = report.encoder.levels();
            for l in 1..=levels {
                hist.push_str(&format!(",retrieval_l{l}"));
            }
            hist.push_str(",consistency,reg,total\n");
            for e in &report.history {
                hist.push_str(&format!("{}", e.epoch));
                for r in &e.retrieval {
                    hist.push_str(&format!(",{r:.6}"));
                }
                hist.push_str(&format!(
                    ",{:.6},{:.6},{:.6}\n",
                    e.consistency, e.reg, e.total
                ));
            }
            std::fs::write(&hist_path, hist)?;
            println!(
                "{}",
                serde_json::json!({
                    "encoder": out,
                    "history": hist_path,
                    "holdout_before": report.holdout_before,
                    "holdout_after": report.holdout_after,
                })
            );
        }

        Command::BuildIndex {
            corpus: corpus_path,
            encoder: encoder_path,
            n_lists,
            n_probe,
            backend,
            pq_subspaces,
            pq_bits,
        } => {
            let corpus = load_corpus(&corpus_path, cli.seed)?;
            let encoder = format::encoder_from_bytes(&std::fs::read(&encoder_path)?)?;
            let pyramids = PyramidCorpus::from_sources(&corpus.ids, &corpus.vectors, &encoder)?;
            let coarse = match backend.as_str() {
                "flat" => IndexSpec::flat(),
                "ivf" => IndexSpec::ivf(n_lists, n_probe),
                "ivf_pq" => IndexSpec::ivf_pq(n_lists, n_probe, pq_subspaces, pq_bits),
                other => {
                    return Err(SpiError::InvalidConfig(format!(
                        "backend {other:?}, expected flat|ivf|ivf_pq"
                    )))
                }
            };
            let mut files = Vec::new();
            for level in 1..=encoder.levels() {
                let spec = if level == 1 { coarse } else { IndexSpec::flat() };
                let idx = spi_core::index::LevelIndex::build(
                    &pyramids.level_map(level),
                    level as u8,
                    spec,
                    cli.seed.wrapping_add(level as u64),
                )?;
                let path = cli.out.join(format!("level{level}.spix"));
                std::fs::write(&path, format::index_to_bytes(&idx))?;
                files.push(path);
            }
            println!("{}", serde_json::json!({ "indexes": files }));
        }

        Command::LabelQueries {
            corpus: corpus_path,
            encoder: encoder_path,
            n_queries,
            k,
            tau,
        } => {
            let corpus = load_corpus(&corpus_path, cli.seed)?;
            let encoder = format::encoder_from_bytes(&std::fs::read(&encoder_path)?)?;
            let pyramids = PyramidCorpus::from_sources(&corpus.ids, &corpus.vectors, &encoder)?;
            let controller =
                DepthController::fixed_depth(encoder.levels() as u8, BudgetSchedule::default());
            let engine = SpiEngine::build(
                &pyramids,
                encoder.clone(),
                controller,
                &default_specs(encoder.levels()),
                cli.seed,
            )?;
            // File-based corpora carry no cluster metadata; label perturbed
            // document probes.
            let queries: Vec<Vec<f32>> = {
                use rand::Rng;
                use rand_chacha::rand_core::SeedableRng;
                let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(cli.seed ^ 1);
                (0..n_queries)
                    .map(|_| {
                        let i = rng.random_range(0..corpus.len());
                        corpus.vectors[i]
                            .iter()
                            .map(|x| x + (rng.random::<f32>() - 0.5) * 0.02)
                            .collect()
                    })
                    .collect()
            };
            let finest = pyramids.level_map(encoder.levels());
            let truth = spi_core::bench::world::finest_truth(&encoder, &finest, &queries, k)?;
            let q1s: Vec<Vec<f32>> = queries
                .iter()
                .map(|q| Ok(encoder.encode_to_depth(q, 1)?.pop().unwrap()))
                .collect::<Result<_, SpiError>>()?;
            let labeled = label_queries(&q1s, encoder.levels() as u8, tau, |qi, depth| {
                spi_core::bench::world::depth_recall(&engine, &queries[qi], depth, k, &truth[qi])
            })?;
            let path = cli.out.join("labeled_queries.csv");
            let mut csv = String::from("query_id,label,entropy");
            for d in 1..=encoder.levels() {
                csv.push_str(&format!(",recall_d{d}"));
            }
            csv.push('\n');
            for q in &labeled.queries {
                csv.push_str(&format!("{},{},{:.6}", q.query_id, q.label, q.entropy));
                for r in &q.recall_at_depth {
                    csv.push_str(&format!(",{r:.6}"));
                }
                csv.push('\n');
            }
            std::fs::write(&path, csv)?;
            println!(
                "{}",
                serde_json::json!({
                    "labels": path,
                    "histogram": labeled.histogram.iter()
                        .map(|(k, v)| (k.to_string(), *v))
                        .collect::<BTreeMap<String, usize>>(),
                })
            );
        }

        Command::TrainController {
            labels,
            theta,
            output,
        } => {
            let labeled = load_labeled_csv(&labels)?;
            let max_level = labeled
                .queries
                .first()
                .map(|q| q.recall_at_depth.len() as u8)
                .unwrap_or(1)
                .max(labeled.queries.iter().map(|q| q.label).max().unwrap_or(1));
            let report = train_controller(
                &labeled,
                max_level,
                BudgetSchedule::default(),
                &ControllerTrainConfig {
                    theta,
                    seed: cli.seed,
                    ..Default::default()
                },
            )?;
            let out = output.unwrap_or_else(|| cli.out.join("controller.spic"));
            std::fs::write(&out, format::controller_to_bytes(&report.controller))?;
            println!(
                "{}",
                serde_json::json!({
                    "controller": out,
                    "holdout_accuracy": report.holdout_accuracy,
                    "class_prior": report.class_prior,
                })
            );
        }

        Command::Query {
            corpus: corpus_path,
            encoder: encoder_path,
            vector,
            k,
            coordinator,
        } => {
            let encoder = format::encoder_from_bytes(&std::fs::read(&encoder_path)?)?;
            let query = parse_vector(&vector)?;
            if let Some(addr) = coordinator {
                let coord_client = spi_core::fabric::socket::NodeClient::new(
                    addr,
                    Duration::from_millis(5_000),
                );
                let req = spi_core::fabric::protocol::SearchRequest {
                    shard: u32::MAX,
                    level: 0,
                    k: k as u32,
                    query,
                    restrict: None,
                };
                let resp = coord_client
                    .request(spi_core::fabric::protocol::MsgType::Search, req.encode())?;
                let decoded =
                    spi_core::fabric::protocol::SearchResponse::decode(&resp.payload)?;
                println!(
                    "{}",
                    serde_json::json!({
                        "hits": decoded.hits.iter()
                            .map(|(id, s)| serde_json::json!({"doc": id, "score": s}))
                            .collect::<Vec<_>>(),
                    })
                );
                return Ok(());
            }
            let corpus = load_corpus(&corpus_path, cli.seed)?;
            let pyramids = PyramidCorpus::from_sources(&corpus.ids, &corpus.vectors, &encoder)?;
            let levels = pyramids.dims.levels();
            let controller =
                DepthController::fixed_depth(levels as u8, BudgetSchedule::default());
            let engine = SpiEngine::build(
                &pyramids,
                encoder,
                controller,
                &default_specs(levels),
                cli.seed,
            )?;
            let (hits, trace) = engine.retrieve(&query, k, None)?;
            println!(
                "{}",
                serde_json::json!({
                    "hits": hits.iter()
                        .map(|h| serde_json::json!({"doc": h.doc_id, "score": h.score}))
                        .collect::<Vec<_>>(),
                    "final_depth": trace.final_depth,
                    "scored_docs": trace.scored_docs,
                })
            );
        }

        Command::Bench {
            experiment,
            repetitions,
            set,
        } => {
            let mut overrides = config_overrides;
            for kv in set {
                let Some((key, value)) = kv.split_once('=') else {
                    return Err(SpiError::InvalidConfig(format!(
                        "--set expects key=value, got {kv:?}"
                    )));
                };
                overrides.insert(key.trim().to_string(), value.trim().to_string());
            }
            let config = ExperimentConfig {
                name: experiment,
                seed: cli.seed,
                out_dir: cli.out.clone(),
                format: cli.format.parse::<OutputFormat>()?,
                repetitions,
                overrides,
            };
            let summary = run_experiment(&config)?;
            match config.format {
                OutputFormat::Json => println!("{}", serde_json::to_string_pretty(&summary)?),
                OutputFormat::Csv => {
                    println!(
                        "experiment,json_report\n{},{}",
                        config.name,
                        config
                            .out_dir
                            .join(format!("{}.json", config.name))
                            .display()
                    );
                }
            }
        }

        Command::ServeNode { node_config } => {
            let conf = parse_kv_file(&node_config)?;
            let node_id: u32 = conf
                .get("node_id")
                .ok_or_else(|| SpiError::InvalidConfig("node_id missing".into()))?
                .parse()
                .map_err(|_| SpiError::InvalidConfig("bad node_id".into()))?;
            let listen = conf
                .get("listen")
                .ok_or_else(|| SpiError::InvalidConfig("listen missing".into()))?;
            let data_dir = PathBuf::from(
                conf.get("data_dir")
                    .ok_or_else(|| SpiError::InvalidConfig("data_dir missing".into()))?,
            );
            let node = Arc::new(NodeRuntime::new(
                node_id,
                Default::default(),
                conf.get("cache_enabled").map(|v| v == "true").unwrap_or(true),
            )?);
            // Load every shard snapshot named nodeN_shardS_levelL.spix.
            let mut shards: BTreeMap<u32, Vec<(usize, spi_core::index::LevelIndex)>> =
                BTreeMap::new();
            for entry in std::fs::read_dir(&data_dir)? {
                let path = entry?.path();
                let name = path
                    .file_name()
                    .unwrap_or_default()
                    .to_string_lossy()
                    .to_string();
                let Some(rest) = name
                    .strip_prefix(&format!("node{node_id}_shard"))
                    .and_then(|r| r.strip_suffix(".spix"))
                else {
                    continue;
                };
                let Some((shard_s, level_s)) = rest.split_once("_level") else {
                    continue;
                };
                let (Ok(shard), Ok(level)) = (shard_s.parse::<u32>(), level_s.parse::<usize>())
                else {
                    continue;
                };
                let idx = format::index_from_bytes(&std::fs::read(&path)?)?;
                shards.entry(shard).or_default().push((level, idx));
            }
            for (shard, mut levels) in shards {
                levels.sort_by_key(|(l, _)| *l);
                node.install_shard(
                    shard,
                    ShardStore::new(levels.into_iter().map(|(_, i)| i).collect()),
                );
            }
            let listener = std::net::TcpListener::bind(listen)
                .map_err(|e| SpiError::InvalidConfig(format!("bind {listen}: {e}")))?;
            eprintln!("node {node_id} serving on {listen}");
            serve_node(node, listener, Arc::new(AtomicBool::new(false)))?;
        }

        Command::ServeCoordinator { coordinator_config } => {
            let conf = parse_kv_file(&coordinator_config)?;
            let nodes: Vec<String> = conf
                .get("nodes")
                .ok_or_else(|| SpiError::InvalidConfig("nodes missing".into()))?
                .split(',')
                .map(|s| s.trim().to_string())
                .collect();
            let replication: u32 = conf
                .get("replication")
                .map(|v| v.parse().unwrap_or(2))
                .unwrap_or(2);
            let encoder = format::encoder_from_bytes(&std::fs::read(
                conf.get("encoder")
                    .ok_or_else(|| SpiError::InvalidConfig("encoder missing".into()))?,
            )?)?;
            let controller = match conf.get("controller") {
                Some(path) => format::controller_from_bytes(&std::fs::read(path)?)?,
                None => DepthController::fixed_depth(
                    encoder.levels() as u8,
                    BudgetSchedule::default(),
                ),
            };
            let quorum = conf
                .get("quorum")
                .map(|v| v.parse().unwrap_or(nodes.len()))
                .unwrap_or(nodes.len());
            let listen = conf
                .get("listen")
                .ok_or_else(|| SpiError::InvalidConfig("listen missing".into()))?
                .clone();
            let coord = Arc::new(SocketCoordinator::new(
                encoder,
                controller,
                &nodes,
                replication,
                quorum,
                conf.get("alpha")
                    .map(|v| v.parse().unwrap_or(0.9))
                    .unwrap_or(0.9),
                Duration::from_millis(
                    conf.get("timeout_ms")
                        .map(|v| v.parse().unwrap_or(2_000))
                        .unwrap_or(2_000),
                ),
            )?);
            let shutdown = Arc::new(AtomicBool::new(false));
            let _hb = coord.spawn_heartbeat(
                Duration::from_millis(
                    conf.get("heartbeat_ms")
                        .map(|v| v.parse().unwrap_or(500))
                        .unwrap_or(500),
                ),
                conf.get("heartbeat_misses")
                    .map(|v| v.parse().unwrap_or(3))
                    .unwrap_or(3),
                Arc::clone(&shutdown),
            );
            let listener = std::net::TcpListener::bind(&listen)
                .map_err(|e| SpiError::InvalidConfig(format!("bind {listen}: {e}")))?;
            eprintln!("coordinator serving on {listen}");
            serve_coordinator_loop(coord, listener)?;
        }
    }
    Ok(())
}

fn serve_coordinator_loop(
    coord: Arc<SocketCoordinator>,
    listener: std::net::TcpListener,
) -> Result<(), SpiError> {
    use spi_core::fabric::protocol::{
        ErrorCode, ErrorPayload, Frame, MsgType, SearchRequest, SearchResponse,
    };
    for stream in listener.incoming() {
        let Ok(mut stream) = stream else { continue };
        let coord = Arc::clone(&coord);
        std::thread::spawn(move || loop {
            match Frame::read_from(&mut stream) {
                Ok(frame) => {
                    let rid = frame.request_id;
                    let response = match MsgType::from_u8(frame.msg_type) {
                        Some(MsgType::Search) => match SearchRequest::decode(&frame.payload) {
                            Ok(req) => match coord.retrieve(&req.query, req.k as usize, None) {
                                Ok((hits, trace)) => {
                                    let resp = SearchResponse {
                                        served_by: u32::MAX,
                                        level: trace.final_depth,
                                        hits: hits
                                            .iter()
                                            .map(|h| (h.doc_id, h.score))
                                            .collect(),
                                        scored_docs: trace.scored_docs as u64,
                                        scored_centroids: trace.scored_centroids as u64,
                                        restrict_misses: 0,
                                    };
                                    Frame::new(MsgType::SearchResult, rid, resp.encode())
                                }
                                Err(e) => Frame::new(
                                    MsgType::Error,
                                    rid,
                                    ErrorPayload::new(ErrorCode::Internal, e.to_string())
                                        .encode(),
                                ),
                            },
                            Err(e) => Frame::new(
                                MsgType::Error,
                                rid,
                                ErrorPayload::new(ErrorCode::BadRequest, e.to_string()).encode(),
                            ),
                        },
                        Some(MsgType::Health) => Frame::new(MsgType::Health, rid, vec![0]),
                        _ => Frame::new(
                            MsgType::Error,
                            rid,
                            ErrorPayload::new(ErrorCode::UnknownType, "unsupported").encode(),
                        ),
                    };
                    if response.write_to(&mut stream).is_err() {
                        return;
                    }
                }
                Err(_) => return,
            }
        });
    }
    Ok(())
}

fn default_specs(levels: usize) -> Vec<IndexSpec> {
    let mut specs = vec![IndexSpec::flat(); levels];
    if levels > 1 {
        specs[0] = IndexSpec::ivf(64, 8);
    }
    specs
}

fn parse_vector(arg: &str) -> Result<Vec<f32>, SpiError> {
    let text = if let Some(path) = arg.strip_prefix('@') {
        std::fs::read_to_string(path)?
    } else {
        arg.to_string()
    };
    text.split(',')
        .map(|f| {
            f.trim()
                .parse::<f32>()
                .map_err(|_| SpiError::InvalidConfig(format!("bad float {f:?} in query vector")))
        })
        .collect()
}

fn load_labeled_csv(path: &Path) -> Result<spi_core::controller::LabeledSet, SpiError> {
    let text = std::fs::read_to_string(path)?;
    let mut queries = Vec::new();
    let mut histogram = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 {
            return Err(SpiError::Format(format!(
                "labels row {} too short",
                lineno + 1
            )));
        }
        let query_id: u64 = fields[0]
            .parse()
            .map_err(|_| SpiError::Format(format!("labels row {}: bad id", lineno + 1)))?;
        let label: u8 = fields[1]
            .parse()
            .map_err(|_| SpiError::Format(format!("labels row {}: bad label", lineno + 1)))?;
        let entropy: f64 = fields[2]
            .parse()
            .map_err(|_| SpiError::Format(format!("labels row {}: bad entropy", lineno + 1)))?;
        let recall_at_depth: Vec<f64> = fields[3..]
            .iter()
            .map(|f| f.parse().unwrap_or(0.0))
            .collect();
        *histogram.entry(label).or_insert(0) += 1;
        // CSV labels carry the entropy feature only; q1 vectors are not
        // persisted, so a CSV-trained controller classifies on entropy.
        queries.push(spi_core::controller::LabeledQuery {
            query_id,
            q1: vec![entropy as f32],
            entropy,
            label,
            recall_at_depth,
        });
    }
    Ok(spi_core::controller::LabeledSet { queries, histogram })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                SpiError::InvalidConfig(_) | SpiError::Format(_) | SpiError::EmptyInput(_) => {
                    ExitCode::from(2)
                }
                _ => ExitCode::from(3),
            }
        }
    }
}
