//! Synthetic corpus generation and embedding-file ingestion.
//!
//! The synthetic corpus is a Gaussian mixture engineered to carry a genuine
//! easy/hard query split:
//!
//! - Cluster centers live in a shared low-dimensional subspace, so coarse
//!   (level-1) projections resolve cluster identity.
//! - *Tight* clusters hold exactly a result page of near-duplicate documents
//!   each; queries near them are answerable at the coarsest level.
//! - *Diffuse* clusters are large and built from micro-groups: each group is
//!   a handful of near-duplicates whose offset from the cluster center has a
//!   coarse-visible part (a mixture toward other centers, inside the shared
//!   subspace) plus a full-rank fine part that only the finest level sees.
//!   A document's neighbor set is its own group at every level (stable), but
//!   the *ranking between* groups around a probe point needs the fine
//!   structure, which is what deep retrieval pays for.
//!
//! Queries mix perturbed tight-cluster documents (easy) with midpoints of
//! diffuse cluster pairs (hard), 50/50. Tight centers lean toward a common
//! direction so the easy region is linearly recognizable from the coarse
//! embedding.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, SpiError};
use crate::format::{matrix_from_bytes, matrix_to_bytes, StorageMode};
use crate::math;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum CorpusKind {
    SyntheticGaussianMixture,
    ExternalEmbeddingFile(String),
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CorpusSpec {
    pub kind: CorpusKind,
    pub n_docs: usize,
    pub dim: usize,
    pub n_clusters: usize,
    /// Component std of the coarse within-cluster mixture noise.
    pub cluster_std: f32,
    pub seed: u64,
    pub storage: StorageMode,
    /// Fraction of clusters that are tight (coarse-answerable).
    pub tight_fraction: f64,
    /// Documents per tight cluster.
    pub tight_size: usize,
    /// Component std of tight-cluster noise.
    pub tight_std: f32,
    /// Full-rank component std of each micro-group offset (fine structure).
    pub fine_std: f32,
    /// Dimension of the shared subspace hosting centers and mixture noise.
    pub shared_dim: usize,
    /// Centers mixed into each micro-group offset.
    pub mix_neighbors: usize,
    /// Documents per diffuse micro-group.
    pub group_size: usize,
    /// Component std of the within-group jitter.
    pub group_jitter: f32,
    /// Spread of tight-cluster centers around the common easy direction.
    pub tight_spread: f32,
    /// Diffuse centers keep |cos| to the easy direction below this margin,
    /// making the easy region linearly recognizable.
    pub diffuse_max_cos: f32,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            kind: CorpusKind::SyntheticGaussianMixture,
            n_docs: 10_000,
            dim: 64,
            n_clusters: 50,
            cluster_std: 0.15,
            seed: 42,
            storage: StorageMode::Float32,
            tight_fraction: 0.5,
            tight_size: 10,
            tight_std: 0.01,
            fine_std: 0.02,
            shared_dim: 16,
            mix_neighbors: 4,
            group_size: 11,
            group_jitter: 0.008,
            tight_spread: 0.5,
            diffuse_max_cos: 0.2,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_docs == 0 || self.dim == 0 || self.n_clusters == 0 {
            return Err(SpiError::InvalidConfig("empty corpus spec".into()));
        }
        if self.shared_dim > self.dim {
            return Err(SpiError::InvalidConfig(
                "shared subspace exceeds dimension".into(),
            ));
        }
        let tight = (self.n_clusters as f64 * self.tight_fraction) as usize;
        if tight * self.tight_size > self.n_docs {
            return Err(SpiError::InvalidConfig(
                "tight clusters exceed corpus size".into(),
            ));
        }
        Ok(())
    }
}

/// Generated corpus with the metadata the query generator and experiments
/// need.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub ids: Vec<u64>,
    pub vectors: Vec<Vec<f32>>,
    /// Cluster index per document.
    pub cluster_of: Vec<u32>,
    /// Micro-group index per document (tight clusters count as one group).
    pub group_of: Vec<u32>,
    /// Micro-group centers, indexed by group id (tight clusters contribute
    /// their cluster center).
    pub group_centers: Vec<Vec<f32>>,
    /// Coarse part of each group center (before the fine offset), unit
    /// normalized. Hard probes midpoint these so two groups tie exactly at
    /// coarse resolution.
    pub group_coarse: Vec<Vec<f32>>,
    /// Cluster owning each group.
    pub group_cluster: Vec<u32>,
    /// Cluster centers (unit vectors).
    pub centers: Vec<Vec<f32>>,
    /// Which clusters are tight.
    pub tight: Vec<bool>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn id_map(&self) -> BTreeMap<u64, Vec<f32>> {
        self.ids
            .iter()
            .zip(&self.vectors)
            .map(|(id, v)| (*id, v.clone()))
            .collect()
    }
}

fn gauss_vec(rng: &mut ChaCha20Rng, dim: usize, std: f32) -> Vec<f32> {
    (0..dim)
        .map(|_| {
            let g: f64 = StandardNormal.sample(rng);
            g as f32 * std
        })
        .collect()
}

/// Generate the synthetic clustered corpus for a spec.
pub fn generate(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    if let CorpusKind::ExternalEmbeddingFile(path) = &spec.kind {
        return ingest_file(Path::new(path), spec);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let n_tight = (spec.n_clusters as f64 * spec.tight_fraction) as usize;
    let n_diffuse = spec.n_clusters - n_tight;

    // Unit centers inside the shared subspace (first shared_dim coords).
    // Tight centers lean toward a common direction.
    let easy_dir = {
        let mut v = vec![0.0f32; spec.dim];
        for x in v.iter_mut().take(spec.shared_dim) {
            let g: f64 = StandardNormal.sample(&mut rng);
            *x = g as f32;
        }
        math::normalized_f32(&v, "easy direction").unwrap()
    };
    let mut sample_shared = |rng: &mut ChaCha20Rng| -> Vec<f32> {
        let mut v = vec![0.0f32; spec.dim];
        for x in v.iter_mut().take(spec.shared_dim) {
            let g: f64 = StandardNormal.sample(rng);
            *x = g as f32;
        }
        math::normalized_f32(&v, "cluster center").unwrap()
    };
    let centers: Vec<Vec<f32>> = (0..spec.n_clusters)
        .map(|c| {
            if c < n_tight {
                // Tight centers populate a cone around the easy direction.
                let r = sample_shared(&mut rng);
                let v: Vec<f32> = easy_dir
                    .iter()
                    .zip(&r)
                    .map(|(e, x)| e + spec.tight_spread * x)
                    .collect();
                math::normalized_f32(&v, "tight center").unwrap()
            } else {
                // Diffuse centers keep an angular margin to that cone.
                loop {
                    let v = sample_shared(&mut rng);
                    if math::dot_f32(&v, &easy_dir).abs() <= spec.diffuse_max_cos {
                        break v;
                    }
                }
            }
        })
        .collect();
    let tight: Vec<bool> = (0..spec.n_clusters).map(|c| c < n_tight).collect();

    let tight_docs = n_tight * spec.tight_size;
    let diffuse_docs = spec.n_docs - tight_docs;
    let mut ids = Vec::with_capacity(spec.n_docs);
    let mut vectors = Vec::with_capacity(spec.n_docs);
    let mut cluster_of = Vec::with_capacity(spec.n_docs);
    let mut group_of = Vec::with_capacity(spec.n_docs);
    let mut group_centers: Vec<Vec<f32>> = Vec::new();
    let mut group_coarse: Vec<Vec<f32>> = Vec::new();
    let mut group_cluster: Vec<u32> = Vec::new();
    let mut next_id = 0u64;
    let mut next_group = 0u32;

    for c in 0..n_tight {
        for _ in 0..spec.tight_size {
            let noise = gauss_vec(&mut rng, spec.dim, spec.tight_std);
            let v: Vec<f32> = centers[c].iter().zip(&noise).map(|(a, b)| a + b).collect();
            ids.push(next_id);
            vectors.push(math::normalized_f32(&v, "tight doc")?);
            cluster_of.push(c as u32);
            group_of.push(next_group);
            next_id += 1;
        }
        group_centers.push(centers[c].clone());
        group_coarse.push(centers[c].clone());
        group_cluster.push(c as u32);
        next_group += 1;
    }

    // Diffuse clusters: micro-groups of near-duplicates. The group offset
    // has a coarse part (mixture toward other centers, inside the shared
    // subspace) and a fine full-rank part.
    let per_cluster = diffuse_docs.div_ceil(n_diffuse.max(1));
    let mut emitted = 0usize;
    'outer: for c in n_tight..spec.n_clusters {
        let mut in_cluster = 0usize;
        while in_cluster < per_cluster {
            let mut micro = centers[c].clone();
            for _ in 0..spec.mix_neighbors {
                let other = rng.random_range(0..spec.n_clusters);
                let g: f64 = StandardNormal.sample(&mut rng);
                let w = g as f32 * spec.cluster_std;
                for (dst, x) in micro.iter_mut().zip(&centers[other]) {
                    *dst += w * x;
                }
            }
            group_coarse.push(math::normalized_f32(&micro, "group coarse")?);
            // Fine offsets live outside the shared subspace, invisible to
            // any coarse view of the data.
            let mut fine = gauss_vec(&mut rng, spec.dim, spec.fine_std);
            for f in fine.iter_mut().take(spec.shared_dim) {
                *f = 0.0;
            }
            for (dst, f) in micro.iter_mut().zip(&fine) {
                *dst += f;
            }
            group_centers.push(micro.clone());
            group_cluster.push(c as u32);
            for _ in 0..spec.group_size {
                let jitter = gauss_vec(&mut rng, spec.dim, spec.group_jitter);
                let v: Vec<f32> = micro.iter().zip(&jitter).map(|(a, b)| a + b).collect();
                ids.push(next_id);
                vectors.push(math::normalized_f32(&v, "diffuse doc")?);
                cluster_of.push(c as u32);
                group_of.push(next_group);
                next_id += 1;
                in_cluster += 1;
                emitted += 1;
                if emitted == diffuse_docs {
                    break 'outer;
                }
                if in_cluster == per_cluster {
                    break;
                }
            }
            next_group += 1;
        }
    }

    Ok(Corpus {
        spec: spec.clone(),
        ids,
        vectors,
        cluster_of,
        group_of,
        group_centers,
        group_coarse,
        group_cluster,
        centers,
        tight,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum QueryKind {
    Easy,
    Hard,
}

#[derive(Debug, Clone)]
pub struct QuerySet {
    pub vectors: Vec<Vec<f32>>,
    pub kinds: Vec<QueryKind>,
}

/// 50/50 mix of perturbed tight-cluster documents (easy) and cluster
/// midpoint probes (hard). A hard probe sits at the midpoint of two
/// micro-groups from different diffuse clusters: the two groups tie at
/// coarse resolution and only the fine structure ranks their documents.
pub fn generate_queries(corpus: &Corpus, n_queries: usize, seed: u64) -> Result<QuerySet> {
    if corpus.is_empty() {
        return Err(SpiError::EmptyInput("query generation corpus"));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5155_4552);
    let tight_docs: Vec<usize> = (0..corpus.len())
        .filter(|&i| corpus.tight[corpus.cluster_of[i] as usize])
        .collect();
    let diffuse_groups: Vec<usize> = (0..corpus.group_centers.len())
        .filter(|&g| !corpus.tight[corpus.group_cluster[g] as usize])
        .collect();
    if tight_docs.is_empty() || diffuse_groups.len() < 2 {
        return Err(SpiError::InvalidConfig(
            "query mix needs tight docs and at least two diffuse groups".into(),
        ));
    }

    let mut vectors = Vec::with_capacity(n_queries);
    let mut kinds = Vec::with_capacity(n_queries);
    for qi in 0..n_queries {
        if qi % 2 == 0 {
            let &doc = tight_docs.choose(&mut rng).unwrap();
            let noise = gauss_vec(&mut rng, corpus.spec.dim, corpus.spec.tight_std);
            let v: Vec<f32> = corpus.vectors[doc]
                .iter()
                .zip(&noise)
                .map(|(a, b)| a + b)
                .collect();
            vectors.push(math::normalized_f32(&v, "easy query")?);
            kinds.push(QueryKind::Easy);
        } else {
            let ga = *diffuse_groups.choose(&mut rng).unwrap();
            let gb = loop {
                let gb = *diffuse_groups.choose(&mut rng).unwrap();
                if corpus.group_cluster[gb] != corpus.group_cluster[ga] {
                    break gb;
                }
            };
            // Midpoint of the unit coarse directions: both groups tie at
            // coarse resolution; their fine offsets break the tie.
            let mut v: Vec<f32> = corpus.group_coarse[ga]
                .iter()
                .zip(&corpus.group_coarse[gb])
                .map(|(x, y)| 0.5 * (x + y))
                .collect();
            let noise = gauss_vec(&mut rng, corpus.spec.dim, corpus.spec.fine_std);
            for (dst, n) in v.iter_mut().zip(&noise) {
                *dst += n;
            }
            vectors.push(math::normalized_f32(&v, "hard query")?);
            kinds.push(QueryKind::Hard);
        }
    }
    Ok(QuerySet { vectors, kinds })
}

/// Anchor/positive training pairs: anchors sampled from the corpus,
/// positives are small perturbations, normalized.
pub fn training_batches(
    corpus: &Corpus,
    n_batches: usize,
    batch_size: usize,
    perturb_std: f32,
    seed: u64,
) -> Result<Vec<crate::pyramid::train::TrainingBatch>> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5041_4952);
    let mut batches = Vec::with_capacity(n_batches);
    for _ in 0..n_batches {
        let mut anchors = Vec::with_capacity(batch_size);
        let mut positives = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let i = rng.random_range(0..corpus.len());
            anchors.push(corpus.vectors[i].clone());
            let noise = gauss_vec(&mut rng, corpus.spec.dim, perturb_std);
            let v: Vec<f32> = corpus.vectors[i]
                .iter()
                .zip(&noise)
                .map(|(a, b)| a + b)
                .collect();
            positives.push(math::normalized_f32(&v, "training positive")?);
        }
        batches.push(crate::pyramid::train::TrainingBatch::new(anchors, positives)?);
    }
    Ok(batches)
}

// ---------------------------------------------------------------------------
// File ingestion
// ---------------------------------------------------------------------------

/// Load a corpus from a SPIM matrix file or a CSV of floats. Vectors are
/// validated, unit-normalized and optionally int8-quantized at rest.
pub fn ingest_file(path: &Path, spec: &CorpusSpec) -> Result<Corpus> {
    let raw = std::fs::read(path)?;
    let (ids, rows) = if raw.starts_with(crate::format::MAGIC_MATRIX) {
        let (ids, rows, _) = matrix_from_bytes(&raw)?;
        (ids, rows)
    } else {
        parse_csv_matrix(&raw)?
    };
    if rows.is_empty() {
        return Err(SpiError::EmptyInput("ingested corpus"));
    }
    let dim = rows[0].len();
    let mut vectors = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        if row.len() != dim {
            return Err(SpiError::Format(format!(
                "row {i} has {} columns, expected {dim}",
                row.len()
            )));
        }
        if !math::all_finite_f32(row) {
            return Err(SpiError::Format(format!("row {i} has non-finite values")));
        }
        // Normalize on the way in; rows that are already unit length pass
        // through bit-identically.
        let n = math::norm_f32(row);
        if (n - 1.0).abs() <= 1e-3 {
            vectors.push(row.clone());
        } else {
            vectors.push(math::normalized_f32(row, "ingested row")?);
        }
    }
    let n = vectors.len();
    let mut spec = spec.clone();
    spec.n_docs = n;
    spec.dim = dim;
    Ok(Corpus {
        spec,
        ids,
        cluster_of: vec![0; n],
        group_of: vec![0; n],
        group_centers: Vec::new(),
        group_coarse: Vec::new(),
        group_cluster: Vec::new(),
        centers: Vec::new(),
        tight: Vec::new(),
        vectors,
    })
}

fn parse_csv_matrix(raw: &[u8]) -> Result<(Vec<u64>, Vec<Vec<f32>>)> {
    let text = std::str::from_utf8(raw)
        .map_err(|_| SpiError::Format("corpus file is neither SPIM nor UTF-8 CSV".into()))?;
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut row = Vec::new();
        for field in line.split(',') {
            let v: f32 = field.trim().parse().map_err(|_| {
                SpiError::Format(format!("row {}: bad float {:?}", lineno + 1, field.trim()))
            })?;
            row.push(v);
        }
        ids.push(rows.len() as u64);
        rows.push(row);
    }
    Ok((ids, rows))
}

/// Write a corpus to a SPIM file in the requested storage mode.
pub fn write_corpus(corpus: &Corpus, path: &Path, mode: StorageMode) -> Result<()> {
    let bytes = matrix_to_bytes(&corpus.ids, &corpus.vectors, mode)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            n_docs: 500,
            n_clusters: 10,
            dim: 32,
            shared_dim: 12,
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_reproducible_and_unit_norm() {
        let spec = small_spec();
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.vectors, b.vectors);
        assert_eq!(a.len(), 500);
        for v in &a.vectors {
            assert!((math::norm_f32(v) - 1.0).abs() < 1e-5);
        }
        // Tight clusters have exactly tight_size docs.
        let tight_count = a
            .cluster_of
            .iter()
            .filter(|&&c| a.tight[c as usize])
            .count();
        assert_eq!(tight_count, 5 * spec.tight_size);
    }

    #[test]
    fn queries_follow_the_mix() {
        let corpus = generate(&small_spec()).unwrap();
        let qs = generate_queries(&corpus, 40, 3).unwrap();
        let easy = qs.kinds.iter().filter(|k| **k == QueryKind::Easy).count();
        assert_eq!(easy, 20);
        for v in &qs.vectors {
            assert!((math::norm_f32(v) - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn csv_roundtrip_and_bad_row_reporting() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        std::fs::write(&path, "0.5,0.5\n0.1,0.9\n").unwrap();
        let corpus = ingest_file(&path, &small_spec()).unwrap();
        assert_eq!(corpus.len(), 2);
        assert_eq!(corpus.spec.dim, 2);

        std::fs::write(&path, "0.5,0.5\n0.1,oops\n").unwrap();
        match ingest_file(&path, &small_spec()) {
            Err(SpiError::Format(msg)) => assert!(msg.contains("row 2"), "{msg}"),
            other => panic!("expected row error, got {other:?}"),
        }
    }

    #[test]
    fn spim_roundtrip_float_and_int8() {
        let corpus = generate(&small_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();

        let f32_path = dir.path().join("c.spim");
        write_corpus(&corpus, &f32_path, StorageMode::Float32).unwrap();
        let loaded = ingest_file(&f32_path, &corpus.spec).unwrap();
        assert_eq!(loaded.vectors, corpus.vectors, "float32 roundtrip exact");

        let i8_path = dir.path().join("c_i8.spim");
        write_corpus(&corpus, &i8_path, StorageMode::Int8Scaled).unwrap();
        let loaded = ingest_file(&i8_path, &corpus.spec).unwrap();
        for (a, b) in corpus.vectors.iter().zip(&loaded.vectors) {
            for (x, y) in a.iter().zip(b) {
                // Quantization bound plus the renormalization wiggle.
                assert!((x - y).abs() < 1.5 / 127.0, "{x} vs {y}");
            }
        }
    }
}

#[cfg(test)]
mod probe {
    use super::*;
    use crate::bench::world::{train_world_encoder, WorldConfig};

    #[test]
    #[ignore]
    fn neighbor_structure_probe() {
        let spec = CorpusSpec::default();
        let corpus = generate(&spec).unwrap();
        let wc = WorldConfig { corpus: spec.clone(), seed: 42, ..Default::default() };
        let (encoder, _) = train_world_encoder(&wc, &corpus, vec![16, 32, 64], 0.5).unwrap();

        let n_tight_docs = 250usize;
        let group_of = |i: usize| -> usize { corpus.group_of[i] as usize };

        use rand::seq::SliceRandom;
        use rand_chacha::rand_core::SeedableRng;
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(9);
        order.shuffle(&mut rng);
        let sample: Vec<usize> = order.into_iter().take(300).collect();

        let pyr: Vec<Vec<Vec<f32>>> = corpus.vectors.iter().map(|v| encoder.encode(v).unwrap()).collect();
        for level in 0..3usize {
            let mut in_group = 0.0;
            let mut n_eval = 0.0;
            for &qi in &sample {
                if qi < n_tight_docs { continue; }
                let q = &pyr[qi][level];
                let mut scored: Vec<(usize, f32)> = (0..corpus.len()).filter(|i| *i != qi)
                    .map(|i| (i, crate::math::dot_f32(q, &pyr[i][level]))).collect();
                scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
                let g = group_of(qi);
                let frac = scored.iter().take(10).filter(|(i, _)| group_of(*i) == g).count() as f64 / 10.0;
                in_group += frac;
                n_eval += 1.0;
            }
            println!("level {}: mean in-group fraction of top-10 = {:.3}", level + 1, in_group / n_eval);
        }
    }
}
