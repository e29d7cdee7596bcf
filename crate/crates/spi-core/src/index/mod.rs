//! Per-level ANN index with exact-flat, IVF, and IVF+PQ backends.
//!
//! All scoring is cosine over unit-normalized vectors, computed as a dot
//! product. Results follow the global tie rule: descending score, then
//! ascending doc id. Restricted searches (the refinement path) bypass list
//! probing entirely and gather the listed ids directly.

pub mod kmeans;
pub mod pq;

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use crate::error::{Result, SpiError};
use crate::math;
use pq::{PqCodebook, PqLookup};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Backend {
    Flat,
    Ivf,
    IvfPq,
}

impl Backend {
    pub fn as_u8(self) -> u8 {
        match self {
            Backend::Flat => 0,
            Backend::Ivf => 1,
            Backend::IvfPq => 2,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Backend::Flat),
            1 => Ok(Backend::Ivf),
            2 => Ok(Backend::IvfPq),
            other => Err(SpiError::Format(format!("unknown backend tag {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct IndexSpec {
    pub backend: Backend,
    /// IVF coarse centroid count.
    pub n_lists: usize,
    /// Lists probed per unrestricted search.
    pub n_probe: usize,
    /// PQ subspace count M (must divide the level dimension).
    pub pq_subspaces: usize,
    /// Bits per PQ code (8 -> 256 centroids per subspace).
    pub pq_bits: u8,
}

impl IndexSpec {
    pub fn flat() -> Self {
        IndexSpec {
            backend: Backend::Flat,
            n_lists: 0,
            n_probe: 0,
            pq_subspaces: 0,
            pq_bits: 0,
        }
    }

    pub fn ivf(n_lists: usize, n_probe: usize) -> Self {
        IndexSpec {
            backend: Backend::Ivf,
            n_lists,
            n_probe,
            pq_subspaces: 0,
            pq_bits: 0,
        }
    }

    pub fn ivf_pq(n_lists: usize, n_probe: usize, subspaces: usize, bits: u8) -> Self {
        IndexSpec {
            backend: Backend::IvfPq,
            n_lists,
            n_probe,
            pq_subspaces: subspaces,
            pq_bits: bits,
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        match self.backend {
            Backend::Flat => Ok(()),
            Backend::Ivf | Backend::IvfPq => {
                if self.n_lists == 0 || self.n_probe == 0 || self.n_probe > self.n_lists {
                    return Err(SpiError::InvalidConfig(format!(
                        "need 1 <= n_probe ({}) <= n_lists ({})",
                        self.n_probe, self.n_lists
                    )));
                }
                if self.backend == Backend::IvfPq {
                    if self.pq_subspaces == 0 || dim % self.pq_subspaces != 0 {
                        return Err(SpiError::InvalidConfig(format!(
                            "pq subspaces {} must divide dim {dim}",
                            self.pq_subspaces
                        )));
                    }
                    if self.pq_bits == 0 || self.pq_bits > 8 {
                        return Err(SpiError::InvalidConfig("pq bits outside 1..=8".into()));
                    }
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchHit {
    pub doc_id: u64,
    pub score: f32,
    pub level: u8,
}

/// Work counters for one search call. `scored_docs` counts document vectors
/// scored (the primary pruning metric); centroid scans are reported
/// separately.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct SearchStats {
    pub scored_docs: usize,
    pub scored_centroids: usize,
    pub restrict_misses: usize,
}

impl SearchStats {
    pub fn add(&mut self, other: &SearchStats) {
        self.scored_docs += other.scored_docs;
        self.scored_centroids += other.scored_centroids;
        self.restrict_misses += other.restrict_misses;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Payload {
    Raw(Vec<f32>),
    Code(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Entry {
    pub id: u64,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Storage {
    Flat {
        ids: Vec<u64>,
        vecs: Vec<f32>,
        by_id: BTreeMap<u64, usize>,
    },
    Ivf {
        centroids: Vec<f32>,
        lists: Vec<Vec<Entry>>,
        by_id: BTreeMap<u64, (u32, u32)>,
        codebook: Option<PqCodebook>,
    },
}

/// One ANN index over one level of one partition.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelIndex {
    pub level: u8,
    pub dim: usize,
    pub spec: IndexSpec,
    pub(crate) storage: Storage,
}

fn check_vector(v: &[f32], dim: usize) -> Result<()> {
    if v.len() != dim {
        return Err(SpiError::DimensionMismatch {
            context: "index vector",
            expected: dim,
            got: v.len(),
        });
    }
    if !math::all_finite_f32(v) {
        return Err(SpiError::NonFinite("index vector"));
    }
    let n = math::norm_f32(v);
    if (n - 1.0).abs() > 1e-3 {
        return Err(SpiError::InvalidConfig(format!(
            "index vectors must be unit norm, got {n}"
        )));
    }
    Ok(())
}

/// Squared Euclidean distance, the k-means assignment metric. Probing uses
/// the same metric so list membership and probe order agree.
#[inline]
fn dist_sq(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for i in 0..a.len() {
        let d = a[i] as f64 - b[i] as f64;
        acc += d * d;
    }
    acc
}

impl LevelIndex {
    /// Build an index over `vectors` (unit-norm, dimension-checked).
    /// IVF centroids come from seeded k-means; the PQ codebook is trained on
    /// the same vectors.
    pub fn build(
        vectors: &BTreeMap<u64, Vec<f32>>,
        level: u8,
        spec: IndexSpec,
        seed: u64,
    ) -> Result<Self> {
        let dim = vectors
            .values()
            .next()
            .map(|v| v.len())
            .ok_or(SpiError::EmptyInput("index build vectors"))?;
        spec.validate(dim)?;
        for v in vectors.values() {
            check_vector(v, dim)?;
        }
        let n = vectors.len();

        let storage = match spec.backend {
            Backend::Flat => {
                let mut ids = Vec::with_capacity(n);
                let mut vecs = Vec::with_capacity(n * dim);
                let mut by_id = BTreeMap::new();
                for (row, (&id, v)) in vectors.iter().enumerate() {
                    ids.push(id);
                    vecs.extend_from_slice(v);
                    by_id.insert(id, row);
                }
                Storage::Flat { ids, vecs, by_id }
            }
            Backend::Ivf | Backend::IvfPq => {
                if n < spec.n_lists {
                    return Err(SpiError::TooFewVectors {
                        context: "ivf build",
                        required: spec.n_lists,
                        got: n,
                    });
                }
                let mut flat = Vec::with_capacity(n * dim);
                for v in vectors.values() {
                    flat.extend_from_slice(v);
                }
                let km = kmeans::kmeans(&flat, n, dim, spec.n_lists, seed)?;
                let codebook = if spec.backend == Backend::IvfPq {
                    Some(PqCodebook::train(
                        &flat,
                        n,
                        dim,
                        spec.pq_subspaces,
                        spec.pq_bits,
                        seed ^ 0x5051,
                    )?)
                } else {
                    None
                };
                let mut lists: Vec<Vec<Entry>> = vec![Vec::new(); spec.n_lists];
                let mut by_id = BTreeMap::new();
                for (row, (&id, v)) in vectors.iter().enumerate() {
                    let list = km.assignments[row] as usize;
                    let payload = match &codebook {
                        Some(cb) => Payload::Code(cb.encode(v)?),
                        None => Payload::Raw(v.clone()),
                    };
                    by_id.insert(id, (list as u32, lists[list].len() as u32));
                    lists[list].push(Entry { id, payload });
                }
                Storage::Ivf {
                    centroids: km.centroids,
                    lists,
                    by_id,
                    codebook,
                }
            }
        };
        Ok(LevelIndex {
            level,
            dim,
            spec,
            storage,
        })
    }

    pub fn len(&self) -> usize {
        match &self.storage {
            Storage::Flat { ids, .. } => ids.len(),
            Storage::Ivf { by_id, .. } => by_id.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, id: u64) -> bool {
        match &self.storage {
            Storage::Flat { by_id, .. } => by_id.contains_key(&id),
            Storage::Ivf { by_id, .. } => by_id.contains_key(&id),
        }
    }

    pub fn ids(&self) -> Vec<u64> {
        match &self.storage {
            Storage::Flat { by_id, .. } => by_id.keys().copied().collect(),
            Storage::Ivf { by_id, .. } => by_id.keys().copied().collect(),
        }
    }

    /// Stored vector for a doc; PQ entries decode through the codebook.
    pub fn get_vector(&self, id: u64) -> Option<Vec<f32>> {
        match &self.storage {
            Storage::Flat { vecs, by_id, .. } => by_id
                .get(&id)
                .map(|&row| vecs[row * self.dim..(row + 1) * self.dim].to_vec()),
            Storage::Ivf {
                lists,
                by_id,
                codebook,
                ..
            } => by_id.get(&id).map(|&(l, p)| {
                match &lists[l as usize][p as usize].payload {
                    Payload::Raw(v) => v.clone(),
                    Payload::Code(c) => codebook
                        .as_ref()
                        .expect("code payload without codebook")
                        .decode(c)
                        .expect("stored code decodes"),
                }
            }),
        }
    }

    /// Top-k by the global tie rule. With `restrict`, only the listed ids
    /// are scored (identity gather, no probing); unknown ids are skipped and
    /// counted in the stats.
    pub fn search(
        &self,
        query: &[f32],
        k: usize,
        restrict: Option<&BTreeSet<u64>>,
    ) -> Result<(Vec<SearchHit>, SearchStats)> {
        if query.len() != self.dim {
            return Err(SpiError::DimensionMismatch {
                context: "search query",
                expected: self.dim,
                got: query.len(),
            });
        }
        if !math::all_finite_f32(query) {
            return Err(SpiError::NonFinite("search query"));
        }
        let mut stats = SearchStats::default();
        let mut scored: Vec<(u64, f32)> = Vec::new();

        match (&self.storage, restrict) {
            (Storage::Flat { ids, vecs, .. }, None) => {
                scored.reserve(ids.len());
                for (row, &id) in ids.iter().enumerate() {
                    let v = &vecs[row * self.dim..(row + 1) * self.dim];
                    scored.push((id, math::dot_f32(query, v)));
                }
                stats.scored_docs = ids.len();
            }
            (Storage::Flat { vecs, by_id, .. }, Some(set)) => {
                for &id in set {
                    match by_id.get(&id) {
                        Some(&row) => {
                            let v = &vecs[row * self.dim..(row + 1) * self.dim];
                            scored.push((id, math::dot_f32(query, v)));
                            stats.scored_docs += 1;
                        }
                        None => stats.restrict_misses += 1,
                    }
                }
            }
            (
                Storage::Ivf {
                    centroids,
                    lists,
                    codebook,
                    ..
                },
                None,
            ) => {
                if lists.iter().all(|l| l.is_empty()) {
                    return Ok((Vec::new(), stats));
                }
                let n_lists = lists.len();
                let mut order: Vec<(usize, f64)> = (0..n_lists)
                    .map(|c| (c, dist_sq(query, &centroids[c * self.dim..(c + 1) * self.dim])))
                    .collect();
                stats.scored_centroids = n_lists;
                order.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
                let lut = match codebook {
                    Some(cb) => Some(cb.lookup_tables(query)?),
                    None => None,
                };
                for &(list, _) in order.iter().take(self.spec.n_probe) {
                    for entry in &lists[list] {
                        scored.push((entry.id, score_entry(entry, query, &lut)));
                    }
                    stats.scored_docs += lists[list].len();
                }
            }
            (
                Storage::Ivf {
                    lists,
                    by_id,
                    codebook,
                    ..
                },
                Some(set),
            ) => {
                let lut = match codebook {
                    Some(cb) => Some(cb.lookup_tables(query)?),
                    None => None,
                };
                for &id in set {
                    match by_id.get(&id) {
                        Some(&(l, p)) => {
                            let entry = &lists[l as usize][p as usize];
                            scored.push((id, score_entry(entry, query, &lut)));
                            stats.scored_docs += 1;
                        }
                        None => stats.restrict_misses += 1,
                    }
                }
            }
        }

        let top = math::top_k_by_score(scored, k);
        let hits = top
            .into_iter()
            .map(|(doc_id, score)| SearchHit {
                doc_id,
                score,
                level: self.level,
            })
            .collect();
        Ok((hits, stats))
    }

    /// Insert without re-clustering: IVF assigns to the nearest existing
    /// centroid. Duplicate ids are rejected.
    pub fn insert(&mut self, id: u64, vector: &[f32]) -> Result<()> {
        check_vector(vector, self.dim)?;
        if self.contains(id) {
            return Err(SpiError::DuplicateDoc(id));
        }
        match &mut self.storage {
            Storage::Flat { ids, vecs, by_id } => {
                by_id.insert(id, ids.len());
                ids.push(id);
                vecs.extend_from_slice(vector);
            }
            Storage::Ivf {
                centroids,
                lists,
                by_id,
                codebook,
            } => {
                let dim = self.dim;
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for c in 0..lists.len() {
                    let d = dist_sq(vector, &centroids[c * dim..(c + 1) * dim]);
                    if d < best_d {
                        best_d = d;
                        best = c;
                    }
                }
                let payload = match codebook {
                    Some(cb) => Payload::Code(cb.encode(vector)?),
                    None => Payload::Raw(vector.to_vec()),
                };
                by_id.insert(id, (best as u32, lists[best].len() as u32));
                lists[best].push(Entry { id, payload });
            }
        }
        Ok(())
    }

    /// Remove a document; absent ids are rejected.
    pub fn remove(&mut self, id: u64) -> Result<()> {
        match &mut self.storage {
            Storage::Flat { ids, vecs, by_id } => {
                let row = *by_id.get(&id).ok_or(SpiError::UnknownDoc(id))?;
                let last = ids.len() - 1;
                ids.swap_remove(row);
                let dim = self.dim;
                // Move the last row into the vacated slot.
                if row != last {
                    let (head, tail) = vecs.split_at_mut(last * dim);
                    head[row * dim..(row + 1) * dim].copy_from_slice(&tail[..dim]);
                    let moved = ids[row];
                    by_id.insert(moved, row);
                }
                vecs.truncate(last * dim);
                by_id.remove(&id);
            }
            Storage::Ivf { lists, by_id, .. } => {
                let (l, p) = *by_id.get(&id).ok_or(SpiError::UnknownDoc(id))?;
                let list = &mut lists[l as usize];
                list.swap_remove(p as usize);
                if (p as usize) < list.len() {
                    let moved = list[p as usize].id;
                    by_id.insert(moved, (l, p));
                }
                by_id.remove(&id);
            }
        }
        Ok(())
    }
}

#[inline]
fn score_entry(entry: &Entry, query: &[f32], lut: &Option<PqLookup>) -> f32 {
    match (&entry.payload, lut) {
        (Payload::Raw(v), _) => math::dot_f32(query, v),
        (Payload::Code(c), Some(lut)) => lut.score(c),
        (Payload::Code(_), None) => unreachable!("code payload without codebook"),
    }
}

/// Exact top-k by naive scan over (id, vector) pairs; the reference oracle
/// that the Flat backend must match hit-for-hit.
pub fn brute_force_topk(
    vectors: &BTreeMap<u64, Vec<f32>>,
    query: &[f32],
    k: usize,
) -> Vec<(u64, f32)> {
    let scored: Vec<(u64, f32)> = vectors
        .iter()
        .map(|(&id, v)| (id, math::dot_f32(query, v)))
        .collect();
    math::top_k_by_score(scored, k)
}
