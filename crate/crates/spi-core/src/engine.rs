//! Single-process retrieval engine: the full pyramid plus one index per
//! level over one partition. The distributed fabric composes the same
//! pieces across nodes.

use std::collections::{BTreeMap, BTreeSet};

use crate::controller::{DepthController, QueryPlan};
use crate::error::{Result, SpiError};
use crate::index::{IndexSpec, LevelIndex, SearchHit};
use crate::pipeline::{self, RetrievalTrace, ShardResponse, ShardSearcher};
use crate::pyramid::{ProgressiveEncoder, PyramidDims};

/// Per-level embedding matrices for a whole corpus, rows parallel to `ids`.
#[derive(Debug, Clone)]
pub struct PyramidCorpus {
    pub dims: PyramidDims,
    pub ids: Vec<u64>,
    /// level_data[l-1] is row-major, n x dim(l).
    pub level_data: Vec<Vec<f32>>,
}

impl PyramidCorpus {
    pub fn from_sources(
        ids: &[u64],
        sources: &[Vec<f32>],
        encoder: &ProgressiveEncoder,
    ) -> Result<Self> {
        if ids.len() != sources.len() {
            return Err(SpiError::InvalidConfig(
                "ids and sources differ in length".into(),
            ));
        }
        let dims = encoder.dims.clone();
        let mut level_data: Vec<Vec<f32>> = (1..=dims.levels())
            .map(|l| Vec::with_capacity(ids.len() * dims.dim(l)))
            .collect();
        for src in sources {
            let levels = encoder.encode(src)?;
            for (l, v) in levels.iter().enumerate() {
                level_data[l].extend_from_slice(v);
            }
        }
        Ok(PyramidCorpus {
            dims,
            ids: ids.to_vec(),
            level_data,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vector(&self, level: usize, row: usize) -> &[f32] {
        let d = self.dims.dim(level);
        &self.level_data[level - 1][row * d..(row + 1) * d]
    }

    /// Doc-id keyed view of one level, for index builds.
    pub fn level_map(&self, level: usize) -> BTreeMap<u64, Vec<f32>> {
        self.ids
            .iter()
            .enumerate()
            .map(|(row, &id)| (id, self.vector(level, row).to_vec()))
            .collect()
    }
}

/// Single-partition engine.
pub struct SpiEngine {
    pub encoder: ProgressiveEncoder,
    pub controller: DepthController,
    pub indexes: Vec<LevelIndex>,
}

impl SpiEngine {
    /// Build one index per level over the whole corpus.
    pub fn build(
        corpus: &PyramidCorpus,
        encoder: ProgressiveEncoder,
        controller: DepthController,
        specs: &[IndexSpec],
        seed: u64,
    ) -> Result<Self> {
        let levels = encoder.levels();
        if specs.len() != levels {
            return Err(SpiError::InvalidConfig(format!(
                "{} index specs for {} levels",
                specs.len(),
                levels
            )));
        }
        let mut indexes = Vec::with_capacity(levels);
        for l in 1..=levels {
            let map = corpus.level_map(l);
            indexes.push(LevelIndex::build(
                &map,
                l as u8,
                specs[l - 1],
                seed.wrapping_add(l as u64),
            )?);
        }
        Ok(SpiEngine {
            encoder,
            controller,
            indexes,
        })
    }

    pub fn levels(&self) -> usize {
        self.encoder.levels()
    }

    pub fn n_docs(&self) -> usize {
        self.indexes[self.indexes.len() - 1].len()
    }

    /// Plan via the controller unless an explicit override is given.
    pub fn plan(&self, query_source: &[f32], k: usize) -> Result<QueryPlan> {
        let q1 = self.encoder.encode_to_depth(query_source, 1)?;
        self.controller.plan(&q1[0], k)
    }

    /// Fixed-depth plan with the controller's budget schedule.
    pub fn fixed_plan(&self, depth: u8, k: usize) -> QueryPlan {
        QueryPlan {
            predicted: depth,
            confidence: 0.0,
            final_depth: depth,
            budgets: self.controller.schedule.budgets(k, depth as usize),
        }
    }

    /// Exhaustive plan: full depth, budgets covering the whole corpus.
    /// With Flat backends this reproduces the exact brute-force ranking.
    pub fn exhaustive_plan(&self) -> QueryPlan {
        let depth = self.levels() as u8;
        QueryPlan {
            predicted: depth,
            confidence: 0.0,
            final_depth: depth,
            budgets: vec![self.n_docs().max(1); depth as usize],
        }
    }

    pub fn retrieve(
        &self,
        query_source: &[f32],
        k: usize,
        plan_override: Option<&QueryPlan>,
    ) -> Result<(Vec<SearchHit>, RetrievalTrace)> {
        let plan = match plan_override {
            Some(p) => p.clone(),
            None => self.plan(query_source, k)?,
        };
        pipeline::retrieve(self, &self.encoder, &plan, query_source, k)
    }

    /// Insert one document into every level index (no re-clustering).
    pub fn insert(&mut self, doc_id: u64, source: &[f32]) -> Result<()> {
        let levels = self.encoder.encode(source)?;
        for (idx, v) in self.indexes.iter_mut().zip(&levels) {
            idx.insert(doc_id, v)?;
        }
        Ok(())
    }

    pub fn remove(&mut self, doc_id: u64) -> Result<()> {
        for idx in self.indexes.iter_mut() {
            idx.remove(doc_id)?;
        }
        Ok(())
    }
}

impl ShardSearcher for SpiEngine {
    fn shard_count(&self) -> usize {
        1
    }

    fn total_docs(&self) -> Option<usize> {
        Some(self.n_docs())
    }

    fn search_shard(
        &self,
        _shard: u32,
        level: u8,
        query: &[f32],
        k: usize,
        restrict: Option<&BTreeSet<u64>>,
    ) -> Result<ShardResponse> {
        let (hits, stats) = self.indexes[level as usize - 1].search(query, k, restrict)?;
        Ok(ShardResponse {
            hits,
            stats,
            served_by: 0,
            request_bytes: 0,
            response_bytes: 0,
        })
    }
}
