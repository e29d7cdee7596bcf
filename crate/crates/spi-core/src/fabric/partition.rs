//! Locality-sensitive document-to-node partitioning.
//!
//! Documents hash to shards by the sign pattern of random hyperplane
//! projections of their coarse (level-1) embedding, so semantically close
//! documents co-locate. Shard s is primary on node s; replicas follow the
//! ring order. The whole map is reproducible from (seed, N, R).

use std::collections::BTreeMap;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, SpiError};
use crate::math;

pub const DEFAULT_HYPERPLANES: usize = 16;

#[inline]
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

#[derive(Debug, Clone)]
pub struct PartitionMap {
    pub n_nodes: u32,
    /// Total replica count per shard including the primary.
    pub replication: u32,
    pub n_planes: usize,
    pub dim: usize,
    pub seed: u64,
    /// Row-major hyperplane normals, n_planes x dim.
    planes: Vec<f32>,
    /// doc id -> primary shard.
    pub assignment: BTreeMap<u64, u32>,
}

impl PartitionMap {
    pub fn new(n_nodes: u32, replication: u32, dim: usize, seed: u64) -> Result<Self> {
        Self::with_planes(n_nodes, replication, dim, seed, DEFAULT_HYPERPLANES)
    }

    pub fn with_planes(
        n_nodes: u32,
        replication: u32,
        dim: usize,
        seed: u64,
        n_planes: usize,
    ) -> Result<Self> {
        if n_nodes == 0 {
            return Err(SpiError::InvalidConfig("cluster needs at least one node".into()));
        }
        if replication == 0 || replication > n_nodes {
            return Err(SpiError::InvalidConfig(format!(
                "replication {replication} must be in 1..={n_nodes}"
            )));
        }
        if n_planes == 0 || n_planes > 64 {
            return Err(SpiError::InvalidConfig("hyperplane count outside 1..=64".into()));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x4c53_4850);
        let planes: Vec<f32> = (0..n_planes * dim)
            .map(|_| {
                let g: f64 = StandardNormal.sample(&mut rng);
                g as f32
            })
            .collect();
        Ok(PartitionMap {
            n_nodes,
            replication,
            n_planes,
            dim,
            seed,
            planes,
            assignment: BTreeMap::new(),
        })
    }

    /// Sign bits of the hyperplane projections (zero projections count as
    /// negative side, keeping signatures deterministic).
    pub fn signature(&self, e1: &[f32]) -> u64 {
        debug_assert_eq!(e1.len(), self.dim);
        let mut sig = 0u64;
        for h in 0..self.n_planes {
            let plane = &self.planes[h * self.dim..(h + 1) * self.dim];
            if math::dot_f32(plane, e1) > 0.0 {
                sig |= 1 << h;
            }
        }
        sig
    }

    pub fn shard_of(&self, e1: &[f32]) -> u32 {
        (splitmix64(self.signature(e1)) % self.n_nodes as u64) as u32
    }

    /// Assign one document, recording the primary shard.
    pub fn assign(&mut self, doc_id: u64, e1: &[f32]) -> u32 {
        let shard = self.shard_of(e1);
        self.assignment.insert(doc_id, shard);
        shard
    }

    /// Nodes holding a shard: the primary plus R-1 ring successors.
    pub fn holders(&self, shard: u32) -> Vec<u32> {
        (0..self.replication)
            .map(|r| (shard + r) % self.n_nodes)
            .collect()
    }

    /// Shards a node holds (as primary or replica).
    pub fn shards_on_node(&self, node: u32) -> Vec<u32> {
        (0..self.n_nodes)
            .filter(|&s| self.holders(s).contains(&node))
            .collect()
    }

    pub fn shard_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.n_nodes as usize];
        for &shard in self.assignment.values() {
            sizes[shard as usize] += 1;
        }
        sizes
    }

    /// Largest over smallest shard size; infinite when a shard is empty.
    pub fn balance_ratio(&self) -> f64 {
        let sizes = self.shard_sizes();
        let max = *sizes.iter().max().unwrap_or(&0) as f64;
        let min = *sizes.iter().min().unwrap_or(&0) as f64;
        if min == 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }
}

/// Partition a corpus of level-1 embeddings. More nodes than documents is
/// legal but flagged.
pub struct PartitionReport {
    pub map: PartitionMap,
    pub balance_ratio: f64,
    pub undersized_warning: bool,
}

pub fn partition(
    corpus_e1: &BTreeMap<u64, Vec<f32>>,
    n_nodes: u32,
    replication: u32,
    seed: u64,
) -> Result<PartitionReport> {
    let dim = corpus_e1
        .values()
        .next()
        .map(|v| v.len())
        .ok_or(SpiError::EmptyInput("partition corpus"))?;
    let mut map = PartitionMap::new(n_nodes, replication, dim, seed)?;
    for (&id, v) in corpus_e1 {
        map.assign(id, v);
    }
    let balance_ratio = map.balance_ratio();
    Ok(PartitionReport {
        balance_ratio,
        undersized_warning: (n_nodes as usize) > corpus_e1.len(),
        map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn gaussian_mixture_e1(n: usize, dim: usize, clusters: usize, seed: u64) -> BTreeMap<u64, Vec<f32>> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let centers: Vec<Vec<f32>> = (0..clusters)
            .map(|_| {
                let v: Vec<f32> = (0..dim).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect();
                math::normalized_f32(&v, "t").unwrap()
            })
            .collect();
        (0..n as u64)
            .map(|id| {
                let c = &centers[id as usize % clusters];
                let v: Vec<f32> = c
                    .iter()
                    .map(|x| x + (rng.random::<f32>() - 0.5) * 0.4)
                    .collect();
                (id, math::normalized_f32(&v, "t").unwrap())
            })
            .collect()
    }

    #[test]
    fn single_node_takes_everything() {
        let corpus = gaussian_mixture_e1(200, 16, 5, 1);
        let report = partition(&corpus, 1, 1, 9).unwrap();
        assert!(report.map.assignment.values().all(|&s| s == 0));
        assert_eq!(report.balance_ratio, 1.0);
    }

    #[test]
    fn identical_vectors_land_on_one_shard() {
        let v = math::normalized_f32(&vec![0.3f32; 16], "t").unwrap();
        let corpus: BTreeMap<u64, Vec<f32>> = (0..50u64).map(|id| (id, v.clone())).collect();
        let report = partition(&corpus, 8, 2, 3).unwrap();
        let first = report.map.assignment[&0];
        assert!(report.map.assignment.values().all(|&s| s == first));
    }

    #[test]
    fn mixture_partitions_stay_balanced() {
        let corpus = gaussian_mixture_e1(10_000, 16, 50, 7);
        let report = partition(&corpus, 8, 2, 42).unwrap();
        assert!(
            report.balance_ratio <= 2.0,
            "balance ratio {}",
            report.balance_ratio
        );
        assert!(!report.undersized_warning);
    }

    #[test]
    fn reproducible_from_seed() {
        let corpus = gaussian_mixture_e1(500, 16, 5, 11);
        let a = partition(&corpus, 4, 2, 13).unwrap();
        let b = partition(&corpus, 4, 2, 13).unwrap();
        assert_eq!(a.map.assignment, b.map.assignment);
    }

    #[test]
    fn holders_follow_ring_order() {
        let map = PartitionMap::new(5, 3, 8, 1).unwrap();
        assert_eq!(map.holders(3), vec![3, 4, 0]);
        assert_eq!(map.shards_on_node(0), vec![0, 3, 4]);
        assert!(PartitionMap::new(4, 5, 8, 1).is_err(), "R > N rejected");
    }

    #[test]
    fn more_nodes_than_docs_warns() {
        let corpus = gaussian_mixture_e1(3, 16, 2, 5);
        let report = partition(&corpus, 8, 1, 1).unwrap();
        assert!(report.undersized_warning);
    }
}
