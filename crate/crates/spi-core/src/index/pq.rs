//! Product quantization codec.
//!
//! Vectors are split into M contiguous subspaces; each subspace is encoded
//! as the index of its nearest codebook centroid. Asymmetric scoring keeps
//! the query at full precision and looks decoded-vector dot products up per
//! subspace, which equals the cosine against the decoded vector exactly.

use crate::error::{Result, SpiError};
use crate::index::kmeans::kmeans;

/// Trained product quantizer. Construction *is* training, so encoding with
/// an untrained codebook is unrepresentable.
#[derive(Debug, Clone, PartialEq)]
pub struct PqCodebook {
    pub subspaces: usize,
    pub bits: u8,
    pub sub_dim: usize,
    /// Per subspace: row-major (2^bits) x sub_dim centroid matrix.
    pub centroids: Vec<Vec<f32>>,
}

impl PqCodebook {
    /// Train per-subspace codebooks over row-major training vectors.
    pub fn train(
        vectors: &[f32],
        n: usize,
        dim: usize,
        subspaces: usize,
        bits: u8,
        seed: u64,
    ) -> Result<Self> {
        if subspaces == 0 || dim % subspaces != 0 {
            return Err(SpiError::InvalidConfig(format!(
                "pq subspaces {subspaces} must divide dimension {dim}"
            )));
        }
        if bits == 0 || bits > 8 {
            return Err(SpiError::InvalidConfig(format!(
                "pq bits {bits} outside 1..=8"
            )));
        }
        let k = 1usize << bits;
        if n < k {
            return Err(SpiError::TooFewVectors {
                context: "pq codebook training",
                required: k,
                got: n,
            });
        }
        let sub_dim = dim / subspaces;
        let mut centroids = Vec::with_capacity(subspaces);
        let mut sub_buf = vec![0.0f32; n * sub_dim];
        for m in 0..subspaces {
            for i in 0..n {
                let src = &vectors[i * dim + m * sub_dim..i * dim + (m + 1) * sub_dim];
                sub_buf[i * sub_dim..(i + 1) * sub_dim].copy_from_slice(src);
            }
            let res = kmeans(&sub_buf, n, sub_dim, k, seed.wrapping_add(m as u64))?;
            centroids.push(res.centroids);
        }
        Ok(PqCodebook {
            subspaces,
            bits,
            sub_dim,
            centroids,
        })
    }

    pub fn dim(&self) -> usize {
        self.subspaces * self.sub_dim
    }

    pub fn n_centroids(&self) -> usize {
        1usize << self.bits
    }

    fn check_dim(&self, len: usize, context: &'static str) -> Result<()> {
        if len != self.dim() {
            return Err(SpiError::DimensionMismatch {
                context,
                expected: self.dim(),
                got: len,
            });
        }
        Ok(())
    }

    /// Nearest centroid per subspace; ties pick the lowest centroid index.
    pub fn encode(&self, vector: &[f32]) -> Result<Vec<u8>> {
        self.check_dim(vector.len(), "pq encode")?;
        let mut code = Vec::with_capacity(self.subspaces);
        for m in 0..self.subspaces {
            let sub = &vector[m * self.sub_dim..(m + 1) * self.sub_dim];
            let cents = &self.centroids[m];
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for c in 0..self.n_centroids() {
                let cent = &cents[c * self.sub_dim..(c + 1) * self.sub_dim];
                let mut d = 0.0f64;
                for i in 0..self.sub_dim {
                    let diff = sub[i] as f64 - cent[i] as f64;
                    d += diff * diff;
                }
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            code.push(best as u8);
        }
        Ok(code)
    }

    pub fn decode(&self, code: &[u8]) -> Result<Vec<f32>> {
        if code.len() != self.subspaces {
            return Err(SpiError::DimensionMismatch {
                context: "pq decode",
                expected: self.subspaces,
                got: code.len(),
            });
        }
        let mut out = Vec::with_capacity(self.dim());
        for (m, &c) in code.iter().enumerate() {
            let cent =
                &self.centroids[m][c as usize * self.sub_dim..(c as usize + 1) * self.sub_dim];
            out.extend_from_slice(cent);
        }
        Ok(out)
    }

    /// Per-query lookup tables: partial dot products against every centroid
    /// of every subspace, plus per-centroid squared norms for the decoded
    /// vector's norm.
    pub fn lookup_tables(&self, query: &[f32]) -> Result<PqLookup> {
        self.check_dim(query.len(), "pq lookup")?;
        let k = self.n_centroids();
        let mut dots = vec![0.0f32; self.subspaces * k];
        let mut norms_sq = vec![0.0f32; self.subspaces * k];
        for m in 0..self.subspaces {
            let qsub = &query[m * self.sub_dim..(m + 1) * self.sub_dim];
            let cents = &self.centroids[m];
            for c in 0..k {
                let cent = &cents[c * self.sub_dim..(c + 1) * self.sub_dim];
                let mut dot = 0.0f32;
                let mut nsq = 0.0f32;
                for i in 0..self.sub_dim {
                    dot += qsub[i] * cent[i];
                    nsq += cent[i] * cent[i];
                }
                dots[m * k + c] = dot;
                norms_sq[m * k + c] = nsq;
            }
        }
        let qn = crate::math::norm_f32(query);
        Ok(PqLookup {
            k,
            dots,
            norms_sq,
            query_norm: qn,
        })
    }

    /// Cosine between a full-precision query and the decoded vector of
    /// `code`, via the lookup tables.
    pub fn asym_score(&self, query: &[f32], code: &[u8]) -> Result<f32> {
        let lut = self.lookup_tables(query)?;
        Ok(lut.score(code))
    }
}

/// Precomputed per-query tables for scoring many codes.
pub struct PqLookup {
    k: usize,
    dots: Vec<f32>,
    norms_sq: Vec<f32>,
    query_norm: f32,
}

impl PqLookup {
    #[inline]
    pub fn score(&self, code: &[u8]) -> f32 {
        let mut dot = 0.0f32;
        let mut nsq = 0.0f32;
        for (m, &c) in code.iter().enumerate() {
            dot += self.dots[m * self.k + c as usize];
            nsq += self.norms_sq[m * self.k + c as usize];
        }
        let denom = self.query_norm * nsq.sqrt();
        if denom <= 0.0 {
            0.0
        } else {
            dot / denom
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{dot_f32, norm_f32};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn clustered_vectors(n: usize, dim: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let n_centers = 8;
        let centers: Vec<f32> = (0..n_centers * dim)
            .map(|_| rng.random::<f32>() * 2.0 - 1.0)
            .collect();
        let mut out = Vec::with_capacity(n * dim);
        for i in 0..n {
            let c = i % n_centers;
            for d in 0..dim {
                out.push(centers[c * dim + d] + (rng.random::<f32>() - 0.5) * 0.1);
            }
        }
        out
    }

    #[test]
    fn centroid_concatenation_roundtrips_exactly() {
        let data = clustered_vectors(600, 16, 5);
        let cb = PqCodebook::train(&data, 600, 16, 4, 4, 9).unwrap();
        // A vector assembled from centroids decodes back to itself.
        let mut v = Vec::new();
        for m in 0..4 {
            let c = (m * 3) % cb.n_centroids();
            v.extend_from_slice(&cb.centroids[m][c * 4..(c + 1) * 4]);
        }
        let code = cb.encode(&v).unwrap();
        let decoded = cb.decode(&code).unwrap();
        assert_eq!(v, decoded);
    }

    #[test]
    fn asym_score_equals_cosine_of_decoded() {
        let data = clustered_vectors(600, 16, 6);
        let cb = PqCodebook::train(&data, 600, 16, 4, 5, 10).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        for _ in 0..50 {
            let q: Vec<f32> = (0..16).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect();
            let v: Vec<f32> = (0..16).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect();
            let code = cb.encode(&v).unwrap();
            let dec = cb.decode(&code).unwrap();
            let expect = dot_f32(&q, &dec) / (norm_f32(&q) * norm_f32(&dec));
            let got = cb.asym_score(&q, &code).unwrap();
            assert!((expect - got).abs() < 1e-6, "{expect} vs {got}");
        }
    }

    /// Reconstruction with a trained codebook beats a random codebook.
    #[test]
    fn trained_beats_random_codebook() {
        let n = 1000;
        let dim = 16;
        let data = clustered_vectors(n, dim, 8);
        let trained = PqCodebook::train(&data, n, dim, 4, 6, 11).unwrap();
        let mut random = trained.clone();
        let mut rng = ChaCha20Rng::seed_from_u64(1234);
        for cents in &mut random.centroids {
            for v in cents.iter_mut() {
                *v = rng.random::<f32>() * 2.0 - 1.0;
            }
        }
        let err = |cb: &PqCodebook| -> f64 {
            let mut acc = 0.0;
            for i in 0..n {
                let v = &data[i * dim..(i + 1) * dim];
                let dec = cb.decode(&cb.encode(v).unwrap()).unwrap();
                for (a, b) in v.iter().zip(&dec) {
                    acc += (*a as f64 - *b as f64).powi(2);
                }
            }
            acc / n as f64
        };
        let e_trained = err(&trained);
        let e_random = err(&random);
        assert!(
            e_trained < e_random,
            "trained {e_trained} should beat random {e_random}"
        );
    }

    #[test]
    fn validates_parameters() {
        let data = clustered_vectors(100, 16, 1);
        assert!(PqCodebook::train(&data, 100, 16, 5, 8, 0).is_err()); // 5 does not divide 16
        assert!(PqCodebook::train(&data, 100, 16, 4, 9, 0).is_err()); // bits > 8
        assert!(PqCodebook::train(&data, 100, 16, 4, 8, 0).is_err()); // 100 < 256 centroids
    }
}
