//! Multi-resolution embedding pyramid.
//!
//! Every document carries a stack of L unit vectors of strictly increasing
//! dimension. Level 1 is a fixed linear reduction of the source embedding
//! (PCA-initialized); each deeper level is an affine refinement of the
//! previous one plus a learned skip alignment of level 1; the finest level
//! blends the raw source back in so it stays faithful to the input.

pub mod consistency;
pub mod train;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, SpiError};
use crate::math::{self, Mat};

/// Validated list of per-level dimensions, strictly increasing; the last
/// entry equals the source embedding dimension.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PyramidDims(Vec<usize>);

impl PyramidDims {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() {
            return Err(SpiError::EmptyInput("pyramid dims"));
        }
        for w in dims.windows(2) {
            if w[0] >= w[1] {
                return Err(SpiError::InvalidConfig(format!(
                    "pyramid dims must strictly increase, got {:?}",
                    dims
                )));
            }
        }
        if dims[0] == 0 {
            return Err(SpiError::InvalidConfig("level dimension 0".into()));
        }
        Ok(PyramidDims(dims))
    }

    /// Number of levels L.
    pub fn levels(&self) -> usize {
        self.0.len()
    }

    /// Dimension of a 1-based level.
    pub fn dim(&self, level: usize) -> usize {
        self.0[level - 1]
    }

    pub fn source_dim(&self) -> usize {
        *self.0.last().unwrap()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

/// Per-document stack of level embeddings (level 1 first), all unit norm.
#[derive(Debug, Clone)]
pub struct PyramidEmbedding {
    pub doc_id: u64,
    pub levels: Vec<Vec<f32>>,
}

impl PyramidEmbedding {
    pub fn level(&self, level: usize) -> &[f32] {
        &self.levels[level - 1]
    }
}

/// Refinement stage for one level >= 2: e_l = norm(refine * e_{l-1} + bias + skip * e_1).
#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub refine: Mat,
    pub bias: Vec<f64>,
    pub skip: Mat,
}

/// Loss weights for joint training. `alpha[l-1]` weights the retrieval loss
/// at level l; `beta` the cross-level consistency term; `gamma` the
/// parameter-norm regularizer.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub alpha: Vec<f64>,
    pub beta: f64,
    pub gamma: f64,
}

impl LossWeights {
    pub fn validate(&self, levels: usize) -> Result<()> {
        if self.alpha.len() != levels {
            return Err(SpiError::InvalidConfig(format!(
                "alpha has {} entries for {} levels",
                self.alpha.len(),
                levels
            )));
        }
        if self.alpha.iter().any(|a| *a < 0.0) || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(SpiError::InvalidConfig(
                "loss weights must be nonnegative".into(),
            ));
        }
        if self.alpha.iter().sum::<f64>() <= 0.0 {
            return Err(SpiError::InvalidConfig(
                "at least one alpha must be positive".into(),
            ));
        }
        Ok(())
    }

    /// alpha = 1/L per level, beta = 1, gamma = 1e-4.
    pub fn default_for(levels: usize) -> Self {
        LossWeights {
            alpha: vec![1.0 / levels as f64; levels],
            beta: 1.0,
            gamma: 1e-4,
        }
    }
}

/// Progressive multi-resolution encoder.
///
/// The base reducer (level 1) is fixed after construction; the refinement
/// stages, skip maps and cross-level projections are trained jointly.
/// `source_blend` is the weight of the raw source at the finest level:
/// 1.0 makes level L exactly the (normalized) source embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ProgressiveEncoder {
    pub dims: PyramidDims,
    /// Fixed reducer R1 (D1 x DL). Not trained.
    pub base_reducer: Mat,
    /// Stages for levels 2..=L, in level order.
    pub stages: Vec<Stage>,
    /// proj[l-1] maps level l+1 down to level l (Dl x D_{l+1}), for l in 1..L.
    pub projections: Vec<Mat>,
    /// Blend weight of the raw source at level L.
    pub source_blend: f64,
    pub weights: LossWeights,
    /// InfoNCE temperature.
    pub temperature: f64,
}

impl ProgressiveEncoder {
    /// Encoder with PCA-initialized base reducer, identity-padded skip maps,
    /// small random refinements and truncation-initialized projections.
    ///
    /// Falls back to a seeded Gaussian random projection when the sample is
    /// smaller than 10 x D1.
    pub fn init(
        dims: PyramidDims,
        corpus_sample: &[Vec<f32>],
        source_blend: f64,
        seed: u64,
    ) -> Result<Self> {
        let d1 = dims.dim(1);
        let dl = dims.source_dim();
        for v in corpus_sample {
            if v.len() != dl {
                return Err(SpiError::DimensionMismatch {
                    context: "encoder init sample",
                    expected: dl,
                    got: v.len(),
                });
            }
        }
        let base_reducer = if corpus_sample.len() >= 10 * d1 {
            let sample_f64: Vec<Vec<f64>> = corpus_sample.iter().map(|v| math::to_f64(v)).collect();
            math::pca_projection(&sample_f64, d1)?
        } else {
            let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5049_4243);
            let scale = 1.0 / (dl as f64).sqrt();
            Mat::from_fn(d1, dl, |_, _| {
                let g: f64 = StandardNormal.sample(&mut rng);
                g * scale
            })
        };
        Ok(Self::with_base_reducer(dims, base_reducer, source_blend, seed))
    }

    pub fn with_base_reducer(
        dims: PyramidDims,
        base_reducer: Mat,
        source_blend: f64,
        seed: u64,
    ) -> Self {
        let levels = dims.levels();
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5049_5354);
        let mut stages = Vec::new();
        for l in 2..=levels {
            let rows = dims.dim(l);
            let cols = dims.dim(l - 1);
            let scale = 0.1 / (cols as f64).sqrt();
            let refine = Mat::from_fn(rows, cols, |_, _| {
                let g: f64 = StandardNormal.sample(&mut rng);
                g * scale
            });
            stages.push(Stage {
                refine,
                bias: vec![0.0; rows],
                skip: Mat::identity_pad(rows, dims.dim(1)),
            });
        }
        let mut projections = Vec::new();
        for l in 1..levels {
            projections.push(Mat::identity_pad(dims.dim(l), dims.dim(l + 1)));
        }
        let weights = LossWeights::default_for(levels);
        ProgressiveEncoder {
            dims,
            base_reducer,
            stages,
            projections,
            source_blend,
            weights,
            temperature: 0.07,
        }
    }

    pub fn levels(&self) -> usize {
        self.dims.levels()
    }

    pub fn stage(&self, level: usize) -> &Stage {
        &self.stages[level - 2]
    }

    /// proj_l: maps level l+1 into level l space.
    pub fn projection(&self, level: usize) -> &Mat {
        &self.projections[level - 1]
    }

    /// Project a level lp vector down to level l by composing adjacent
    /// projections (lp > l).
    pub fn project_down(&self, from_level: usize, to_level: usize, v: &[f64]) -> Vec<f64> {
        debug_assert!(to_level < from_level);
        let mut cur = v.to_vec();
        for l in (to_level..from_level).rev() {
            cur = self.projection(l).matvec(&cur);
        }
        cur
    }

    fn validate_source(&self, source: &[f32]) -> Result<()> {
        if source.len() != self.dims.source_dim() {
            return Err(SpiError::DimensionMismatch {
                context: "encode source",
                expected: self.dims.source_dim(),
                got: source.len(),
            });
        }
        if !math::all_finite_f32(source) {
            return Err(SpiError::NonFinite("encode source"));
        }
        Ok(())
    }

    /// Encode in f64 up to `depth` levels without the final f32 cast.
    /// Internal building block shared by encode and the training forward
    /// pass.
    pub(crate) fn encode_f64(&self, source: &[f64], depth: usize) -> Result<Vec<Vec<f64>>> {
        let levels = self.levels();
        debug_assert!(depth >= 1 && depth <= levels);
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(depth);
        let mut e1 = self.base_reducer.matvec(source);
        if levels == 1 {
            // Degenerate single-level pyramid: level 1 is also the finest
            // level, so the source blend applies here.
            let lam = self.source_blend;
            for (r, s) in e1.iter_mut().zip(source) {
                *r = lam * s + (1.0 - lam) * *r;
            }
        }
        math::normalize_f64(&mut e1, "level-1 embedding")?;
        out.push(e1);
        for l in 2..=depth {
            let stage = self.stage(l);
            let mut raw = stage.refine.matvec(&out[l - 2]);
            for (r, b) in raw.iter_mut().zip(&stage.bias) {
                *r += b;
            }
            let skip = stage.skip.matvec(&out[0]);
            for (r, s) in raw.iter_mut().zip(&skip) {
                *r += s;
            }
            if l == levels {
                let lam = self.source_blend;
                for (r, s) in raw.iter_mut().zip(source) {
                    *r = lam * s + (1.0 - lam) * *r;
                }
            }
            math::normalize_f64(&mut raw, "refined level embedding")?;
            out.push(raw);
        }
        Ok(out)
    }

    /// Encode a source vector into level embeddings 1..=depth (f32, unit norm).
    pub fn encode_to_depth(&self, source: &[f32], depth: usize) -> Result<Vec<Vec<f32>>> {
        self.validate_source(source)?;
        let levels = self.encode_f64(&math::to_f64(source), depth)?;
        Ok(levels.iter().map(|v| math::to_f32(v)).collect())
    }

    /// Encode all L levels.
    pub fn encode(&self, source: &[f32]) -> Result<Vec<Vec<f32>>> {
        self.encode_to_depth(source, self.levels())
    }
}

/// Build the full pyramid embedding of one document. Pure and deterministic:
/// identical (source, encoder) inputs produce bit-identical outputs.
pub fn build_pyramid(
    doc_id: u64,
    source: &[f32],
    encoder: &ProgressiveEncoder,
) -> Result<PyramidEmbedding> {
    Ok(PyramidEmbedding {
        doc_id,
        levels: encoder.encode(source)?,
    })
}

/// Helper used by tests and the gradient checker: a tiny deterministic
/// encoder over random matrices (no PCA fit).
pub fn random_encoder(dims: PyramidDims, source_blend: f64, seed: u64) -> ProgressiveEncoder {
    let d1 = dims.dim(1);
    let dl = dims.source_dim();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let base = Mat::from_fn(d1, dl, |_, _| rng.random::<f64>() * 2.0 - 1.0);
    let mut enc = ProgressiveEncoder::with_base_reducer(dims, base, source_blend, seed);
    for stage in &mut enc.stages {
        for v in &mut stage.refine.data {
            *v = rng.random::<f64>() * 0.6 - 0.3;
        }
        for v in &mut stage.bias {
            *v = rng.random::<f64>() * 0.1 - 0.05;
        }
        for v in &mut stage.skip.data {
            *v = rng.random::<f64>() * 0.6 - 0.3;
        }
    }
    for proj in &mut enc.projections {
        for v in &mut proj.data {
            *v = rng.random::<f64>() * 0.6 - 0.3;
        }
    }
    enc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{dot_f32, norm_f32};

    fn dims_16_32_64() -> PyramidDims {
        PyramidDims::new(vec![16, 32, 64]).unwrap()
    }

    #[test]
    fn dims_must_increase() {
        assert!(PyramidDims::new(vec![16, 16, 64]).is_err());
        assert!(PyramidDims::new(vec![32, 16]).is_err());
        assert!(PyramidDims::new(vec![]).is_err());
    }

    #[test]
    fn zero_refine_identity_skip_propagates_level_one() {
        // With refine = 0, skip = identity-pad and no source blend, every
        // level >= 2 is the identity-padded level-1 vector (cosine 1.0).
        let dims = dims_16_32_64();
        let mut enc = random_encoder(dims, 0.0, 7);
        for stage in &mut enc.stages {
            stage.refine.scale(0.0);
            for b in &mut stage.bias {
                *b = 0.0;
            }
            let rows = stage.skip.rows;
            stage.skip = Mat::identity_pad(rows, 16);
        }
        let source: Vec<f32> = (0..64).map(|i| ((i * 37 + 11) % 17) as f32 / 17.0 - 0.4).collect();
        let pyr = build_pyramid(0, &source, &enc).unwrap();
        let e1 = pyr.level(1);
        let e2 = pyr.level(2);
        let mut padded = vec![0.0f32; 32];
        padded[..16].copy_from_slice(e1);
        let cos = dot_f32(e2, &padded) / (norm_f32(e2) * norm_f32(&padded));
        assert!((cos - 1.0).abs() < 1e-6, "cos = {cos}");
    }

    #[test]
    fn truncating_reducer_keeps_basis_vectors() {
        let dims = dims_16_32_64();
        let base = Mat::identity_pad(16, 64);
        let enc = ProgressiveEncoder::with_base_reducer(dims, base, 0.5, 3);
        let mut source = vec![0.0f32; 64];
        source[4] = 1.0;
        let pyr = build_pyramid(0, &source, &enc).unwrap();
        let e1 = pyr.level(1);
        assert!((e1[4] - 1.0).abs() < 1e-6);
        assert!(e1.iter().enumerate().all(|(i, v)| i == 4 || v.abs() < 1e-6));
    }

    #[test]
    fn build_is_deterministic_and_unit_norm() {
        let dims = dims_16_32_64();
        let enc = random_encoder(dims, 0.5, 42);
        let source: Vec<f32> = (0..64).map(|i| (i as f32 * 0.37).sin()).collect();
        let a = build_pyramid(9, &source, &enc).unwrap();
        let b = build_pyramid(9, &source, &enc).unwrap();
        for (la, lb) in a.levels.iter().zip(&b.levels) {
            assert_eq!(la, lb, "bit-identical rebuild");
            let n = norm_f32(la);
            assert!((n - 1.0).abs() < 1e-6, "unit norm, got {n}");
        }
    }

    #[test]
    fn full_blend_recovers_source_at_finest_level() {
        let dims = dims_16_32_64();
        let enc = random_encoder(dims, 1.0, 5);
        let source: Vec<f32> = (0..64).map(|i| (i as f32 * 0.11).cos()).collect();
        let n = norm_f32(&source);
        let unit: Vec<f32> = source.iter().map(|x| x / n).collect();
        let pyr = build_pyramid(0, &source, &enc).unwrap();
        for (a, b) in pyr.level(3).iter().zip(&unit) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn dimension_and_finiteness_errors() {
        let dims = dims_16_32_64();
        let enc = random_encoder(dims, 0.5, 1);
        let short = vec![0.5f32; 32];
        match build_pyramid(0, &short, &enc) {
            Err(SpiError::DimensionMismatch { expected, got, .. }) => {
                assert_eq!((expected, got), (64, 32));
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
        let mut bad = vec![0.5f32; 64];
        bad[10] = f32::NAN;
        assert!(matches!(
            build_pyramid(0, &bad, &enc),
            Err(SpiError::NonFinite(_))
        ));
    }
}
