//! Binary file formats.
//!
//! All integers are little-endian, all floats 32-bit on disk, and every
//! file carries a CRC32 trailer over the preceding bytes:
//!
//! - `SPIE` progressive-encoder checkpoints
//! - `SPIX` per-level index snapshots
//! - `SPIC` depth-controller checkpoints
//! - `SPIM` embedding matrices (float32 or int8-scaled rows)
//!
//! PQ codes are bit-packed on disk (ceil(M * bits / 8) bytes per entry).

use std::collections::BTreeMap;

use crate::controller::{BudgetSchedule, ControllerModeView, DepthController};
use crate::error::{Result, SpiError};
use crate::index::pq::PqCodebook;
use crate::index::{Backend, Entry, IndexSpec, LevelIndex, Payload, Storage};
use crate::math::Mat;
use crate::pyramid::{LossWeights, ProgressiveEncoder, PyramidDims, Stage};

pub const MAGIC_ENCODER: &[u8; 4] = b"SPIE";
pub const MAGIC_INDEX: &[u8; 4] = b"SPIX";
pub const MAGIC_CONTROLLER: &[u8; 4] = b"SPIC";
pub const MAGIC_MATRIX: &[u8; 4] = b"SPIM";

const FORMAT_VERSION: u16 = 1;

// ---------------------------------------------------------------------------
// Byte-level helpers
// ---------------------------------------------------------------------------

#[derive(Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn with_magic(magic: &[u8; 4]) -> Self {
        let mut w = ByteWriter { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w.u16(FORMAT_VERSION);
        w
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f32s(&mut self, vs: &[f32]) {
        for v in vs {
            self.f32(*v);
        }
    }
    pub fn f32s_from_f64(&mut self, vs: &[f64]) {
        for v in vs {
            self.f32(*v as f32);
        }
    }
    pub fn bytes(&mut self, vs: &[u8]) {
        self.buf.extend_from_slice(vs);
    }

    /// Append the CRC32 trailer and return the finished buffer.
    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.buf.extend_from_slice(&crc.to_le_bytes());
        self.buf
    }
}

pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    /// Verify the CRC trailer and the magic, position after the version.
    pub fn open(data: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        if data.len() < 10 {
            return Err(SpiError::Format("file too short".into()));
        }
        let (body, trailer) = data.split_at(data.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(SpiError::CrcMismatch { stored, computed });
        }
        if &body[..4] != magic {
            return Err(SpiError::Format(format!(
                "bad magic {:?}, expected {:?}",
                &body[..4],
                magic
            )));
        }
        let mut r = ByteReader { buf: body, pos: 4 };
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(SpiError::Format(format!("unsupported version {version}")));
        }
        Ok(r)
    }

    fn need(&self, n: usize) -> Result<()> {
        if self.pos + n > self.buf.len() {
            return Err(SpiError::Format("truncated file".into()));
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        self.need(1)?;
        let v = self.buf[self.pos];
        self.pos += 1;
        Ok(v)
    }
    pub fn u16(&mut self) -> Result<u16> {
        self.need(2)?;
        let v = u16::from_le_bytes(self.buf[self.pos..self.pos + 2].try_into().unwrap());
        self.pos += 2;
        Ok(v)
    }
    pub fn u32(&mut self) -> Result<u32> {
        self.need(4)?;
        let v = u32::from_le_bytes(self.buf[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        Ok(v)
    }
    pub fn u64(&mut self) -> Result<u64> {
        self.need(8)?;
        let v = u64::from_le_bytes(self.buf[self.pos..self.pos + 8].try_into().unwrap());
        self.pos += 8;
        Ok(v)
    }
    pub fn f32(&mut self) -> Result<f32> {
        self.need(4)?;
        let v = f32::from_le_bytes(self.buf[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        Ok(v)
    }
    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f32()?);
        }
        Ok(out)
    }
    pub fn f64s_from_f32(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self.f32s(n)?.into_iter().map(|v| v as f64).collect())
    }
    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.need(n)?;
        let v = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(v)
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(SpiError::Format(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn write_mat(w: &mut ByteWriter, m: &Mat) {
    w.f32s_from_f64(&m.data);
}

fn read_mat(r: &mut ByteReader, rows: usize, cols: usize) -> Result<Mat> {
    let data = r.f64s_from_f32(rows * cols)?;
    Ok(Mat { rows, cols, data })
}

// ---------------------------------------------------------------------------
// SPIE: encoder checkpoint
// ---------------------------------------------------------------------------

pub fn encoder_to_bytes(enc: &ProgressiveEncoder) -> Vec<u8> {
    let mut w = ByteWriter::with_magic(MAGIC_ENCODER);
    let levels = enc.levels();
    w.u16(levels as u16);
    for l in 1..=levels {
        w.u32(enc.dims.dim(l) as u32);
    }
    w.f32(enc.source_blend as f32);
    w.f32(enc.temperature as f32);
    w.f32s_from_f64(&enc.weights.alpha);
    w.f32(enc.weights.beta as f32);
    w.f32(enc.weights.gamma as f32);
    write_mat(&mut w, &enc.base_reducer);
    for stage in &enc.stages {
        write_mat(&mut w, &stage.refine);
        w.f32s_from_f64(&stage.bias);
        write_mat(&mut w, &stage.skip);
    }
    for proj in &enc.projections {
        write_mat(&mut w, proj);
    }
    w.finish()
}

pub fn encoder_from_bytes(data: &[u8]) -> Result<ProgressiveEncoder> {
    let mut r = ByteReader::open(data, MAGIC_ENCODER)?;
    let levels = r.u16()? as usize;
    if levels == 0 {
        return Err(SpiError::Format("encoder with zero levels".into()));
    }
    let mut dims = Vec::with_capacity(levels);
    for _ in 0..levels {
        dims.push(r.u32()? as usize);
    }
    let dims = PyramidDims::new(dims)?;
    let source_blend = r.f32()? as f64;
    let temperature = r.f32()? as f64;
    let alpha = r.f64s_from_f32(levels)?;
    let beta = r.f32()? as f64;
    let gamma = r.f32()? as f64;
    let base_reducer = read_mat(&mut r, dims.dim(1), dims.source_dim())?;
    let mut stages = Vec::with_capacity(levels.saturating_sub(1));
    for l in 2..=levels {
        let refine = read_mat(&mut r, dims.dim(l), dims.dim(l - 1))?;
        let bias = r.f64s_from_f32(dims.dim(l))?;
        let skip = read_mat(&mut r, dims.dim(l), dims.dim(1))?;
        stages.push(Stage { refine, bias, skip });
    }
    let mut projections = Vec::with_capacity(levels.saturating_sub(1));
    for l in 1..levels {
        projections.push(read_mat(&mut r, dims.dim(l), dims.dim(l + 1))?);
    }
    r.expect_end()?;
    Ok(ProgressiveEncoder {
        dims,
        base_reducer,
        stages,
        projections,
        source_blend,
        weights: LossWeights { alpha, beta, gamma },
        temperature,
    })
}

// ---------------------------------------------------------------------------
// SPIX: level index snapshot
// ---------------------------------------------------------------------------

fn packed_code_len(m: usize, bits: u8) -> usize {
    (m * bits as usize).div_ceil(8)
}

fn pack_code(code: &[u8], bits: u8) -> Vec<u8> {
    let mut out = vec![0u8; packed_code_len(code.len(), bits)];
    let mut bitpos = 0usize;
    for &c in code {
        for b in 0..bits as usize {
            if (c >> b) & 1 == 1 {
                out[bitpos / 8] |= 1 << (bitpos % 8);
            }
            bitpos += 1;
        }
    }
    out
}

fn unpack_code(packed: &[u8], m: usize, bits: u8) -> Vec<u8> {
    let mut out = vec![0u8; m];
    let mut bitpos = 0usize;
    for slot in out.iter_mut() {
        for b in 0..bits as usize {
            if (packed[bitpos / 8] >> (bitpos % 8)) & 1 == 1 {
                *slot |= 1 << b;
            }
            bitpos += 1;
        }
    }
    out
}

pub fn index_to_bytes(idx: &LevelIndex) -> Vec<u8> {
    let mut w = ByteWriter::with_magic(MAGIC_INDEX);
    w.u8(idx.level);
    w.u8(idx.spec.backend.as_u8());
    w.u32(idx.spec.n_lists as u32);
    w.u32(idx.spec.n_probe as u32);
    w.u16(idx.spec.pq_subspaces as u16);
    w.u8(idx.spec.pq_bits);
    w.u32(idx.dim as u32);
    w.u64(idx.len() as u64);
    match &idx.storage {
        Storage::Flat { ids, vecs, .. } => {
            for id in ids {
                w.u64(*id);
            }
            w.f32s(vecs);
        }
        Storage::Ivf {
            centroids,
            lists,
            codebook,
            ..
        } => {
            w.f32s(centroids);
            match codebook {
                Some(cb) => {
                    w.u8(1);
                    for sub in &cb.centroids {
                        w.f32s(sub);
                    }
                }
                None => w.u8(0),
            }
            for list in lists {
                w.u32(list.len() as u32);
                for entry in list {
                    w.u64(entry.id);
                    match &entry.payload {
                        Payload::Raw(v) => w.f32s(v),
                        Payload::Code(c) => w.bytes(&pack_code(c, idx.spec.pq_bits)),
                    }
                }
            }
        }
    }
    w.finish()
}

pub fn index_from_bytes(data: &[u8]) -> Result<LevelIndex> {
    let mut r = ByteReader::open(data, MAGIC_INDEX)?;
    let level = r.u8()?;
    let backend = Backend::from_u8(r.u8()?)?;
    let n_lists = r.u32()? as usize;
    let n_probe = r.u32()? as usize;
    let pq_subspaces = r.u16()? as usize;
    let pq_bits = r.u8()?;
    let dim = r.u32()? as usize;
    let count = r.u64()? as usize;
    let spec = IndexSpec {
        backend,
        n_lists,
        n_probe,
        pq_subspaces,
        pq_bits,
    };
    let storage = match backend {
        Backend::Flat => {
            let mut ids = Vec::with_capacity(count);
            for _ in 0..count {
                ids.push(r.u64()?);
            }
            let vecs = r.f32s(count * dim)?;
            let by_id = ids
                .iter()
                .enumerate()
                .map(|(row, &id)| (id, row))
                .collect();
            Storage::Flat { ids, vecs, by_id }
        }
        Backend::Ivf | Backend::IvfPq => {
            let centroids = r.f32s(n_lists * dim)?;
            let has_cb = r.u8()? == 1;
            let codebook = if has_cb {
                let k = 1usize << pq_bits;
                let sub_dim = dim / pq_subspaces;
                let mut subs = Vec::with_capacity(pq_subspaces);
                for _ in 0..pq_subspaces {
                    subs.push(r.f32s(k * sub_dim)?);
                }
                Some(PqCodebook {
                    subspaces: pq_subspaces,
                    bits: pq_bits,
                    sub_dim,
                    centroids: subs,
                })
            } else {
                None
            };
            let mut lists = Vec::with_capacity(n_lists);
            let mut by_id = BTreeMap::new();
            let code_len = packed_code_len(pq_subspaces, pq_bits);
            for li in 0..n_lists {
                let len = r.u32()? as usize;
                let mut list = Vec::with_capacity(len);
                for pos in 0..len {
                    let id = r.u64()?;
                    let payload = if codebook.is_some() {
                        let packed = r.bytes(code_len)?;
                        Payload::Code(unpack_code(packed, pq_subspaces, pq_bits))
                    } else {
                        Payload::Raw(r.f32s(dim)?)
                    };
                    by_id.insert(id, (li as u32, pos as u32));
                    list.push(Entry { id, payload });
                }
                lists.push(list);
            }
            if by_id.len() != count {
                return Err(SpiError::Format(format!(
                    "count {count} does not match {} list entries",
                    by_id.len()
                )));
            }
            Storage::Ivf {
                centroids,
                lists,
                by_id,
                codebook,
            }
        }
    };
    r.expect_end()?;
    Ok(LevelIndex {
        level,
        dim,
        spec,
        storage,
    })
}

// ---------------------------------------------------------------------------
// SPIC: controller checkpoint
// ---------------------------------------------------------------------------

pub fn controller_to_bytes(ctl: &DepthController) -> Vec<u8> {
    let mut w = ByteWriter::with_magic(MAGIC_CONTROLLER);
    w.u8(ctl.max_level);
    w.f32(ctl.theta as f32);
    w.u32(ctl.schedule.coarse_factor as u32);
    w.u32(ctl.schedule.shrink as u32);
    match ctl.mode_view() {
        ControllerModeView::FixedDepth => {
            w.u8(0);
        }
        ControllerModeView::Constant(level) => {
            w.u8(1);
            w.u8(level);
        }
        ControllerModeView::Trained {
            weights,
            classes,
            feat_mean,
            feat_std,
        } => {
            w.u8(2);
            w.u16(classes.len() as u16);
            w.bytes(classes);
            w.u32(feat_mean.len() as u32);
            w.f32s_from_f64(feat_mean);
            w.f32s_from_f64(feat_std);
            write_mat(&mut w, weights);
        }
    }
    w.finish()
}

pub fn controller_from_bytes(data: &[u8]) -> Result<DepthController> {
    let mut r = ByteReader::open(data, MAGIC_CONTROLLER)?;
    let max_level = r.u8()?;
    let theta = r.f32()? as f64;
    let schedule = BudgetSchedule {
        coarse_factor: r.u32()? as usize,
        shrink: r.u32()? as usize,
    };
    let mode = r.u8()?;
    let ctl = match mode {
        0 => DepthController::from_parts(max_level, theta, schedule, 0, 0, None)?,
        1 => {
            let level = r.u8()?;
            DepthController::from_parts(max_level, theta, schedule, 1, level, None)?
        }
        2 => {
            let n_classes = r.u16()? as usize;
            let classes = r.bytes(n_classes)?.to_vec();
            let feat_dim = r.u32()? as usize;
            let feat_mean = r.f64s_from_f32(feat_dim)?;
            let feat_std = r.f64s_from_f32(feat_dim)?;
            let weights = read_mat(&mut r, n_classes, feat_dim + 1)?;
            DepthController::from_parts(
                max_level,
                theta,
                schedule,
                2,
                0,
                Some((weights, classes, feat_mean, feat_std)),
            )?
        }
        other => return Err(SpiError::Format(format!("bad controller mode {other}"))),
    };
    r.expect_end()?;
    Ok(ctl)
}

// ---------------------------------------------------------------------------
// SPIM: embedding matrix files
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum StorageMode {
    Float32,
    Int8Scaled,
}

impl StorageMode {
    fn as_u8(self) -> u8 {
        match self {
            StorageMode::Float32 => 0,
            StorageMode::Int8Scaled => 1,
        }
    }

    fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(StorageMode::Float32),
            1 => Ok(StorageMode::Int8Scaled),
            other => Err(SpiError::Format(format!("unknown storage mode {other}"))),
        }
    }
}

/// Quantize one row: scale = max |x|, codes = round(127 x / scale).
/// Dequantization error per component is at most scale / 254.
pub fn int8_quantize(row: &[f32]) -> (f32, Vec<i8>) {
    let scale = row.iter().fold(0.0f32, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return (0.0, vec![0i8; row.len()]);
    }
    let codes = row
        .iter()
        .map(|x| ((x / scale) * 127.0).round().clamp(-127.0, 127.0) as i8)
        .collect();
    (scale, codes)
}

pub fn int8_dequantize(scale: f32, codes: &[i8]) -> Vec<f32> {
    codes
        .iter()
        .map(|c| *c as f32 * scale / 127.0)
        .collect()
}

pub fn matrix_to_bytes(ids: &[u64], rows: &[Vec<f32>], mode: StorageMode) -> Result<Vec<u8>> {
    if ids.len() != rows.len() {
        return Err(SpiError::InvalidConfig(
            "ids and rows differ in length".into(),
        ));
    }
    let dim = rows.first().map(|r| r.len()).unwrap_or(0);
    let mut w = ByteWriter::with_magic(MAGIC_MATRIX);
    w.u8(mode.as_u8());
    w.u64(ids.len() as u64);
    w.u32(dim as u32);
    for id in ids {
        w.u64(*id);
    }
    for row in rows {
        if row.len() != dim {
            return Err(SpiError::DimensionMismatch {
                context: "matrix row",
                expected: dim,
                got: row.len(),
            });
        }
        match mode {
            StorageMode::Float32 => w.f32s(row),
            StorageMode::Int8Scaled => {
                let (scale, codes) = int8_quantize(row);
                w.f32(scale);
                w.bytes(&codes.iter().map(|c| *c as u8).collect::<Vec<u8>>());
            }
        }
    }
    Ok(w.finish())
}

pub fn matrix_from_bytes(data: &[u8]) -> Result<(Vec<u64>, Vec<Vec<f32>>, StorageMode)> {
    let mut r = ByteReader::open(data, MAGIC_MATRIX)?;
    let mode = StorageMode::from_u8(r.u8()?)?;
    let count = r.u64()? as usize;
    let dim = r.u32()? as usize;
    let mut ids = Vec::with_capacity(count);
    for _ in 0..count {
        ids.push(r.u64()?);
    }
    let mut rows = Vec::with_capacity(count);
    for i in 0..count {
        let row = match mode {
            StorageMode::Float32 => r.f32s(dim)?,
            StorageMode::Int8Scaled => {
                let scale = r.f32()?;
                let codes: Vec<i8> = r.bytes(dim)?.iter().map(|b| *b as i8).collect();
                int8_dequantize(scale, &codes)
            }
        };
        if !crate::math::all_finite_f32(&row) {
            return Err(SpiError::Format(format!("non-finite values in row {i}")));
        }
        rows.push(row);
    }
    r.expect_end()?;
    Ok((ids, rows, mode))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::{
        train_controller, ControllerTrainConfig, LabeledQuery, LabeledSet,
    };
    use crate::pyramid::random_encoder;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn sample_index(spec: IndexSpec, seed: u64) -> LevelIndex {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let vectors: BTreeMap<u64, Vec<f32>> = (0..300u64)
            .map(|id| {
                let v: Vec<f32> = (0..16).map(|_| rng.random::<f32>() - 0.5).collect();
                (id, crate::math::normalized_f32(&v, "t").unwrap())
            })
            .collect();
        LevelIndex::build(&vectors, 2, spec, seed).unwrap()
    }

    #[test]
    fn encoder_roundtrip_is_byte_identical() {
        let dims = PyramidDims::new(vec![4, 8, 16]).unwrap();
        let enc = random_encoder(dims, 0.5, 3);
        let bytes = encoder_to_bytes(&enc);
        let loaded = encoder_from_bytes(&bytes).unwrap();
        let again = encoder_to_bytes(&loaded);
        assert_eq!(bytes, again);
        assert_eq!(loaded.dims, enc.dims);
    }

    #[test]
    fn index_roundtrips_for_every_backend() {
        for (spec, seed) in [
            (IndexSpec::flat(), 1u64),
            (IndexSpec::ivf(8, 3), 2),
            (IndexSpec::ivf_pq(8, 3, 4, 6), 3),
        ] {
            let idx = sample_index(spec, seed);
            let bytes = index_to_bytes(&idx);
            let loaded = index_from_bytes(&bytes).unwrap();
            assert_eq!(index_to_bytes(&loaded), bytes, "byte-identical reserialize");
            assert_eq!(loaded, idx, "structural equality after load");
        }
    }

    #[test]
    fn same_build_inputs_give_identical_bytes() {
        let a = sample_index(IndexSpec::ivf_pq(8, 3, 4, 8), 9);
        let b = sample_index(IndexSpec::ivf_pq(8, 3, 4, 8), 9);
        assert_eq!(index_to_bytes(&a), index_to_bytes(&b));
    }

    /// Serialized IVF_PQ payload stays within the PQ memory budget:
    /// n * (ceil(M * bits / 8) + 8 id bytes) + exact codebook + slack.
    #[test]
    fn pq_payload_respects_memory_bound() {
        let idx = sample_index(IndexSpec::ivf_pq(8, 3, 4, 8), 5);
        let bytes = index_to_bytes(&idx);
        let n = idx.len();
        let m = 4usize;
        let codebook_bytes = m * 256 * (16 / m) * 4;
        let centroid_bytes = 8 * 16 * 4;
        let per_doc = packed_code_len(m, 8) + 8;
        let bound = n * per_doc + codebook_bytes + centroid_bytes + 1024;
        assert!(
            bytes.len() <= bound,
            "serialized {} exceeds bound {bound}",
            bytes.len()
        );
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let idx = sample_index(IndexSpec::ivf(4, 2), 7);
        let mut bytes = index_to_bytes(&idx);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        assert!(matches!(
            index_from_bytes(&bytes),
            Err(SpiError::CrcMismatch { .. })
        ));
        // Wrong magic.
        let enc_bytes = encoder_to_bytes(&random_encoder(
            PyramidDims::new(vec![2, 4]).unwrap(),
            0.5,
            1,
        ));
        assert!(index_from_bytes(&enc_bytes).is_err());
    }

    #[test]
    fn controller_roundtrips_all_modes() {
        let schedule = BudgetSchedule::default();
        let fixed = DepthController::fixed_depth(3, schedule);
        let bytes = controller_to_bytes(&fixed);
        let loaded = controller_from_bytes(&bytes).unwrap();
        assert_eq!(controller_to_bytes(&loaded), bytes);

        // Trained mode.
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut queries = Vec::new();
        for i in 0..80u64 {
            let q: Vec<f32> = (0..6).map(|_| rng.random::<f32>() - 0.5).collect();
            queries.push(LabeledQuery {
                query_id: i,
                entropy: crate::controller::query_entropy(&q).unwrap(),
                q1: q,
                label: 1 + (i % 3) as u8,
                recall_at_depth: vec![],
            });
        }
        let set = LabeledSet {
            queries,
            histogram: BTreeMap::new(),
        };
        let trained = train_controller(&set, 3, schedule, &ControllerTrainConfig::default())
            .unwrap()
            .controller;
        let bytes = controller_to_bytes(&trained);
        let loaded = controller_from_bytes(&bytes).unwrap();
        assert_eq!(controller_to_bytes(&loaded), bytes);
        assert_eq!(loaded.max_level, 3);
    }

    #[test]
    fn matrix_float_roundtrip_exact() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let ids: Vec<u64> = (0..20).collect();
        let rows: Vec<Vec<f32>> = (0..20)
            .map(|_| (0..8).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect())
            .collect();
        let bytes = matrix_to_bytes(&ids, &rows, StorageMode::Float32).unwrap();
        let (ids2, rows2, mode) = matrix_from_bytes(&bytes).unwrap();
        assert_eq!(ids, ids2);
        assert_eq!(rows, rows2);
        assert_eq!(mode, StorageMode::Float32);
    }

    /// Int8 round-trip error per component stays within scale / 254.
    #[test]
    fn int8_quantizer_error_bound() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for _ in 0..50 {
            let row: Vec<f32> = (0..32).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect();
            let (scale, codes) = int8_quantize(&row);
            let deq = int8_dequantize(scale, &codes);
            for (a, b) in row.iter().zip(&deq) {
                assert!(
                    (a - b).abs() <= scale / 254.0 + 1e-7,
                    "error {} above bound {}",
                    (a - b).abs(),
                    scale / 254.0
                );
            }
        }
    }

    #[test]
    fn pq_code_packing_roundtrip() {
        for bits in [1u8, 3, 4, 6, 8] {
            let m = 7usize;
            let mask = if bits == 8 { 0xff } else { (1u8 << bits) - 1 };
            let code: Vec<u8> = (0..m as u8).map(|i| (i * 37 + 5) & mask).collect();
            let packed = pack_code(&code, bits);
            assert_eq!(packed.len(), packed_code_len(m, bits));
            assert_eq!(unpack_code(&packed, m, bits), code);
        }
    }
}
