//! Small dense linear algebra used by the encoder and index layers.
//!
//! Training runs in f64; stored embeddings and index payloads are f32.
//! Everything here is deterministic: fixed iteration order, no threading.

use crate::error::{Result, SpiError};

/// Row-major dense f64 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Mat { rows, cols, data }
    }

    /// Identity on the top-left block, zero elsewhere (rows x cols).
    pub fn identity_pad(rows: usize, cols: usize) -> Self {
        Mat::from_fn(rows, cols, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// y = A x
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        let mut y = vec![0.0; self.rows];
        for r in 0..self.rows {
            let row = self.row(r);
            let mut acc = 0.0;
            for c in 0..self.cols {
                acc += row[c] * x[c];
            }
            y[r] = acc;
        }
        y
    }

    /// y = A^T x
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut y = vec![0.0; self.cols];
        for r in 0..self.rows {
            let row = self.row(r);
            let xr = x[r];
            for c in 0..self.cols {
                y[c] += row[c] * xr;
            }
        }
        y
    }

    /// A += scale * u v^T
    pub fn add_outer(&mut self, scale: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for r in 0..self.rows {
            let base = r * self.cols;
            let s = scale * u[r];
            for c in 0..self.cols {
                self.data[base + c] += s * v[c];
            }
        }
    }

    /// A += scale * B (shapes must match).
    pub fn add_scaled(&mut self, scale: f64, other: &Mat) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

// ---------------------------------------------------------------------------
// Vector helpers
// ---------------------------------------------------------------------------

#[inline]
pub fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f32;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

#[inline]
pub fn norm_f32(a: &[f32]) -> f32 {
    dot_f32(a, a).sqrt()
}

#[inline]
pub fn dot_f64(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

#[inline]
pub fn norm_f64(a: &[f64]) -> f64 {
    dot_f64(a, a).sqrt()
}

/// In-place L2 normalization. Errors on zero or non-finite input.
pub fn normalize_f64(v: &mut [f64], context: &'static str) -> Result<()> {
    let n = norm_f64(v);
    if !n.is_finite() {
        return Err(SpiError::NonFinite(context));
    }
    if n < 1e-12 {
        return Err(SpiError::ZeroVector(context));
    }
    for x in v.iter_mut() {
        *x /= n;
    }
    Ok(())
}

pub fn normalized_f32(v: &[f32], context: &'static str) -> Result<Vec<f32>> {
    let n = norm_f32(v) as f64;
    if !n.is_finite() {
        return Err(SpiError::NonFinite(context));
    }
    if n < 1e-12 {
        return Err(SpiError::ZeroVector(context));
    }
    Ok(v.iter().map(|x| (*x as f64 / n) as f32).collect())
}

pub fn all_finite_f32(v: &[f32]) -> bool {
    v.iter().all(|x| x.is_finite())
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|x| *x as f64).collect()
}

pub fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|x| *x as f32).collect()
}

/// Descending score, ties broken by ascending doc id. The one tie rule used
/// everywhere scores are ranked.
#[inline]
pub fn cmp_score_id(a: &(u64, f32), b: &(u64, f32)) -> std::cmp::Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then(a.0.cmp(&b.0))
}

/// Sort hits by the global tie rule and truncate to k.
pub fn top_k_by_score(mut hits: Vec<(u64, f32)>, k: usize) -> Vec<(u64, f32)> {
    hits.sort_by(cmp_score_id);
    hits.truncate(k);
    hits
}

// ---------------------------------------------------------------------------
// Symmetric eigendecomposition (cyclic Jacobi) and PCA
// ---------------------------------------------------------------------------

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvectors as columns), sorted descending.
pub fn sym_eigen(a: &Mat) -> (Vec<f64>, Mat) {
    assert_eq!(a.rows, a.cols);
    let n = a.rows;
    let mut m = a.clone();
    let mut v = Mat::identity_pad(n, n);

    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m.at(p, q) * m.at(p, q);
            }
        }
        if off < 1e-22 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.at(p, q);
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m.at(p, p);
                let aqq = m.at(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let mip = m.at(i, p);
                    let miq = m.at(i, q);
                    *m.at_mut(i, p) = c * mip - s * miq;
                    *m.at_mut(i, q) = s * mip + c * miq;
                }
                for i in 0..n {
                    let mpi = m.at(p, i);
                    let mqi = m.at(q, i);
                    *m.at_mut(p, i) = c * mpi - s * mqi;
                    *m.at_mut(q, i) = s * mpi + c * mqi;
                }
                for i in 0..n {
                    let vip = v.at(i, p);
                    let viq = v.at(i, q);
                    *v.at_mut(i, p) = c * vip - s * viq;
                    *v.at_mut(i, q) = s * vip + c * viq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let evals: Vec<f64> = (0..n).map(|i| m.at(i, i)).collect();
    order.sort_by(|&i, &j| evals[j].partial_cmp(&evals[i]).unwrap().then(i.cmp(&j)));

    let sorted_vals: Vec<f64> = order.iter().map(|&i| evals[i]).collect();
    let mut sorted_vecs = Mat::zeros(n, n);
    for (new_c, &old_c) in order.iter().enumerate() {
        // Fix sign so the largest-magnitude component is positive: makes the
        // decomposition deterministic across equivalent rotations.
        let mut best = 0.0f64;
        for r in 0..n {
            if v.at(r, old_c).abs() > best.abs() {
                best = v.at(r, old_c);
            }
        }
        let sign = if best < 0.0 { -1.0 } else { 1.0 };
        for r in 0..n {
            *sorted_vecs.at_mut(r, new_c) = sign * v.at(r, old_c);
        }
    }
    (sorted_vals, sorted_vecs)
}

/// Top-k principal directions of a sample (rows = observations).
/// Returns a k x dim projection matrix (rows are components).
pub fn pca_projection(samples: &[Vec<f64>], k: usize) -> Result<Mat> {
    if samples.is_empty() {
        return Err(SpiError::EmptyInput("pca sample"));
    }
    let dim = samples[0].len();
    if k > dim {
        return Err(SpiError::InvalidConfig(format!(
            "pca components {k} exceed dimension {dim}"
        )));
    }
    let n = samples.len() as f64;
    let mut mean = vec![0.0; dim];
    for s in samples {
        for (m, x) in mean.iter_mut().zip(s) {
            *m += x / n;
        }
    }
    let mut cov = Mat::zeros(dim, dim);
    for s in samples {
        let centered: Vec<f64> = s.iter().zip(&mean).map(|(x, m)| x - m).collect();
        cov.add_outer(1.0 / n, &centered, &centered);
    }
    let (_vals, vecs) = sym_eigen(&cov);
    Ok(Mat::from_fn(k, dim, |r, c| vecs.at(c, r)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_recovers_known_spectrum() {
        // diag(3, 1) rotated by 45 degrees
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let mut a = Mat::zeros(2, 2);
        *a.at_mut(0, 0) = 3.0 * r * r + 1.0 * r * r;
        *a.at_mut(0, 1) = 3.0 * r * r - 1.0 * r * r;
        *a.at_mut(1, 0) = a.at(0, 1);
        *a.at_mut(1, 1) = a.at(0, 0);
        let (vals, _) = sym_eigen(&a);
        assert!((vals[0] - 3.0).abs() < 1e-10);
        assert!((vals[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn pca_finds_dominant_direction() {
        // Points spread along (1, 1)/sqrt(2) with tiny off-axis noise.
        let samples: Vec<Vec<f64>> = (0..100)
            .map(|i| {
                let t = (i as f64 - 50.0) / 10.0;
                let off = ((i * 7919) % 13) as f64 * 1e-3;
                vec![t + off, t - off]
            })
            .collect();
        let proj = pca_projection(&samples, 1).unwrap();
        let c0 = proj.at(0, 0).abs();
        let c1 = proj.at(0, 1).abs();
        assert!((c0 - c1).abs() < 0.05, "expected ~diagonal direction");
    }

    #[test]
    fn tie_rule_orders_by_score_then_id() {
        let hits = vec![(5u64, 0.5f32), (2, 0.9), (7, 0.9), (1, 0.1)];
        let top = top_k_by_score(hits, 3);
        assert_eq!(
            top.iter().map(|h| h.0).collect::<Vec<_>>(),
            vec![2, 7, 5]
        );
    }
}
