//! Seeded k-means with k-means++ initialization.
//!
//! Deterministic for a fixed (points, k, seed): sequential scans, fixed
//! reduction order, ties broken by lowest index.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Result, SpiError};

pub const MAX_ITERATIONS: usize = 25;
pub const REL_INERTIA_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct KMeansResult {
    /// Row-major centroids, k x dim.
    pub centroids: Vec<f32>,
    pub assignments: Vec<u32>,
    pub inertia: f64,
    pub iterations: usize,
}

#[inline]
fn dist_sq(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for i in 0..a.len() {
        let d = a[i] as f64 - b[i] as f64;
        acc += d * d;
    }
    acc
}

/// Lloyd iterations over row-major `points` (n x dim), capped at
/// [`MAX_ITERATIONS`] or a relative inertia change below [`REL_INERTIA_TOL`].
pub fn kmeans(points: &[f32], n: usize, dim: usize, k: usize, seed: u64) -> Result<KMeansResult> {
    if k == 0 {
        return Err(SpiError::InvalidConfig("k-means with k = 0".into()));
    }
    if n < k {
        return Err(SpiError::TooFewVectors {
            context: "k-means",
            required: k,
            got: n,
        });
    }
    let point = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    // k-means++ seeding.
    let mut centroids: Vec<f32> = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(point(first));
    let mut best_d2: Vec<f64> = (0..n).map(|i| dist_sq(point(i), point(first))).collect();
    for _ in 1..k {
        let total: f64 = best_d2.iter().sum();
        let chosen = if total <= 0.0 {
            // All remaining points coincide with a centroid; take the lowest
            // index not yet at distance zero... they all are, pick 0.
            0
        } else {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, d) in best_d2.iter().enumerate() {
                acc += d;
                if acc >= target {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        let c_start = centroids.len();
        centroids.extend_from_slice(point(chosen));
        let new_c = &centroids[c_start..c_start + dim];
        for i in 0..n {
            let d = dist_sq(point(i), new_c);
            if d < best_d2[i] {
                best_d2[i] = d;
            }
        }
    }

    let mut assignments = vec![0u32; n];
    let mut inertia = f64::INFINITY;
    let mut iterations = 0;
    for iter in 0..MAX_ITERATIONS {
        iterations = iter + 1;
        // Assign: nearest centroid, ties to the lowest index.
        let mut new_inertia = 0.0;
        for i in 0..n {
            let p = point(i);
            let mut best = 0u32;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let d = dist_sq(p, &centroids[c * dim..(c + 1) * dim]);
                if d < best_d {
                    best_d = d;
                    best = c as u32;
                }
            }
            assignments[i] = best;
            new_inertia += best_d;
        }

        // Update means (f64 accumulation, fixed order).
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assignments[i] as usize;
            counts[c] += 1;
            let p = point(i);
            for d in 0..dim {
                sums[c * dim + d] += p[d] as f64;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Reseed an empty cluster at the point farthest from its
                // current centroid (lowest index on ties).
                let mut far_i = 0;
                let mut far_d = -1.0;
                for i in 0..n {
                    let d = dist_sq(point(i), &centroids[assignments[i] as usize * dim..assignments[i] as usize * dim + dim]);
                    if d > far_d {
                        far_d = d;
                        far_i = i;
                    }
                }
                let p = point(far_i).to_vec();
                centroids[c * dim..(c + 1) * dim].copy_from_slice(&p);
                assignments[far_i] = c as u32;
            } else {
                for d in 0..dim {
                    centroids[c * dim + d] = (sums[c * dim + d] / counts[c] as f64) as f32;
                }
            }
        }

        let rel = if inertia.is_finite() && inertia > 0.0 {
            ((inertia - new_inertia) / inertia).abs()
        } else {
            f64::INFINITY
        };
        inertia = new_inertia;
        if rel < REL_INERTIA_TOL {
            break;
        }
    }

    Ok(KMeansResult {
        centroids,
        assignments,
        inertia,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob_data() -> (Vec<f32>, usize, usize) {
        // Three well-separated 2d blobs of 20 points each.
        let mut pts = Vec::new();
        let centers = [(0.0f32, 0.0f32), (10.0, 0.0), (0.0, 10.0)];
        for (ci, (cx, cy)) in centers.iter().enumerate() {
            for j in 0..20 {
                let dx = ((ci * 20 + j) as f32 * 0.618).fract() * 0.5 - 0.25;
                let dy = ((ci * 20 + j) as f32 * 0.414).fract() * 0.5 - 0.25;
                pts.push(cx + dx);
                pts.push(cy + dy);
            }
        }
        (pts, 60, 2)
    }

    #[test]
    fn recovers_separated_blobs() {
        let (pts, n, dim) = blob_data();
        let res = kmeans(&pts, n, dim, 3, 7).unwrap();
        // Every blob maps to a single cluster.
        for blob in 0..3 {
            let first = res.assignments[blob * 20];
            for j in 0..20 {
                assert_eq!(res.assignments[blob * 20 + j], first);
            }
        }
        assert!(res.inertia < 60.0 * 0.125);
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let (pts, n, dim) = blob_data();
        let a = kmeans(&pts, n, dim, 5, 42).unwrap();
        let b = kmeans(&pts, n, dim, 5, 42).unwrap();
        assert_eq!(a.centroids, b.centroids);
        assert_eq!(a.assignments, b.assignments);
    }

    #[test]
    fn rejects_more_clusters_than_points() {
        let (pts, n, dim) = blob_data();
        assert!(matches!(
            kmeans(&pts, n, dim, 100, 1),
            Err(SpiError::TooFewVectors { .. })
        ));
    }
}
