//! EWMA load estimation and min-max replica routing.

use crate::error::{Result, SpiError};

/// L(t) = alpha * L(t-1) + (1 - alpha) * Q(t).
pub fn ewma_update(prev: f64, observed: f64, alpha: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(SpiError::InvalidConfig(format!(
            "ewma alpha {alpha} outside [0, 1)"
        )));
    }
    if !prev.is_finite() || !observed.is_finite() {
        return Err(SpiError::NonFinite("ewma load"));
    }
    Ok(alpha * prev + (1.0 - alpha) * observed)
}

/// Pick the eligible node whose selection minimizes the resulting maximum
/// load across the cluster, counting the new assignment as one unit. Ties
/// break toward the lowest node id.
pub fn route(eligible: &[u32], loads: &[f64]) -> Result<u32> {
    if eligible.is_empty() {
        return Err(SpiError::NoEligibleNode);
    }
    let base_max = |skip: u32| -> f64 {
        loads
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != skip as usize)
            .map(|(_, l)| *l)
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let mut best: Option<(u32, f64)> = None;
    for &i in eligible {
        let li = loads.get(i as usize).copied().unwrap_or(0.0);
        let resulting = base_max(i).max(li + 1.0);
        match best {
            None => best = Some((i, resulting)),
            Some((bi, bv)) => {
                if resulting < bv || (resulting == bv && i < bi) {
                    best = Some((i, resulting));
                }
            }
        }
    }
    Ok(best.unwrap().0)
}

/// Windowed EWMA tracker: assignments accumulate into the current window;
/// closing a window folds the count into the estimate via the formula.
#[derive(Debug, Clone)]
pub struct LoadTracker {
    pub alpha: f64,
    pub estimates: Vec<f64>,
    window: Vec<f64>,
}

impl LoadTracker {
    pub fn new(n_nodes: usize, alpha: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(SpiError::InvalidConfig(format!(
                "ewma alpha {alpha} outside [0, 1)"
            )));
        }
        Ok(LoadTracker {
            alpha,
            estimates: vec![0.0; n_nodes],
            window: vec![0.0; n_nodes],
        })
    }

    /// Current load view: estimate plus in-window assignments.
    pub fn current(&self) -> Vec<f64> {
        self.estimates
            .iter()
            .zip(&self.window)
            .map(|(e, w)| e + w)
            .collect()
    }

    pub fn record_assignment(&mut self, node: u32, weight: f64) {
        self.window[node as usize] += weight;
    }

    /// Fold the window counts into the EWMA estimates.
    pub fn close_window(&mut self) {
        for (e, w) in self.estimates.iter_mut().zip(self.window.iter_mut()) {
            *e = self.alpha * *e + (1.0 - self.alpha) * *w;
            *w = 0.0;
        }
    }

    pub fn route(&self, eligible: &[u32]) -> Result<u32> {
        route(eligible, &self.current())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ewma_formula_arithmetic() {
        // alpha 0.9, L 10, Q 20 -> 11
        assert_eq!(ewma_update(10.0, 20.0, 0.9).unwrap(), 11.0);
        // alpha 0 is memoryless
        assert_eq!(ewma_update(10.0, 20.0, 0.0).unwrap(), 20.0);
        assert!(ewma_update(1.0, 1.0, 1.0).is_err());
        assert!(ewma_update(1.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn ewma_stays_in_observation_range() {
        let mut l = 0.0;
        for q in [5.0, 3.0, 8.0, 0.0, 10.0, 10.0, 2.0] {
            l = ewma_update(l, q, 0.9).unwrap();
            assert!((0.0..=10.0).contains(&l), "stayed in [0, Qmax], got {l}");
        }
    }

    #[test]
    fn route_prefers_lowest_max_and_lowest_id() {
        // Equal loads: node 0 by the tie rule.
        assert_eq!(route(&[0, 1, 2], &[1.0, 1.0, 1.0]).unwrap(), 0);
        // Heavily loaded node avoided.
        assert_eq!(route(&[0, 1], &[9.0, 1.0]).unwrap(), 1);
        // Eligibility restricts the choice.
        assert_eq!(route(&[2], &[0.0, 0.0, 5.0]).unwrap(), 2);
        assert!(matches!(route(&[], &[1.0]), Err(SpiError::NoEligibleNode)));
    }

    #[test]
    fn tracker_assignments_spread() {
        let mut t = LoadTracker::new(3, 0.9).unwrap();
        let mut counts = [0usize; 3];
        for _ in 0..30 {
            let n = t.route(&[0, 1, 2]).unwrap();
            t.record_assignment(n, 1.0);
            counts[n as usize] += 1;
        }
        assert_eq!(counts, [10, 10, 10], "round-robin under equal loads");
        t.close_window();
        assert!(t.estimates.iter().all(|e| (*e - 1.0).abs() < 1e-12));
    }
}
