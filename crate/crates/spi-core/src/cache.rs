//! Three-tier LRU cache with promote-on-hit and cascade demotion.
//!
//! Models a fast/medium/slow storage hierarchy as three in-process tiers
//! with entry-count capacities and per-tier simulated access costs. A hit
//! in a lower tier promotes the entry to tier 1, demoting LRU victims one
//! tier down the chain; the tier-3 victim leaves the cache.

use std::collections::BTreeMap;

use crate::error::{Result, SpiError};

pub const TIER_COUNT: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TierSpec {
    pub capacity: usize,
    /// Simulated milliseconds charged per hit in this tier.
    pub access_cost_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TierCacheConfig {
    pub tiers: [TierSpec; TIER_COUNT],
    /// Simulated cost of a miss (fetch from the backing store).
    pub backing_cost_ms: f64,
}

impl Default for TierCacheConfig {
    fn default() -> Self {
        TierCacheConfig {
            tiers: [
                TierSpec { capacity: 100, access_cost_ms: 0.01 },
                TierSpec { capacity: 1_000, access_cost_ms: 0.1 },
                TierSpec { capacity: 5_000, access_cost_ms: 1.0 },
            ],
            backing_cost_ms: 10.0,
        }
    }
}

impl TierCacheConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tiers.iter().any(|t| t.capacity == 0) {
            return Err(SpiError::InvalidConfig("tier capacities must be positive".into()));
        }
        let costs: Vec<f64> = self.tiers.iter().map(|t| t.access_cost_ms).collect();
        if !(costs[0] < costs[1] && costs[1] < costs[2]) {
            return Err(SpiError::InvalidConfig(
                "tier access costs must strictly increase".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct CacheStats {
    pub lookups: u64,
    pub hits: [u64; TIER_COUNT],
    pub misses: u64,
    pub evictions: u64,
    pub promotions: u64,
}

impl CacheStats {
    pub fn total_hits(&self) -> u64 {
        self.hits.iter().sum()
    }

    pub fn hit_rate(&self) -> f64 {
        if self.lookups == 0 {
            0.0
        } else {
            self.total_hits() as f64 / self.lookups as f64
        }
    }
}

/// Sum of per-tier hit costs plus miss costs against the backing store.
pub fn simulated_cost_ms(stats: &CacheStats, config: &TierCacheConfig) -> f64 {
    let mut cost = 0.0;
    for (t, spec) in config.tiers.iter().enumerate() {
        cost += stats.hits[t] as f64 * spec.access_cost_ms;
    }
    cost + stats.misses as f64 * config.backing_cost_ms
}

#[derive(Debug)]
struct Tier<K: Ord + Clone, V> {
    capacity: usize,
    entries: BTreeMap<K, (V, u64)>,
    by_stamp: BTreeMap<u64, K>,
}

impl<K: Ord + Clone, V> Tier<K, V> {
    fn new(capacity: usize) -> Self {
        Tier {
            capacity,
            entries: BTreeMap::new(),
            by_stamp: BTreeMap::new(),
        }
    }

    fn len(&self) -> usize {
        self.entries.len()
    }

    fn contains(&self, key: &K) -> bool {
        self.entries.contains_key(key)
    }

    fn touch(&mut self, key: &K, stamp: u64) {
        if let Some((_, old)) = self.entries.get_mut(key) {
            let prev = *old;
            *old = stamp;
            self.by_stamp.remove(&prev);
            self.by_stamp.insert(stamp, key.clone());
        }
    }

    fn remove(&mut self, key: &K) -> Option<(V, u64)> {
        let (v, stamp) = self.entries.remove(key)?;
        self.by_stamp.remove(&stamp);
        Some((v, stamp))
    }

    fn insert(&mut self, key: K, value: V, stamp: u64) {
        self.by_stamp.insert(stamp, key.clone());
        self.entries.insert(key, (value, stamp));
    }

    fn pop_lru(&mut self) -> Option<(K, V)> {
        let (&stamp, _) = self.by_stamp.iter().next()?;
        let key = self.by_stamp.remove(&stamp)?;
        let (v, _) = self.entries.remove(&key)?;
        Some((key, v))
    }
}

#[derive(Debug)]
pub struct TierCache<K: Ord + Clone, V: Clone> {
    config: TierCacheConfig,
    tiers: Vec<Tier<K, V>>,
    stats: CacheStats,
    clock: u64,
}

impl<K: Ord + Clone, V: Clone> TierCache<K, V> {
    pub fn new(config: TierCacheConfig) -> Result<Self> {
        config.validate()?;
        Ok(TierCache {
            tiers: config.tiers.iter().map(|t| Tier::new(t.capacity)).collect(),
            config,
            stats: CacheStats::default(),
            clock: 0,
        })
    }

    pub fn stats(&self) -> CacheStats {
        self.stats
    }

    pub fn config(&self) -> &TierCacheConfig {
        &self.config
    }

    /// Tier currently holding a key (0-based), for inspection and tests.
    pub fn tier_of(&self, key: &K) -> Option<usize> {
        self.tiers.iter().position(|t| t.contains(key))
    }

    pub fn len(&self) -> usize {
        self.tiers.iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    /// Insert at tier 1, demoting LRU victims down the chain. Returns how
    /// many entries left the cache entirely.
    fn insert_front(&mut self, key: K, value: V) -> usize {
        let stamp = self.tick();
        let mut carry: Option<(K, V)> = Some((key, value));
        for t in 0..TIER_COUNT {
            let Some((k, v)) = carry.take() else { break };
            if self.tiers[t].len() >= self.tiers[t].capacity {
                carry = self.tiers[t].pop_lru();
            }
            // The demoted victim enters the next tier as its most recent
            // entry, sharing this operation's stamp; stamps are unique per
            // (tier, operation) so ordering stays well defined.
            self.tiers[t].insert(k, v, stamp);
        }
        match carry {
            Some(_) => {
                self.stats.evictions += 1;
                1
            }
            None => 0,
        }
    }

    /// Look a key up; a hit anywhere promotes the entry to tier 1.
    pub fn get(&mut self, key: &K) -> Option<V> {
        self.stats.lookups += 1;
        match self.tier_of(key) {
            Some(0) => {
                self.stats.hits[0] += 1;
                let stamp = self.tick();
                self.tiers[0].touch(key, stamp);
                self.tiers[0].entries.get(key).map(|(v, _)| v.clone())
            }
            Some(t) => {
                self.stats.hits[t] += 1;
                self.stats.promotions += 1;
                let (v, _) = self.tiers[t].remove(key).expect("tier_of said present");
                self.insert_front(key.clone(), v.clone());
                Some(v)
            }
            None => {
                self.stats.misses += 1;
                None
            }
        }
    }

    /// Insert or refresh a key at tier 1. Returns evictions performed.
    pub fn put(&mut self, key: K, value: V) -> usize {
        if let Some(t) = self.tier_of(&key) {
            // Refresh: same movement as a hit, with the new value.
            self.tiers[t].remove(&key);
            if t != 0 {
                self.stats.promotions += 1;
            }
            return self.insert_front(key, value);
        }
        self.insert_front(key, value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    /// Independently coded reference: one MRU-first list per tier, linear
    /// scans everywhere. The implementation under test must agree with it.
    struct NaiveCascade {
        caps: [usize; 3],
        tiers: [Vec<u64>; 3],
        hits: [u64; 3],
        misses: u64,
    }

    impl NaiveCascade {
        fn new(caps: [usize; 3]) -> Self {
            NaiveCascade {
                caps,
                tiers: [Vec::new(), Vec::new(), Vec::new()],
                hits: [0; 3],
                misses: 0,
            }
        }

        fn push_front_cascade(&mut self, key: u64) {
            let mut carry = Some(key);
            for t in 0..3 {
                let Some(k) = carry.take() else { break };
                self.tiers[t].insert(0, k);
                if self.tiers[t].len() > self.caps[t] {
                    carry = self.tiers[t].pop();
                }
            }
        }

        fn access(&mut self, key: u64) {
            for t in 0..3 {
                if let Some(pos) = self.tiers[t].iter().position(|k| *k == key) {
                    self.hits[t] += 1;
                    if t == 0 {
                        self.tiers[0].remove(pos);
                        self.tiers[0].insert(0, key);
                    } else {
                        self.tiers[t].remove(pos);
                        self.push_front_cascade(key);
                    }
                    return;
                }
            }
            self.misses += 1;
            self.push_front_cascade(key);
        }

        fn hit_rate(&self) -> f64 {
            let h: u64 = self.hits.iter().sum();
            h as f64 / (h + self.misses) as f64
        }
    }

    fn config(caps: [usize; 3]) -> TierCacheConfig {
        TierCacheConfig {
            tiers: [
                TierSpec { capacity: caps[0], access_cost_ms: 0.01 },
                TierSpec { capacity: caps[1], access_cost_ms: 0.1 },
                TierSpec { capacity: caps[2], access_cost_ms: 1.0 },
            ],
            backing_cost_ms: 10.0,
        }
    }

    /// A get-or-insert access, like the node embedding-fetch path.
    fn access(cache: &mut TierCache<u64, u64>, key: u64) {
        if cache.get(&key).is_none() {
            cache.put(key, key);
        }
    }

    #[test]
    fn hand_traceable_capacity_one_cascade() {
        let mut c = TierCache::new(config([1, 1, 1])).unwrap();
        c.put(1, 10); // a -> T1
        c.put(2, 20); // b -> T1, a demoted to T2
        assert_eq!(c.tier_of(&1), Some(1));
        assert_eq!(c.tier_of(&2), Some(0));
        let v = c.get(&1); // hits T2, promotes, demoting b
        assert_eq!(v, Some(10));
        assert_eq!(c.tier_of(&1), Some(0));
        assert_eq!(c.tier_of(&2), Some(1));
        assert_eq!(c.stats().hits, [0, 1, 0]);
        assert_eq!(c.stats().promotions, 1);
    }

    #[test]
    fn empty_cache_misses() {
        let mut c: TierCache<u64, u64> = TierCache::new(config([2, 2, 2])).unwrap();
        assert_eq!(c.get(&5), None);
        assert_eq!(c.stats().misses, 1);
        assert_eq!(c.stats().hit_rate(), 0.0);
    }

    #[test]
    fn zipf_trace_matches_reference_simulator() {
        let caps = [100usize, 1_000, 5_000];
        let mut cache = TierCache::new(config(caps)).unwrap();
        let mut reference = NaiveCascade::new(caps);
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let zipf = rand_distr::Zipf::new(10_000.0, 1.0).unwrap();
        let trace: Vec<u64> = (0..60_000)
            .map(|_| rng.sample(zipf) as u64)
            .collect();
        for &key in &trace {
            access(&mut cache, key);
            reference.access(key);
        }
        let a = cache.stats().hit_rate();
        let b = reference.hit_rate();
        assert!(
            (a - b).abs() <= 0.03,
            "cache {a:.4} vs reference {b:.4}"
        );
        // Same policy coded twice: the agreement should in fact be exact.
        assert_eq!(cache.stats().hits, reference.hits);
        assert_eq!(cache.stats().misses, reference.misses);
    }

    /// For a trace of gets+puts, tier contents equal contiguous segments of
    /// the single-LRU recency stack; a single tier therefore behaves exactly
    /// like textbook LRU.
    #[test]
    fn tiers_partition_the_lru_stack() {
        let caps = [3usize, 5, 7];
        let mut cache = TierCache::new(config(caps)).unwrap();
        let mut stack: Vec<u64> = Vec::new(); // MRU first, textbook LRU
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        for _ in 0..5_000 {
            let key = rng.random_range(0..40u64);
            access(&mut cache, key);
            if let Some(pos) = stack.iter().position(|k| *k == key) {
                stack.remove(pos);
            }
            stack.insert(0, key);
            stack.truncate(caps.iter().sum());

            for (i, &k) in stack.iter().enumerate() {
                let expect = if i < caps[0] {
                    0
                } else if i < caps[0] + caps[1] {
                    1
                } else {
                    2
                };
                assert_eq!(cache.tier_of(&k), Some(expect), "key {k} at stack pos {i}");
            }
            // Capacity and inclusion-freedom.
            assert_eq!(cache.len(), stack.len());
            for (t, cap) in caps.iter().enumerate() {
                assert!(cache.tiers[t].len() <= *cap);
            }
        }
    }

    #[test]
    fn larger_tiers_never_lower_hit_rate() {
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let zipf = rand_distr::Zipf::new(2_000.0, 0.9).unwrap();
        let trace: Vec<u64> = (0..20_000).map(|_| rng.sample(zipf) as u64).collect();
        let run = |caps: [usize; 3]| -> f64 {
            let mut c = TierCache::new(config(caps)).unwrap();
            for &k in &trace {
                access(&mut c, k);
            }
            c.stats().hit_rate()
        };
        let base = run([20, 60, 200]);
        let bigger = run([40, 120, 400]);
        assert!(
            bigger >= base - 1e-12,
            "hit rate dropped: {base} -> {bigger}"
        );
    }

    #[test]
    fn simulated_cost_linear_accounting() {
        let cfg = config([2, 2, 2]);
        let stats = CacheStats {
            lookups: 10,
            hits: [4, 2, 1],
            misses: 3,
            evictions: 0,
            promotions: 3,
        };
        let expect = 4.0 * 0.01 + 2.0 * 0.1 + 1.0 * 1.0 + 3.0 * 10.0;
        assert!((simulated_cost_ms(&stats, &cfg) - expect).abs() < 1e-12);

        // All-T1 and all-miss corner cases.
        let all_t1 = CacheStats { lookups: 5, hits: [5, 0, 0], ..Default::default() };
        assert!((simulated_cost_ms(&all_t1, &cfg) - 0.05).abs() < 1e-12);
        let all_miss = CacheStats { lookups: 5, misses: 5, ..Default::default() };
        assert!((simulated_cost_ms(&all_miss, &cfg) - 50.0).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut bad = config([1, 1, 1]);
        bad.tiers[2].access_cost_ms = 0.001; // not increasing
        assert!(TierCache::<u64, u64>::new(bad).is_err());
        let mut zero = config([1, 1, 1]);
        zero.tiers[0].capacity = 0;
        assert!(TierCache::<u64, u64>::new(zero).is_err());
    }
}
