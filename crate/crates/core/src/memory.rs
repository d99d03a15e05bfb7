//! Bounded exemplar memories.
//!
//! One bucketed store serves three admission policies:
//!
//! - reservoir sampling (experience replay),
//! - class-balanced greedy sampling (GDumb), keyed by `(class, task)`,
//! - group-class balanced greedy sampling (BGS), keyed by `(group, class, task)`.
//!
//! The greedy policies compare a bucket's count against the quota
//! `K / (|L| · |A|)` (or `K / |L|` for GDumb), where `L` is the set of
//! `(class, task)` labels registered so far. When the memory is full an
//! admitted sample evicts one element from a bucket of maximal count.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::Rng as _;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::seed::Rng;
use crate::stream::BiasedSample;

/// Bucket key. GDumb buckets leave `group` empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct MemoryKey {
    pub group: Option<u8>,
    pub class: usize,
    pub task: usize,
}

impl MemoryKey {
    pub fn group_class(group: u8, class: usize, task: usize) -> Self {
        Self {
            group: Some(group),
            class,
            task,
        }
    }

    pub fn class_only(class: usize, task: usize) -> Self {
        Self {
            group: None,
            class,
            task,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExemplarMemory {
    capacity: usize,
    group_count: usize,
    buckets: BTreeMap<MemoryKey, Vec<BiasedSample>>,
    counts: BTreeMap<MemoryKey, usize>,
    labels: BTreeSet<(usize, usize)>,
    rng: Rng,
}

impl ExemplarMemory {
    /// `rng` drives eviction choices and reservoir replacement.
    pub fn new(capacity: usize, group_count: usize, rng: Rng) -> Self {
        Self {
            capacity,
            group_count,
            buckets: BTreeMap::new(),
            counts: BTreeMap::new(),
            labels: BTreeSet::new(),
            rng,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn count(&self, key: &MemoryKey) -> usize {
        self.counts.get(key).copied().unwrap_or(0)
    }

    pub fn counts(&self) -> &BTreeMap<MemoryKey, usize> {
        &self.counts
    }

    pub fn labels(&self) -> &BTreeSet<(usize, usize)> {
        &self.labels
    }

    pub fn bucket(&self, key: &MemoryKey) -> &[BiasedSample] {
        self.buckets.get(key).map_or(&[], Vec::as_slice)
    }

    /// Stored samples in key order.
    pub fn samples(&self) -> impl Iterator<Item = &BiasedSample> {
        self.buckets.values().flatten()
    }

    /// Up to `n` distinct stored samples drawn uniformly with `rng`.
    pub fn draw<'a>(&'a self, n: usize, rng: &mut Rng) -> Vec<&'a BiasedSample> {
        let all: Vec<&BiasedSample> = self.samples().collect();
        let n = n.min(all.len());
        if n == 0 {
            return Vec::new();
        }
        index::sample(rng, all.len(), n).into_iter().map(|i| all[i]).collect()
    }

    fn insert(&mut self, key: MemoryKey, sample: BiasedSample) {
        self.buckets.entry(key).or_default().push(sample);
    }

    /// Removes a random element from one bucket of maximal count.
    fn evict_from_largest(&mut self) -> Option<MemoryKey> {
        let max = self.counts.values().copied().max().filter(|&m| m > 0)?;
        let tied: Vec<MemoryKey> = self
            .counts
            .iter()
            .filter(|(_, &c)| c == max)
            .map(|(k, _)| *k)
            .collect();
        let key = tied[self.rng.random_range(0..tied.len())];
        let bucket = self.buckets.get_mut(&key).expect("count implies bucket");
        let at = self.rng.random_range(0..bucket.len());
        bucket.remove(at);
        *self.counts.get_mut(&key).expect("counted") -= 1;
        Some(key)
    }

    fn greedy_update(&mut self, key: MemoryKey, sample: BiasedSample, quota: f64) {
        let count = self.count(&key);
        if (count as f64) >= quota {
            return;
        }
        if self.len() < self.capacity {
            self.insert(key, sample);
        } else {
            if self.evict_from_largest().is_none() {
                return;
            }
            self.insert(key, sample);
        }
        if count == 0 {
            self.labels.insert((key.class, key.task));
        }
        *self.counts.entry(key).or_insert(0) += 1;
    }

    /// Group-class balanced greedy admission of `sample` observed during task `task`.
    pub fn bgs_update(&mut self, sample: BiasedSample, task: usize) {
        let per_label = (self.labels.len() * self.group_count) as f64;
        let quota = if self.labels.is_empty() {
            self.capacity as f64
        } else {
            self.capacity as f64 / per_label
        };
        let key = MemoryKey::group_class(sample.group(), sample.class, task);
        self.greedy_update(key, sample, quota);
    }

    /// Class-balanced greedy admission (GDumb).
    pub fn gdumb_update(&mut self, sample: BiasedSample, task: usize) {
        let quota = if self.labels.is_empty() {
            self.capacity as f64
        } else {
            self.capacity as f64 / self.labels.len() as f64
        };
        let key = MemoryKey::class_only(sample.class, task);
        self.greedy_update(key, sample, quota);
    }

    /// Reservoir sampling; `n_seen` is the 1-based stream position of `sample`.
    pub fn reservoir_update(&mut self, sample: BiasedSample, n_seen: usize) -> Result<()> {
        let stored = self.len();
        if n_seen == 0 || n_seen < stored {
            return Err(Error::OutOfRange(format!(
                "reservoir position {n_seen} with {stored} stored"
            )));
        }
        let key = MemoryKey::group_class(sample.group(), sample.class, sample.task);
        if stored < self.capacity {
            self.insert(key, sample);
        } else {
            let slot = self.rng.random_range(0..n_seen);
            if slot >= self.capacity {
                return Ok(());
            }
            let victim = self.nth_key(slot);
            let offset = slot - self.bucket_start(&victim);
            self.buckets.get_mut(&victim).expect("victim bucket").remove(offset);
            *self.counts.get_mut(&victim).expect("victim count") -= 1;
            self.insert(key, sample);
        }
        self.labels.insert((key.class, key.task));
        *self.counts.entry(key).or_insert(0) += 1;
        Ok(())
    }

    fn nth_key(&self, slot: usize) -> MemoryKey {
        let mut seen = 0;
        for (k, b) in &self.buckets {
            if slot < seen + b.len() {
                return *k;
            }
            seen += b.len();
        }
        unreachable!("slot {slot} beyond {seen} stored samples")
    }

    fn bucket_start(&self, key: &MemoryKey) -> usize {
        self.buckets.range(..key).map(|(_, b)| b.len()).sum()
    }

    /// Total over keys of `C` equals the bucket sizes, each `C[k] = |bucket k|`,
    /// and the total never exceeds the capacity.
    pub fn check_invariants(&self) -> Result<()> {
        for (k, &c) in &self.counts {
            if self.bucket(k).len() != c {
                return Err(Error::OutOfRange(format!("count {c} vs bucket {k:?}")));
            }
        }
        let stored: usize = self.buckets.values().map(Vec::len).sum();
        if stored != self.len() || stored > self.capacity {
            return Err(Error::OutOfRange(format!(
                "{stored} stored for capacity {}",
                self.capacity
            )));
        }
        Ok(())
    }
}
