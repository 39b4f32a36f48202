//! FIFO replay memory with cached penultimate features.
//!
//! Entries join the buffer only when their labels arrive. The cached feature
//! of an entry is whatever the feature extractor produced when the sample was
//! first predicted, and it is deliberately never recomputed afterwards —
//! similarity-based selection runs on those possibly outdated features.

use std::collections::{HashMap, HashSet, VecDeque};

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floor added to clamped cosine weights so every candidate stays reachable
/// and no weight row sums to zero.
pub const WEIGHT_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum BufferError {
    #[error("memory buffer is empty")]
    Empty,
    #[error("duplicate sample id {0}")]
    DuplicateId(u64),
    #[error("query batch has {queries} samples but {predicted} predicted labels")]
    QueryMismatch { queries: usize, predicted: usize },
    #[error("memory capacity must be >= 1")]
    ZeroCapacity,
}

/// A labeled sample held in memory, with the feature vector cached at the
/// step it was first predicted.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    pub sample_id: u64,
    pub features: Vec<f64>,
    pub true_label: usize,
    pub cached_feature: Vec<f64>,
    /// Step at which the label arrived and the entry was inserted.
    pub inserted_at: u64,
}

/// How the importance-weighted selector chooses its candidate pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IwmsMode {
    /// Filter candidates to the predicted label first, then weight by
    /// similarity. Falls back to the whole buffer for a query whose predicted
    /// label has no stored entry.
    TwoStage,
    /// Skip the label filter; weight every entry by similarity alone.
    SingleShot,
}

/// Bounded FIFO memory: inserting past capacity evicts the oldest entry.
#[derive(Debug, Clone)]
pub struct MemoryBuffer {
    capacity: usize,
    entries: VecDeque<MemoryEntry>,
    ids: HashSet<u64>,
}

impl MemoryBuffer {
    pub fn new(capacity: usize) -> Result<Self, BufferError> {
        if capacity == 0 {
            return Err(BufferError::ZeroCapacity);
        }
        Ok(MemoryBuffer {
            capacity,
            entries: VecDeque::with_capacity(capacity),
            ids: HashSet::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in insertion order, oldest first.
    pub fn entries(&self) -> impl Iterator<Item = &MemoryEntry> {
        self.entries.iter()
    }

    /// Insert a freshly labeled sample. Rejects duplicate ids; evicts the
    /// oldest entry when full.
    pub fn insert_labeled(
        &mut self,
        sample_id: u64,
        features: Vec<f64>,
        true_label: usize,
        cached_feature: Vec<f64>,
        inserted_at: u64,
    ) -> Result<(), BufferError> {
        if !self.ids.insert(sample_id) {
            return Err(BufferError::DuplicateId(sample_id));
        }
        if self.entries.len() == self.capacity {
            let evicted = self.entries.pop_front().expect("buffer is full");
            self.ids.remove(&evicted.sample_id);
        }
        self.entries.push_back(MemoryEntry {
            sample_id,
            features,
            true_label,
            cached_feature,
            inserted_at,
        });
        Ok(())
    }

    /// `count` entries drawn uniformly with replacement.
    pub fn sample_random<R: Rng>(
        &self,
        count: usize,
        rng: &mut R,
    ) -> Result<Vec<&MemoryEntry>, BufferError> {
        if self.entries.is_empty() {
            return Err(BufferError::Empty);
        }
        Ok((0..count)
            .map(|_| &self.entries[rng.gen_range(0..self.entries.len())])
            .collect())
    }

    /// `count` entries drawn by importance-weighted selection.
    ///
    /// Queries are cycled round-robin. For query `i`, the candidate pool is
    /// the entries whose true label equals `predicted[i]` (`TwoStage`) or the
    /// whole buffer (`SingleShot`); one entry is then drawn from a multinomial
    /// over `max(cos(query_i, cached_j), 0) + 1e-6`. Draws are independent,
    /// i.e. with replacement.
    pub fn iwms_select<R: Rng>(
        &self,
        query_features: &[Vec<f64>],
        predicted: &[usize],
        count: usize,
        rng: &mut R,
        mode: IwmsMode,
    ) -> Result<Vec<&MemoryEntry>, BufferError> {
        if self.entries.is_empty() {
            return Err(BufferError::Empty);
        }
        if query_features.len() != predicted.len() || query_features.is_empty() {
            return Err(BufferError::QueryMismatch {
                queries: query_features.len(),
                predicted: predicted.len(),
            });
        }

        let all: Vec<usize> = (0..self.entries.len()).collect();
        let mut by_label: HashMap<usize, Vec<usize>> = HashMap::new();
        if mode == IwmsMode::TwoStage {
            for (j, e) in self.entries.iter().enumerate() {
                by_label.entry(e.true_label).or_default().push(j);
            }
        }

        // One multinomial per query, built lazily; reused when count exceeds
        // the number of queries.
        let mut tables: Vec<Option<(Vec<usize>, WeightedIndex<f64>)>> =
            vec![None; query_features.len()];
        let mut picked = Vec::with_capacity(count);
        for k in 0..count {
            let qi = k % query_features.len();
            if tables[qi].is_none() {
                let candidates: Vec<usize> = match mode {
                    IwmsMode::TwoStage => by_label
                        .get(&predicted[qi])
                        .cloned()
                        .unwrap_or_else(|| all.clone()),
                    IwmsMode::SingleShot => all.clone(),
                };
                let weights: Vec<f64> = candidates
                    .iter()
                    .map(|&j| iwms_weight(&query_features[qi], &self.entries[j].cached_feature))
                    .collect();
                let dist = WeightedIndex::new(&weights).expect("floored weights are positive");
                tables[qi] = Some((candidates, dist));
            }
            let (candidates, dist) = tables[qi].as_ref().expect("just built");
            picked.push(&self.entries[candidates[dist.sample(rng)]]);
        }
        Ok(picked)
    }

    /// Cached features are never refreshed after insertion; selection runs on
    /// outdated features by design. This is the explicit statement of that
    /// policy — it does nothing.
    pub fn refresh_policy(&self) {}

    /// Order-sensitive hash of the full buffer contents, for verifying that
    /// model training leaves stored entries untouched.
    pub fn snapshot_hash(&self) -> u64 {
        // FNV-1a over every field of every entry.
        let mut hash: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x100000001b3);
            }
        };
        for e in &self.entries {
            eat(&e.sample_id.to_le_bytes());
            eat(&(e.true_label as u64).to_le_bytes());
            eat(&e.inserted_at.to_le_bytes());
            for v in &e.features {
                eat(&v.to_bits().to_le_bytes());
            }
            for v in &e.cached_feature {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        hash
    }

    /// Debug dump: `sample_id,true_label,inserted_at,f0..,c0..`.
    pub fn dump_csv<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        let (dim, cdim) = self
            .entries
            .front()
            .map(|e| (e.features.len(), e.cached_feature.len()))
            .unwrap_or((0, 0));
        write!(w, "sample_id,true_label,inserted_at")?;
        for j in 0..dim {
            write!(w, ",f{j}")?;
        }
        for j in 0..cdim {
            write!(w, ",c{j}")?;
        }
        writeln!(w)?;
        for e in &self.entries {
            write!(w, "{},{},{}", e.sample_id, e.true_label, e.inserted_at)?;
            for v in &e.features {
                write!(w, ",{v}")?;
            }
            for v in &e.cached_feature {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Cosine similarity; 0 when either norm is below 1e-12.
pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    assert_eq!(u.len(), v.len(), "cosine of unequal dimensions");
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    let (nu, nv) = (nu.sqrt(), nv.sqrt());
    if nu < 1e-12 || nv < 1e-12 {
        return 0.0;
    }
    dot / (nu * nv)
}

/// Unnormalized multinomial weight of one candidate for one query.
pub fn iwms_weight(query: &[f64], cached: &[f64]) -> f64 {
    cosine(query, cached).max(0.0) + WEIGHT_FLOOR
}
