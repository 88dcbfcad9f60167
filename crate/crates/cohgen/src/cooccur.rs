//! Sparse co-occurrence accumulation with 1/distance weighting.

use crate::error::{Error, Result};
use crate::vocab::{Vocabulary, BOS, EOS, PAD};
use std::collections::HashMap;

/// Sparse (center, context) -> weighted count table.
#[derive(Clone, Debug, Default)]
pub struct CooccurrenceTable {
    counts: HashMap<(u32, u32), f64>,
}

impl CooccurrenceTable {
    pub fn new() -> CooccurrenceTable {
        CooccurrenceTable::default()
    }

    pub fn get(&self, center: u32, context: u32) -> f64 {
        self.counts.get(&(center, context)).copied().unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn add(&mut self, center: u32, context: u32, weight: f64) {
        *self.counts.entry((center, context)).or_insert(0.0) += weight;
    }

    /// Additive, commutative merge; supports sharded counting.
    pub fn merge(&mut self, other: CooccurrenceTable) {
        for ((a, b), w) in other.counts {
            self.add(a, b, w);
        }
    }

    /// Entries in a deterministic (sorted) order.
    pub fn sorted_entries(&self) -> Vec<(u32, u32, f64)> {
        let mut v: Vec<(u32, u32, f64)> = self
            .counts
            .iter()
            .map(|(&(a, b), &w)| (a, b, w))
            .collect();
        v.sort_by_key(|&(a, b, _)| (a, b));
        v
    }
}

fn countable(id: u32) -> bool {
    id != PAD && id != BOS && id != EOS
}

/// Accumulate over a stream of sentences (windows never cross sentence
/// boundaries). Unknown tokens map to UNK; both directions are counted.
pub fn count_cooccurrences<I, S, T>(
    sentences: I,
    vocab: &Vocabulary,
    window: usize,
) -> Result<CooccurrenceTable>
where
    I: IntoIterator<Item = S>,
    S: AsRef<[T]>,
    T: AsRef<str>,
{
    if window < 1 {
        return Err(Error::Input("window must be >= 1".into()));
    }
    let mut table = CooccurrenceTable::new();
    for sentence in sentences {
        let ids: Vec<u32> = sentence
            .as_ref()
            .iter()
            .map(|t| vocab.id(t.as_ref()))
            .collect();
        for i in 0..ids.len() {
            if !countable(ids[i]) {
                continue;
            }
            for d in 1..=window.min(ids.len().saturating_sub(i + 1)) {
                let j = i + d;
                if !countable(ids[j]) {
                    continue;
                }
                let w = 1.0 / d as f64;
                table.add(ids[i], ids[j], w);
                table.add(ids[j], ids[i], w);
            }
        }
    }
    Ok(table)
}
