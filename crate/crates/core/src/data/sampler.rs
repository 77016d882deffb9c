//! Category-weighted index stream.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::synth::Category;
use crate::error::{Error, Result};
use crate::rng;

/// Infinite stream of dataset indices. Each draw picks a category by weight
/// and then the next index of that category in round-robin order.
#[derive(Debug, Clone)]
pub struct WeightedSampler {
    buckets: Vec<(f64, Vec<usize>)>,
    cursors: Vec<usize>,
    total: f64,
    rng: ChaCha8Rng,
}

/// `categories[i]` is the category of dataset item `i`.
pub fn weighted_sampler(categories: &[Category], weights: &[(Category, f64)], seed: u64) -> Result<WeightedSampler> {
    let mut by_cat: BTreeMap<Category, Vec<usize>> = BTreeMap::new();
    for (i, c) in categories.iter().enumerate() {
        by_cat.entry(*c).or_default().push(i);
    }
    let mut buckets = Vec::new();
    for &(cat, w) in weights {
        if !(w >= 0.0) {
            return Err(Error::InvalidRange(format!("weight {w} for {cat}")));
        }
        if w == 0.0 {
            continue;
        }
        let items = by_cat.get(&cat).cloned().unwrap_or_default();
        if items.is_empty() {
            return Err(Error::EmptyCategory(cat.to_string()));
        }
        buckets.push((w, items));
    }
    if buckets.is_empty() {
        return Err(Error::Empty("no category with positive weight".into()));
    }
    let total = buckets.iter().map(|(w, _)| w).sum();
    Ok(WeightedSampler {
        cursors: vec![0; buckets.len()],
        buckets,
        total,
        rng: rng::stream(seed, &[rng::tag("sampler")]),
    })
}

impl Iterator for WeightedSampler {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        let k = if self.buckets.len() == 1 {
            0
        } else {
            let u = self.rng.random::<f64>() * self.total;
            let mut acc = 0.0;
            let mut pick = self.buckets.len() - 1;
            for (i, (w, _)) in self.buckets.iter().enumerate() {
                acc += w;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        };
        let items = &self.buckets[k].1;
        let idx = items[self.cursors[k] % items.len()];
        self.cursors[k] += 1;
        Some(idx)
    }
}
