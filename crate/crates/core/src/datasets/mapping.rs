//! Label mapping between the original and hijacking class spaces.

use crate::error::{Error, Result};
use crate::rng_for;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingStrategy {
    Identity,
    Random,
}

/// Injective map from original-class indices to hijacking-class indices.
///
/// Serialized as `{"strategy": ..., "seed": ..., "pairs": [[y_o, y_h], ...]}`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct LabelMapping {
    pub strategy: MappingStrategy,
    pub seed: u64,
    pub pairs: Vec<(usize, usize)>,
}

impl LabelMapping {
    /// Build a mapping covering all `n_original` classes into `n_hijack` classes.
    pub fn new(
        n_original: usize,
        n_hijack: usize,
        strategy: MappingStrategy,
        seed: u64,
    ) -> Result<Self> {
        if n_hijack < n_original {
            return Err(Error::MappingInfeasible { n_original, n_hijack });
        }
        let pairs = match strategy {
            MappingStrategy::Identity => (0..n_original).map(|i| (i, i)).collect(),
            MappingStrategy::Random => {
                let mut targets: Vec<usize> = (0..n_hijack).collect();
                targets.shuffle(&mut rng_for(seed, "label-mapping"));
                (0..n_original).map(|i| (i, targets[i])).collect()
            }
        };
        Ok(Self { strategy, seed, pairs })
    }

    pub fn n_original(&self) -> usize {
        self.pairs.len()
    }

    /// y_o -> y_h.
    pub fn map(&self, y_o: usize) -> Option<usize> {
        self.pairs.iter().find(|&&(o, _)| o == y_o).map(|&(_, h)| h)
    }

    /// y_h -> y_o (the mapping is injective, so this is unambiguous).
    pub fn invert(&self, y_h: usize) -> Option<usize> {
        self.pairs.iter().find(|&&(_, h)| h == y_h).map(|&(o, _)| o)
    }

    /// Hijack classes that are reachable through the mapping.
    pub fn mapped_hijack_classes(&self) -> Vec<usize> {
        self.pairs.iter().map(|&(_, h)| h).collect()
    }

    pub fn is_injective(&self) -> bool {
        let mut seen = std::collections::HashSet::new();
        self.pairs.iter().all(|&(_, h)| seen.insert(h))
    }
}
