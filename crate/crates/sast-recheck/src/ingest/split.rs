//! Deterministic train/test splitting of labeled findings.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::GroundTruthLabel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
    pub ratio: f64,
}

/// Shuffles label ids with a seeded RNG; the first `floor(ratio * n)` go to
/// train, the remainder to test. Same seed, same split.
pub fn split_dataset(labels: &[GroundTruthLabel], ratio: f64, seed: u64) -> DatasetSplit {
    assert!(ratio > 0.0 && ratio < 1.0, "ratio must be in (0, 1)");
    assert!(!labels.is_empty(), "labels must be non-empty");
    let mut ids: Vec<String> = labels.iter().map(|l| l.finding_id.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let cut = (ratio * ids.len() as f64).floor() as usize;
    let test = ids.split_off(cut);
    DatasetSplit { train: ids, test, seed, ratio }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn labels(n: usize) -> Vec<GroundTruthLabel> {
        (0..n)
            .map(|i| GroundTruthLabel { finding_id: format!("f{i}"), is_real: i % 2 == 0 })
            .collect()
    }

    #[test]
    fn sizes_and_disjointness() {
        let split = split_dataset(&labels(10), 0.8, 7);
        assert_eq!(split.train.len(), 8);
        assert_eq!(split.test.len(), 2);
        let train: BTreeSet<_> = split.train.iter().collect();
        let test: BTreeSet<_> = split.test.iter().collect();
        assert!(train.is_disjoint(&test));
    }

    #[test]
    fn same_seed_same_split() {
        let a = split_dataset(&labels(100), 0.8, 42);
        let b = split_dataset(&labels(100), 0.8, 42);
        assert_eq!(a, b);
        let c = split_dataset(&labels(100), 0.8, 43);
        assert_ne!(a, c);
    }
}
