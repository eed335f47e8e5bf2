use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Patient-level partition into `k` folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub k: usize,
    pub assignments: BTreeMap<String, usize>,
}

impl FoldSplit {
    pub fn fold_of(&self, patient_id: &str) -> Option<usize> {
        self.assignments.get(patient_id).copied()
    }

    /// Patients assigned to `fold`, sorted.
    pub fn patients_in(&self, fold: usize) -> Vec<String> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(p, _)| p.clone())
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignments.values() {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Seeded shuffle followed by round-robin assignment.
pub fn split_folds(patient_ids: &[String], k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::validation(format!("fold count must be at least 2, got {k}")));
    }
    let unique: BTreeSet<&String> = patient_ids.iter().collect();
    if unique.len() != patient_ids.len() {
        return Err(Error::validation("patient ids must be unique"));
    }
    if patient_ids.len() < k {
        return Err(Error::validation(format!(
            "cannot split {} patients into {k} folds",
            patient_ids.len()
        )));
    }
    // Sort first so the split depends on the id set, not the caller's ordering.
    let mut ids: Vec<String> = unique.into_iter().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let assignments = ids.into_iter().enumerate().map(|(i, id)| (id, i % k)).collect();
    Ok(FoldSplit { k, assignments })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{i:03}")).collect()
    }

    #[test]
    fn hundred_patients_five_folds() {
        let split = split_folds(&ids(100), 5, 7).unwrap();
        assert_eq!(split.fold_sizes(), vec![20; 5]);
    }

    #[test]
    fn singleton_folds() {
        let split = split_folds(&ids(5), 5, 1).unwrap();
        assert_eq!(split.fold_sizes(), vec![1; 5]);
    }

    #[test]
    fn deterministic_for_a_seed() {
        assert_eq!(split_folds(&ids(17), 3, 9).unwrap(), split_folds(&ids(17), 3, 9).unwrap());
        assert_ne!(split_folds(&ids(17), 3, 9).unwrap(), split_folds(&ids(17), 3, 10).unwrap());
    }

    #[test]
    fn too_many_folds() {
        assert!(matches!(split_folds(&ids(3), 4, 0), Err(Error::Validation(_))));
        assert!(split_folds(&ids(3), 1, 0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn split_is_a_balanced_partition(n in 2usize..60, k in 2usize..8, seed in 0u64..1000) {
            proptest::prop_assume!(k <= n);
            let split = split_folds(&ids(n), k, seed).unwrap();
            proptest::prop_assert_eq!(split.assignments.len(), n);
            let sizes = split.fold_sizes();
            let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
            proptest::prop_assert!(hi - lo <= 1);
            let total: usize = (0..k).map(|f| split.patients_in(f).len()).sum();
            proptest::prop_assert_eq!(total, n);
        }
    }
}
