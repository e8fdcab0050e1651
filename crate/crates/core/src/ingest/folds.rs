use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_FOLDS: usize = 5;
pub const MIN_SUBJECTS: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub fold_index: usize,
    pub test_subjects: BTreeSet<String>,
    pub val_subjects: BTreeSet<String>,
    pub train_subjects: BTreeSet<String>,
}

impl FoldPlan {
    pub fn is_disjoint(&self) -> bool {
        self.test_subjects.is_disjoint(&self.val_subjects)
            && self.test_subjects.is_disjoint(&self.train_subjects)
            && self.val_subjects.is_disjoint(&self.train_subjects)
    }
}

/// Subject-level five-fold plan: two test subjects, one validation subject,
/// the rest training.
///
/// Test pairs walk the sorted subject list round-robin, wrapping when there
/// are fewer than ten subjects (with nine, the first subject is reused once
/// in the last fold). The validation subject is drawn from the remaining
/// subjects with a seeded generator.
pub fn make_subject_folds<I, S>(subject_ids: I, seed: u64) -> Result<Vec<FoldPlan>>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let subjects: Vec<String> = subject_ids
        .into_iter()
        .map(Into::into)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let n = subjects.len();
    if n < MIN_SUBJECTS {
        return Err(Error::InsufficientSubjects {
            needed: MIN_SUBJECTS,
            got: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..NUM_FOLDS)
        .map(|k| {
            let test: BTreeSet<String> = [2 * k % n, (2 * k + 1) % n]
                .into_iter()
                .map(|i| subjects[i].clone())
                .collect();
            let rest: Vec<&String> = subjects.iter().filter(|s| !test.contains(*s)).collect();
            let val = rest[rng.random_range(0..rest.len())].clone();
            let train = rest.into_iter().filter(|s| **s != val).cloned().collect();
            FoldPlan {
                fold_index: k,
                test_subjects: test,
                val_subjects: BTreeSet::from([val]),
                train_subjects: train,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn subjects(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("subject{i:02}")).collect()
    }

    #[test]
    fn nine_subjects() {
        let folds = make_subject_folds(subjects(9), 7).unwrap();
        assert_eq!(folds.len(), 5);
        for f in &folds {
            assert_eq!(f.test_subjects.len(), 2);
            assert_eq!(f.val_subjects.len(), 1);
            assert_eq!(f.train_subjects.len(), 6);
            assert!(f.is_disjoint());
        }
        // Only the lexicographically first subject is tested twice.
        let mut counts = std::collections::BTreeMap::new();
        for f in &folds {
            for s in &f.test_subjects {
                *counts.entry(s.clone()).or_insert(0) += 1;
            }
        }
        assert_eq!(counts["subject00"], 2);
        assert!(counts.iter().filter(|(k, _)| *k != "subject00").all(|(_, &c)| c == 1));
    }

    #[test]
    fn too_few_subjects() {
        assert!(matches!(
            make_subject_folds(subjects(3), 0),
            Err(Error::InsufficientSubjects { got: 3, .. })
        ));
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(
            make_subject_folds(subjects(9), 1).unwrap(),
            make_subject_folds(subjects(9), 1).unwrap()
        );
    }

    #[test]
    fn duplicates_collapse() {
        let ids = ["a", "a", "b", "c", "d"];
        let folds = make_subject_folds(ids, 0).unwrap();
        assert_eq!(folds[0].train_subjects.len(), 1);
    }
}
