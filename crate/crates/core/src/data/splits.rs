use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Subject lists for one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub fold: usize,
    pub train: Vec<String>,
    pub val_healthy: Vec<String>,
    pub val_unhealthy: Vec<String>,
    pub test: Vec<String>,
}

/// Holds out `test_count` subjects, then partitions the rest into `folds`
/// disjoint validation sets. With `strata`, the held-out set and every fold
/// follow the label proportions to within one subject per label.
/// `val_unhealthy` is left empty; anomalous validation subjects come from a
/// separate pool.
pub fn make_splits(
    ids: &[String],
    folds: usize,
    seed: u64,
    strata: Option<&[String]>,
    test_count: usize,
) -> Result<Vec<DatasetSplit>> {
    if folds < 2 {
        return Err(Error::param("need at least two folds"));
    }
    let unique: HashSet<&String> = ids.iter().collect();
    if unique.len() != ids.len() {
        return Err(Error::param("subject ids must be unique"));
    }
    if let Some(labels) = strata {
        if labels.len() != ids.len() {
            return Err(Error::param("one stratum label per subject required"));
        }
    }
    if ids.len() < test_count + folds {
        return Err(Error::param(format!(
            "{} subjects cannot fill {test_count} test slots and {folds} folds",
            ids.len()
        )));
    }

    // Strata in label order, shuffled within; consecutive positions then
    // cycle through buckets so every bucket samples each stratum evenly.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for (i, id) in ids.iter().enumerate() {
        let label = strata.map_or("", |l| l[i].as_str());
        groups.entry(label).or_default().push(id.clone());
    }
    let mut ordered = Vec::with_capacity(ids.len());
    for members in groups.values_mut() {
        members.shuffle(&mut rng);
        ordered.extend(members.iter().cloned());
    }

    let n = ordered.len();
    let test_positions: HashSet<usize> = (0..test_count)
        .map(|j| ((2 * j + 1) * n) / (2 * test_count))
        .collect();
    let test: Vec<String> = (0..n)
        .filter(|i| test_positions.contains(i))
        .map(|i| ordered[i].clone())
        .collect();
    let pool: Vec<String> = (0..n)
        .filter(|i| !test_positions.contains(i))
        .map(|i| ordered[i].clone())
        .collect();

    let mut buckets = vec![Vec::new(); folds];
    for (i, id) in pool.iter().enumerate() {
        buckets[i % folds].push(id.clone());
    }
    Ok((0..folds)
        .map(|fold| DatasetSplit {
            fold,
            train: buckets
                .iter()
                .enumerate()
                .filter(|(k, _)| *k != fold)
                .flat_map(|(_, b)| b.iter().cloned())
                .collect(),
            val_healthy: buckets[fold].clone(),
            val_unhealthy: Vec::new(),
            test: test.clone(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i:02}")).collect()
    }

    #[test]
    fn five_folds_of_two() {
        let ids = ids(10);
        let splits = make_splits(&ids, 5, 1, None, 0).unwrap();
        let mut seen = HashSet::new();
        for s in &splits {
            assert_eq!(s.val_healthy.len(), 2);
            assert_eq!(s.train.len(), 8);
            for id in &s.val_healthy {
                assert!(seen.insert(id.clone()));
                assert!(!s.train.contains(id));
            }
        }
        assert_eq!(seen.len(), 10);
    }

    #[test]
    fn test_set_is_fixed_and_disjoint() {
        let ids = ids(20);
        let splits = make_splits(&ids, 4, 9, None, 4).unwrap();
        let test = &splits[0].test;
        assert_eq!(test.len(), 4);
        for s in &splits {
            assert_eq!(&s.test, test);
            assert!(s.val_healthy.iter().chain(&s.train).all(|id| !test.contains(id)));
            assert_eq!(s.train.len() + s.val_healthy.len(), 16);
        }
        assert_eq!(splits, make_splits(&ids, 4, 9, None, 4).unwrap());
        assert_ne!(splits, make_splits(&ids, 4, 10, None, 4).unwrap());
    }

    #[test]
    fn stratification_balances_labels() {
        let ids = ids(30);
        let labels: Vec<String> = (0..30).map(|i| if i < 12 { "a".into() } else { "b".into() }).collect();
        let splits = make_splits(&ids, 3, 2, Some(&labels), 5).unwrap();
        let label_of = |id: &String| labels[ids.iter().position(|x| x == id).unwrap()].clone();
        let count_a = |set: &[String]| set.iter().filter(|id| label_of(id) == "a").count() as f64;
        let test_a = count_a(&splits[0].test);
        assert!((test_a - 5.0 * 12.0 / 30.0).abs() <= 1.0);
        for s in &splits {
            let expected = s.val_healthy.len() as f64 * (12.0 - test_a) / 25.0;
            assert!((count_a(&s.val_healthy) - expected).abs() <= 1.0);
        }
    }

    #[test]
    fn invalid_requests() {
        assert!(make_splits(&ids(3), 5, 0, None, 0).is_err());
        assert!(make_splits(&ids(10), 1, 0, None, 0).is_err());
        let dup = vec!["a".to_string(), "a".to_string(), "b".to_string()];
        assert!(make_splits(&dup, 2, 0, None, 0).is_err());
    }
}
