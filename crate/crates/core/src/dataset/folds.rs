use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::DatasetError;
use crate::rng::{stream, Purpose};

/// One cross-validation split, ids listed in input order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// Stratified k-fold split over `(id, label)` pairs.
///
/// Within each class the ids are shuffled with the seeded fold stream and dealt
/// round-robin; the dealing offset carries over between classes so fold sizes
/// stay balanced overall, not just per class.
pub fn stratified_kfold<'a>(
    items: impl IntoIterator<Item = (&'a str, usize)>,
    k: usize,
    seed: u64,
) -> Result<Vec<Fold>, DatasetError> {
    if k < 2 {
        return Err(DatasetError::InvalidFoldCount(k));
    }
    let items: Vec<(&str, usize)> = items.into_iter().collect();
    let mut by_class: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for &(id, label) in &items {
        by_class.entry(label).or_default().push(id);
    }
    for (&class, ids) in &by_class {
        if ids.len() < k {
            return Err(DatasetError::TooFewSamples {
                class,
                count: ids.len(),
                k,
            });
        }
    }

    let mut rng = stream(seed, Purpose::Folds);
    let mut fold_of: HashMap<&str, usize> = HashMap::with_capacity(items.len());
    let mut offset = 0;
    for ids in by_class.values_mut() {
        // independent of the caller's ordering
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        for (j, id) in ids.iter().enumerate() {
            fold_of.insert(id, (offset + j) % k);
        }
        offset = (offset + ids.len()) % k;
    }

    Ok((0..k)
        .map(|f| {
            let (val, train): (Vec<_>, Vec<_>) = items.iter().partition(|(id, _)| fold_of[id] == f);
            Fold {
                train: train.into_iter().map(|(id, _)| id.to_string()).collect(),
                val: val.into_iter().map(|(id, _)| id.to_string()).collect(),
            }
        })
        .collect())
}
