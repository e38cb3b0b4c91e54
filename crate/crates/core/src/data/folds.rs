use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::NUM_CATEGORIES;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    /// Fold index of every example.
    pub fold_of: Vec<usize>,
    /// Stratification label each example was balanced on.
    pub strata: Vec<usize>,
    pub seed: u64,
}

impl FoldAssignment {
    pub fn members(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] == fold).collect()
    }

    /// `(train, validation)` indices with `fold` held out.
    pub fn split(&self, fold: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        if fold >= self.k {
            return Err(Error::Config(format!("fold {fold} out of range for k={}", self.k)));
        }
        let (val, train) = (0..self.fold_of.len()).partition(|&i| self.fold_of[i] == fold);
        Ok((train, val))
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        self.fold_of.iter().for_each(|&f| sizes[f] += 1);
        sizes
    }

    /// Per-fold count of examples whose stratum equals `stratum`.
    pub fn stratum_counts(&self, stratum: usize) -> Vec<usize> {
        let mut counts = vec![0; self.k];
        for (f, s) in self.fold_of.iter().zip(&self.strata) {
            if *s == stratum {
                counts[*f] += 1;
            }
        }
        counts
    }
}

/// Assigns each example to one of `k` folds so that every stratum is spread
/// as evenly as possible and fold sizes differ by at most one.
///
/// Each stratum is shuffled with `seed`, then strata are dealt round-robin in
/// ascending label order, continuing the rotation from one stratum to the next.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::Config(format!("k={k}: at least two folds are needed for validation")));
    }
    let mut by_stratum: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_stratum.entry(y).or_default().push(i);
    }
    if by_stratum.is_empty() {
        return Err(Error::Stratification("no examples to split".into()));
    }
    if let Some((y, members)) = by_stratum.iter().find(|(_, m)| m.len() < k) {
        return Err(Error::Stratification(format!(
            "stratum {y} has {} examples, fewer than k={k}",
            members.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = vec![0; labels.len()];
    let mut pos = 0usize;
    for members in by_stratum.values_mut() {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            fold_of[i] = pos % k;
            pos += 1;
        }
    }
    Ok(FoldAssignment {
        k,
        fold_of,
        strata: labels.to_vec(),
        seed,
    })
}

/// Stratification labels for category vectors.
///
/// With negatives present the label is the any-category flag. Otherwise it is
/// the paragraph's set category that is most frequent over the whole corpus
/// (`NUM_CATEGORIES` for an empty vector); strata smaller than `k` are folded
/// into the largest one.
pub fn multilabel_strata(vectors: &[[u8; NUM_CATEGORIES]], include_negatives: bool, k: usize) -> Vec<usize> {
    if include_negatives {
        return vectors.iter().map(|v| usize::from(v.contains(&1))).collect();
    }
    let mut freq = [0usize; NUM_CATEGORIES];
    for v in vectors {
        for (c, &b) in v.iter().enumerate() {
            freq[c] += usize::from(b == 1);
        }
    }
    let mut strata: Vec<usize> = vectors
        .iter()
        .map(|v| {
            (0..NUM_CATEGORIES)
                .filter(|&c| v[c] == 1)
                .max_by(|&a, &b| freq[a].cmp(&freq[b]).then(b.cmp(&a)))
                .unwrap_or(NUM_CATEGORIES)
        })
        .collect();
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    strata.iter().for_each(|&s| *sizes.entry(s).or_default() += 1);
    if let Some((&largest, _)) = sizes.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))) {
        for s in strata.iter_mut() {
            if sizes[s] < k {
                *s = largest;
            }
        }
    }
    strata
}
