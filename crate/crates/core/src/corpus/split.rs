use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::LabeledGlyph;
use crate::error::{Error, Result};
use crate::seed;

/// Symbol-level train/test partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train_pool: Vec<String>,
    pub test_set: Vec<String>,
    pub seed: u64,
}

/// Stratified split: each class contributes `round(n·test_fraction)` glyphs
/// (at least one, at most `n − 1`) to the test set.
///
/// Both lists keep the input order of the glyphs.
pub fn stratified_split(glyphs: &[LabeledGlyph], test_fraction: f64, seed: u64) -> Result<CorpusSplit> {
    let ids: Vec<&str> = glyphs.iter().map(|g| g.glyph_id.as_str()).collect();
    let labels: Vec<usize> = glyphs.iter().map(|g| g.label).collect();
    split_labels(&ids, &labels, test_fraction, seed)
}

/// Same as [`stratified_split`] over parallel id/label slices.
pub fn split_labels(ids: &[&str], labels: &[usize], test_fraction: f64, seed: u64) -> Result<CorpusSplit> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::validation(format!("test_fraction must lie in (0, 1), got {test_fraction}")));
    }
    assert_eq!(ids.len(), labels.len());
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut in_test = vec![false; ids.len()];
    for (&class, members) in &by_class {
        let n = members.len();
        if n < 2 {
            return Err(Error::validation(format!(
                "class {class} has {n} sample(s); a stratified split needs at least 2"
            )));
        }
        let take = test_count(n, test_fraction);
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut seed::rng(seed::derive(seed, &[seed::stream::SPLIT, class as u64])));
        for &i in &shuffled[..take] {
            in_test[i] = true;
        }
    }
    let (mut train_pool, mut test_set) = (Vec::new(), Vec::new());
    for (i, id) in ids.iter().enumerate() {
        if in_test[i] {
            test_set.push((*id).to_owned());
        } else {
            train_pool.push((*id).to_owned());
        }
    }
    Ok(CorpusSplit {
        train_pool,
        test_set,
        seed,
    })
}

pub(crate) fn test_count(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
}
