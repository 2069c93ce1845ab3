//! Published mean accuracies (percent) for the Capitan corpus, used as
//! reference values in reports.
//!
//! Columns follow [`AUGMENTATIONS`]; rows follow [`SAMPLES_PER_CLASS`] or,
//! for the prototypical head, [`SUPPORT_QUERY`].

use crate::classifiers::ClassifierKind;

pub const AUGMENTATIONS: [usize; 6] = [0, 1, 2, 5, 10, 20];
pub const SAMPLES_PER_CLASS: [usize; 4] = [1, 3, 5, 10];
pub const SUPPORT_QUERY: [(usize, usize); 3] = [(1, 2), (2, 3), (6, 4)];

/// Prior-work kNN baseline per samples-per-class row (no augmentation).
pub const KNN_BASELINE: [Option<f64>; 4] = [Some(67.2), None, Some(82.0), Some(86.9)];

pub const KNN: [[f64; 6]; 4] = [
    [60.7, 64.0, 65.5, 65.1, 61.6, 65.1],
    [77.1, 76.8, 77.9, 77.4, 77.0, 76.3],
    [79.8, 81.4, 81.6, 81.4, 81.9, 81.9],
    [86.1, 85.9, 86.5, 87.5, 87.7, 87.3],
];

pub const SVM: [[f64; 6]; 4] = [
    [61.12, 64.11, 65.20, 64.59, 61.19, 63.86],
    [79.90, 79.68, 81.08, 80.22, 78.96, 79.30],
    [84.78, 84.64, 85.44, 87.14, 86.11, 84.78],
    [90.62, 90.49, 90.28, 91.22, 91.40, 90.64],
];

pub const MLP: [[f64; 6]; 4] = [
    [62.19, 62.56, 63.11, 64.92, 64.65, 64.24],
    [81.06, 81.69, 81.91, 81.18, 81.65, 82.54],
    [86.79, 86.67, 86.48, 85.92, 87.66, 86.44],
    [91.95, 90.78, 91.81, 91.59, 91.64, 92.34],
];

pub const PROTO: [[f64; 6]; 3] = [
    [75.96, 75.44, 77.40, 75.06, 73.43, 68.68],
    [84.48, 84.02, 82.50, 77.87, 80.51, 81.32],
    [84.48, 88.71, 88.68, 87.50, 90.11, 86.35],
];

/// Published value for a cell, if one was published. `row` is the
/// samples per class, or `(S, Q)` for the prototypical head.
pub fn published(kind: ClassifierKind, row: (usize, Option<usize>), augmentations: usize) -> Option<f64> {
    let col = AUGMENTATIONS.iter().position(|&a| a == augmentations)?;
    match (kind, row.1) {
        (ClassifierKind::Proto, Some(q)) => {
            let r = SUPPORT_QUERY.iter().position(|&sq| sq == (row.0, q))?;
            Some(PROTO[r][col])
        }
        (ClassifierKind::Proto, None) => None,
        (_, Some(_)) => None,
        (kind, None) => {
            let r = SAMPLES_PER_CLASS.iter().position(|&k| k == row.0)?;
            let table = match kind {
                ClassifierKind::Knn => &KNN,
                ClassifierKind::Svm => &SVM,
                ClassifierKind::Mlp => &MLP,
                ClassifierKind::Proto => unreachable!(),
            };
            Some(table[r][col])
        }
    }
}

pub fn knn_baseline(samples_per_class: usize) -> Option<f64> {
    let r = SAMPLES_PER_CLASS.iter().position(|&k| k == samples_per_class)?;
    KNN_BASELINE[r]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn headline_values() {
        assert_eq!(published(ClassifierKind::Mlp, (5, None), 10), Some(87.66));
        assert_eq!(published(ClassifierKind::Mlp, (10, None), 0), Some(91.95));
        assert_eq!(published(ClassifierKind::Proto, (1, Some(2)), 0), Some(75.96));
        assert_eq!(published(ClassifierKind::Proto, (1, Some(2)), 20), Some(68.68));
        assert_eq!(knn_baseline(5), Some(82.0));
        assert_eq!(knn_baseline(3), None);
        assert_eq!(published(ClassifierKind::Svm, (2, None), 0), None);
    }
}
