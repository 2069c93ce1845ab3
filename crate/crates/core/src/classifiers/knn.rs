use std::cmp::Ordering;

use ndarray::{Array2, ArrayView2, IxDyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::blob::Blob;
use super::{check_labels, check_query, squared_distance, FewShotClassifier, SupportSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KnnConfig {
    /// Number of neighbours that vote.
    pub k: usize,
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self { k: 1 }
    }
}

impl KnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::validation("knn.k must be at least 1"));
        }
        Ok(())
    }
}

/// Stores the support rows; prediction is a majority vote among the `k`
/// Euclidean-nearest rows.
#[derive(Debug, Clone)]
pub struct KnnModel {
    k: usize,
    features: Array2<f32>,
    labels: Vec<usize>,
    class_count: usize,
}

pub fn knn_fit(support: &SupportSet, k_nn: usize, class_count: usize) -> Result<KnnModel> {
    check_labels(support, class_count)?;
    if k_nn == 0 {
        return Err(Error::validation("k_nn must be at least 1"));
    }
    if k_nn > support.len() {
        return Err(Error::validation(format!(
            "k_nn = {k_nn} exceeds the support size {}",
            support.len()
        )));
    }
    Ok(KnnModel {
        k: k_nn,
        features: support.features.as_standard_layout().into_owned(),
        labels: support.labels.clone(),
        class_count,
    })
}

pub fn knn_predict(model: &KnnModel, query: ArrayView2<'_, f32>) -> Result<Vec<usize>> {
    check_query(&query, model.features.ncols())?;
    let rows: Vec<&[f32]> = model
        .features
        .outer_iter()
        .map(|r| r.to_slice().expect("standard layout"))
        .collect();
    let queries: Vec<Vec<f32>> = query.outer_iter().map(|q| q.to_vec()).collect();
    Ok(queries
        .par_iter()
        .map(|q| model.vote(rows.iter().map(|r| squared_distance(q, r)).collect()))
        .collect())
}

impl KnnModel {
    pub fn k(&self) -> usize {
        self.k
    }

    fn vote(&self, dist2: Vec<f64>) -> usize {
        let by_distance = |&a: &usize, &b: &usize| dist2[a].total_cmp(&dist2[b]).then(a.cmp(&b));
        let mut order: Vec<usize> = (0..dist2.len()).collect();
        if self.k < order.len() {
            order.select_nth_unstable_by(self.k - 1, by_distance);
            order.truncate(self.k);
        }
        let mut count = vec![0usize; self.class_count];
        let mut dist_sum = vec![0.0f64; self.class_count];
        for &i in &order {
            count[self.labels[i]] += 1;
            dist_sum[self.labels[i]] += dist2[i].sqrt();
        }
        (0..self.class_count)
            .filter(|&c| count[c] > 0)
            .min_by(|&a, &b| {
                count[b]
                    .cmp(&count[a])
                    .then_with(|| {
                        let ma = dist_sum[a] / count[a] as f64;
                        let mb = dist_sum[b] / count[b] as f64;
                        ma.partial_cmp(&mb).unwrap_or(Ordering::Equal)
                    })
                    .then(a.cmp(&b))
            })
            .expect("k ≥ 1 neighbours voted")
    }

    pub(crate) fn to_blob(&self) -> Blob {
        let mut b = Blob::new(json!({
            "kind": "knn",
            "config": {"k": self.k},
            "class_count": self.class_count,
        }));
        b.insert("features", self.features.mapv(f64::from).into_dyn());
        let labels = self.labels.iter().map(|&l| l as f64).collect();
        b.insert(
            "labels",
            ndarray::ArrayD::from_shape_vec(IxDyn(&[self.labels.len(), 1]), labels).expect("column"),
        );
        b
    }

    pub(crate) fn from_blob(b: &Blob) -> Result<Self> {
        let k = b.meta["config"]["k"].as_u64().ok_or_else(|| Error::format("knn blob", "missing k"))? as usize;
        let class_count = b.meta["class_count"]
            .as_u64()
            .ok_or_else(|| Error::format("knn blob", "missing class_count"))? as usize;
        let features = b.matrix("features")?.mapv(|v| v as f32);
        let labels = b.matrix("labels")?.iter().map(|&v| v as usize).collect();
        Ok(Self {
            k,
            features,
            labels,
            class_count,
        })
    }
}

impl FewShotClassifier for KnnModel {
    type Config = KnnConfig;

    /// Clamps `k` to the support size with a warning.
    fn fit(support: &SupportSet, class_count: usize, config: &KnnConfig, _seed: u64) -> Result<Self> {
        let mut k = config.k;
        if k > support.len() {
            log::warn!("k_nn = {k} exceeds the support size {}; clamping", support.len());
            k = support.len();
        }
        knn_fit(support, k, class_count)
    }

    fn predict(&self, query: ArrayView2<'_, f32>) -> Result<Vec<usize>> {
        knn_predict(self, query)
    }

    fn class_count(&self) -> usize {
        self.class_count
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Axis};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;

    use crate::classifiers::testutil::blobs;

    #[test]
    fn query_on_a_support_row_returns_its_label() {
        let s = SupportSet::originals(array![[0.0, 0.0], [5.0, 5.0], [9.0, 1.0]], vec![2, 0, 1]).unwrap();
        let m = knn_fit(&s, 1, 3).unwrap();
        assert_eq!(knn_predict(&m, array![[5.0, 5.0], [9.0, 1.0]].view()).unwrap(), [0, 1]);
    }

    #[test]
    fn equal_votes_and_distances_go_to_the_lower_class() {
        let s = SupportSet::originals(array![[1.0, 0.0], [-1.0, 0.0]], vec![3, 1]).unwrap();
        let m = knn_fit(&s, 2, 4).unwrap();
        assert_eq!(knn_predict(&m, array![[0.0, 0.0]].view()).unwrap(), [1]);
    }

    #[test]
    fn equal_votes_go_to_the_nearer_class_on_average() {
        let s = SupportSet::originals(array![[1.0], [-3.0], [10.0]], vec![3, 1, 1]).unwrap();
        let m = knn_fit(&s, 2, 4).unwrap();
        assert_eq!(knn_predict(&m, array![[0.0]].view()).unwrap(), [3]);
    }

    #[test]
    fn k_larger_than_support_is_rejected_by_fit_and_clamped_by_the_trait() {
        let s = SupportSet::originals(array![[0.0], [1.0]], vec![0, 1]).unwrap();
        assert!(matches!(knn_fit(&s, 3, 2), Err(Error::Validation(_))));
        let m = KnnModel::fit(&s, 2, &KnnConfig { k: 5 }, 0).unwrap();
        assert_eq!(m.k(), 2);
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let s = SupportSet::originals(array![[0.0, 1.0]], vec![0]).unwrap();
        let m = knn_fit(&s, 1, 1).unwrap();
        assert!(knn_predict(&m, array![[0.0]].view()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn invariant_under_support_permutation(seed in any::<u64>(), k in 1usize..6) {
            let s = blobs(4, 5, 3, 1.5, 2.0, seed);
            let q = blobs(4, 3, 3, 1.5, 2.0, seed ^ 5).features;
            let mut order: Vec<usize> = (0..s.len()).collect();
            order.shuffle(&mut crate::seed::rng(seed));
            let p = SupportSet::originals(
                s.features.select(Axis(0), &order),
                order.iter().map(|&i| s.labels[i]).collect(),
            ).unwrap();
            let a = knn_predict(&knn_fit(&s, k, 4).unwrap(), q.view()).unwrap();
            let b = knn_predict(&knn_fit(&p, k, 4).unwrap(), q.view()).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn unique_support_row_is_its_own_nearest_neighbour(seed in any::<u64>()) {
            let s = blobs(5, 3, 4, 1.0, 3.0, seed);
            let m = knn_fit(&s, 1, 5).unwrap();
            prop_assert_eq!(knn_predict(&m, s.features.view()).unwrap(), s.labels.clone());
        }
    }
}
