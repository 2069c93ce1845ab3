//! Prototypical classification with a trainable adaptation stack.
//!
//! Features pass through fully connected layers; each class is represented
//! by the mean embedding of its support rows and queries go to the nearest
//! prototype in squared Euclidean distance. The stack is trained
//! episodically with a softmax over negative squared distances.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{check_labels, check_query, FewShotClassifier, SupportSet};
use crate::error::{Error, Result};
use crate::nn::{into_matrix, AdamW, AdamWConfig, Checkpoint, Linear, Relu, Sequential};
use crate::seed::{self, stream};

const NET_PREFIX: &str = "adapt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtoConfig {
    /// Widths of the fully connected adaptation layers, with ReLU between
    /// them. Empty means identity.
    pub adapt_widths: Vec<usize>,
    /// Support rows per class in each training episode (S).
    pub support_per_class: usize,
    /// Query rows per class in each training episode (Q).
    pub query_per_class: usize,
    pub episodes: usize,
    pub learning_rate: f64,
}

impl Default for ProtoConfig {
    fn default() -> Self {
        Self {
            adapt_widths: vec![512, 256],
            support_per_class: 1,
            query_per_class: 2,
            episodes: 1000,
            learning_rate: 1e-3,
        }
    }
}

impl ProtoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.support_per_class == 0 || self.query_per_class == 0 {
            return Err(Error::validation("proto support and query counts per class must be at least 1"));
        }
        if self.adapt_widths.contains(&0) {
            return Err(Error::validation("proto.adapt_widths must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::validation("proto.learning_rate must be positive"));
        }
        Ok(())
    }
}

/// Mean embedding per class `0..class_count`, one row per class.
pub fn compute_prototypes(embeddings: ArrayView2<'_, f64>, labels: &[usize], class_count: usize) -> Result<Array2<f64>> {
    if embeddings.nrows() != labels.len() {
        return Err(Error::validation(format!(
            "{} embeddings but {} labels",
            embeddings.nrows(),
            labels.len()
        )));
    }
    let mut sums = Array2::<f64>::zeros((class_count, embeddings.ncols()));
    let mut counts = vec![0usize; class_count];
    for (row, &l) in embeddings.outer_iter().zip(labels) {
        if l >= class_count {
            return Err(Error::validation(format!("label {l} outside {class_count} classes")));
        }
        let mut s = sums.row_mut(l);
        s += &row;
        counts[l] += 1;
    }
    for (c, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(Error::validation(format!("class {c} has no embeddings to average")));
        }
        sums.row_mut(c).mapv_inplace(|v| v / n as f64);
    }
    Ok(sums)
}

/// Index of the nearest prototype per query row; ties go to the lower index.
pub fn nearest_prototype(prototypes: ArrayView2<'_, f64>, query: ArrayView2<'_, f64>) -> Vec<usize> {
    query
        .outer_iter()
        .map(|q| {
            let mut best = (f64::INFINITY, 0);
            for (c, p) in prototypes.outer_iter().enumerate() {
                let d: f64 = q.iter().zip(p.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, c);
                }
            }
            best.1
        })
        .collect()
}

/// Episode loss: mean cross-entropy of `softmax(−‖q − p_c‖²)` over queries,
/// with prototypes from the support embeddings. Returns the loss and the
/// gradients with respect to the support and query embeddings.
pub fn prototype_loss_with_grad(
    support: ArrayView2<'_, f64>,
    support_labels: &[usize],
    query: ArrayView2<'_, f64>,
    query_labels: &[usize],
    class_count: usize,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let protos = compute_prototypes(support, support_labels, class_count)?;
    let nq = query.nrows() as f64;
    let mut counts = vec![0usize; class_count];
    for &l in support_labels {
        counts[l] += 1;
    }
    let mut loss = 0.0;
    let mut grad_query = Array2::zeros(query.raw_dim());
    let mut grad_protos = Array2::<f64>::zeros(protos.raw_dim());
    for ((qi, q), &y) in query.outer_iter().enumerate().zip(query_labels) {
        let diffs: Vec<_> = protos.outer_iter().map(|p| &q - &p).collect();
        let logits: Vec<f64> = diffs.iter().map(|d| -d.dot(d)).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exp.iter().sum();
        loss -= logits[y] - max - z.ln();
        for (c, d) in diffs.iter().enumerate() {
            let g = (exp[c] / z - if c == y { 1.0 } else { 0.0 }) / nq;
            let mut gq = grad_query.row_mut(qi);
            gq.scaled_add(-2.0 * g, d);
            let mut gp = grad_protos.row_mut(c);
            gp.scaled_add(2.0 * g, d);
        }
    }
    let mut grad_support = Array2::zeros(support.raw_dim());
    for (mut row, &l) in grad_support.outer_iter_mut().zip(support_labels) {
        row.assign(&(&grad_protos.row(l) / counts[l] as f64));
    }
    Ok((loss / nq, grad_support, grad_query))
}

fn build(input_dim: usize, widths: &[usize], seed: u64) -> Sequential<f32> {
    let mut rng = seed::rng(seed);
    let mut net = Sequential::new();
    let mut prev = input_dim;
    for (i, &w) in widths.iter().enumerate() {
        if i > 0 {
            net.push(Relu::new());
        }
        net.push(Linear::new(prev, w, &mut rng));
        prev = w;
    }
    net
}

fn embed(net: &Sequential<f32>, x: ArrayView2<'_, f32>) -> Array2<f64> {
    if net.is_empty() {
        return x.mapv(f64::from);
    }
    into_matrix(net.infer(x.to_owned().into_dyn())).mapv(f64::from)
}

/// Adaptation stack plus the prototypes of the set it was fitted on.
pub struct ProtoModel {
    config: ProtoConfig,
    class_count: usize,
    input_dim: usize,
    net: Sequential<f32>,
    support_features: Array2<f32>,
    support_labels: Vec<usize>,
    classes: Vec<usize>,
    prototypes: Array2<f64>,
}

impl std::fmt::Debug for ProtoModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProtoModel")
            .field("config", &self.config)
            .field("class_count", &self.class_count)
            .field("classes", &self.classes)
            .finish_non_exhaustive()
    }
}

/// Maps labels onto `0..classes.len()` for the classes present.
fn compact(labels: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut classes = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let local = labels
        .iter()
        .map(|l| classes.binary_search(l).expect("present"))
        .collect();
    (classes, local)
}

/// Trains the adaptation stack on episodes drawn from `pool`: every episode
/// takes S support and Q query rows from each class present.
pub fn proto_fit(pool: &SupportSet, class_count: usize, config: &ProtoConfig, seed: u64) -> Result<ProtoModel> {
    check_labels(pool, class_count)?;
    config.validate()?;
    let (classes, local) = compact(&pool.labels);
    let (s, q) = (config.support_per_class, config.query_per_class);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes.len()];
    for (i, &c) in local.iter().enumerate() {
        by_class[c].push(i);
    }
    for (c, rows) in by_class.iter().enumerate() {
        if rows.len() < s + q {
            return Err(Error::validation(format!(
                "class {} has {} samples, fewer than S + Q = {}",
                classes[c],
                rows.len(),
                s + q
            )));
        }
    }

    let input_dim = pool.dim();
    let mut net = build(input_dim, &config.adapt_widths, seed::derive(seed, &[stream::CLASSIFIER, 0]));
    let mut opt = AdamW::new(AdamWConfig {
        learning_rate: config.learning_rate,
        ..Default::default()
    });
    let n_way = classes.len();
    let mut noop = seed::rng(0);
    if !net.is_empty() {
        for episode in 0..config.episodes {
            let mut rng = seed::rng(seed::derive(seed, &[stream::EPISODE, episode as u64]));
            let mut rows = Vec::with_capacity(n_way * (s + q));
            let mut query_rows = Vec::with_capacity(n_way * q);
            for members in &by_class {
                let mut m = members.clone();
                m.shuffle(&mut rng);
                rows.extend_from_slice(&m[..s]);
                query_rows.extend_from_slice(&m[s..s + q]);
            }
            rows.extend_from_slice(&query_rows);
            let x = pool.features.select(Axis(0), &rows).into_dyn();
            let emb = into_matrix(net.forward(x, &mut noop)).mapv(f64::from);
            let ns = n_way * s;
            let s_labels: Vec<usize> = rows[..ns].iter().map(|&i| local[i]).collect();
            let q_labels: Vec<usize> = rows[ns..].iter().map(|&i| local[i]).collect();
            let (loss, gs, gq) = prototype_loss_with_grad(
                emb.slice(ndarray::s![..ns, ..]),
                &s_labels,
                emb.slice(ndarray::s![ns.., ..]),
                &q_labels,
                n_way,
            )?;
            if !loss.is_finite() {
                net.clear_cache();
                return Err(Error::numerical(format!(
                    "non-finite prototypical loss {loss} at episode {episode}"
                )));
            }
            let grad = ndarray::concatenate(Axis(0), &[gs.view(), gq.view()]).expect("same width");
            net.zero_grad();
            net.backward(grad.mapv(|v| v as f32).into_dyn());
            opt.step(net.named_params_mut(NET_PREFIX));
        }
    }
    net.clear_cache();
    ProtoModel::with_support(config.clone(), class_count, input_dim, net, pool)
}

/// Embeds `support` and `query` with the fitted stack and assigns each
/// query the class of its nearest prototype.
pub fn proto_predict(model: &ProtoModel, support: &SupportSet, query: ArrayView2<'_, f32>) -> Result<Vec<usize>> {
    check_labels(support, model.class_count)?;
    check_query(&query, model.input_dim)?;
    check_query(&support.features.view(), model.input_dim)?;
    let (classes, local) = compact(&support.labels);
    let protos = compute_prototypes(embed(&model.net, support.features.view()).view(), &local, classes.len())?;
    let nearest = nearest_prototype(protos.view(), embed(&model.net, query).view());
    Ok(nearest.into_iter().map(|c| classes[c]).collect())
}

impl ProtoModel {
    fn with_support(
        config: ProtoConfig,
        class_count: usize,
        input_dim: usize,
        net: Sequential<f32>,
        support: &SupportSet,
    ) -> Result<Self> {
        let (classes, local) = compact(&support.labels);
        let prototypes = compute_prototypes(embed(&net, support.features.view()).view(), &local, classes.len())?;
        Ok(Self {
            config,
            class_count,
            input_dim,
            net,
            support_features: support.features.clone(),
            support_labels: support.labels.clone(),
            classes,
            prototypes,
        })
    }

    /// Identity adaptation: prototypes are plain feature means.
    pub fn identity(support: &SupportSet, class_count: usize) -> Result<Self> {
        check_labels(support, class_count)?;
        let config = ProtoConfig {
            adapt_widths: Vec::new(),
            ..Default::default()
        };
        Self::with_support(config, class_count, support.dim(), Sequential::new(), support)
    }

    pub fn prototypes(&self) -> (&[usize], &Array2<f64>) {
        (&self.classes, &self.prototypes)
    }

    pub(crate) fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(json!({
            "kind": "proto",
            "config": self.config,
            "class_count": self.class_count,
            "input_dim": self.input_dim,
            "support_labels": self.support_labels,
        }));
        ck.insert_sequential(&self.net, NET_PREFIX);
        ck.insert("support_features", &self.support_features.clone().into_dyn());
        ck
    }

    pub(crate) fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let bad = |what: &str| Error::format("proto checkpoint", format!("missing {what}"));
        let config: ProtoConfig = serde_json::from_value(ck.meta["config"].clone()).map_err(|_| bad("config"))?;
        let class_count = ck.meta["class_count"].as_u64().ok_or_else(|| bad("class_count"))? as usize;
        let input_dim = ck.meta["input_dim"].as_u64().ok_or_else(|| bad("input_dim"))? as usize;
        let labels: Vec<usize> =
            serde_json::from_value(ck.meta["support_labels"].clone()).map_err(|_| bad("support_labels"))?;
        let mut net = build(input_dim, &config.adapt_widths, 0);
        ck.load_sequential(&mut net, NET_PREFIX)?;
        let features = ck
            .get::<f32>("support_features")
            .ok_or_else(|| bad("support_features"))?
            .into_dimensionality()
            .map_err(|_| bad("support feature matrix"))?;
        let support = SupportSet::originals(features, labels)?;
        Self::with_support(config, class_count, input_dim, net, &support)
    }
}

impl FewShotClassifier for ProtoModel {
    type Config = ProtoConfig;

    /// Episodic training on the support set, then prototypes of the whole
    /// support set.
    fn fit(support: &SupportSet, class_count: usize, config: &ProtoConfig, seed: u64) -> Result<Self> {
        proto_fit(support, class_count, config, seed)
    }

    fn predict(&self, query: ArrayView2<'_, f32>) -> Result<Vec<usize>> {
        check_query(&query, self.input_dim)?;
        let nearest = nearest_prototype(self.prototypes.view(), embed(&self.net, query).view());
        Ok(nearest.into_iter().map(|c| self.classes[c]).collect())
    }

    fn class_count(&self) -> usize {
        self.class_count
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifiers::testutil::blobs;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn random(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = seed::rng(seed);
        Array2::from_shape_fn((n, d), |_| rng.random_range(-3.0..3.0))
    }

    #[test]
    fn singleton_and_midpoint_prototypes() {
        let e = array![[1.0, 2.0], [0.0, 0.0], [2.0, 2.0]];
        let p = compute_prototypes(e.view(), &[0, 1, 1], 2).unwrap();
        assert_eq!(p, array![[1.0, 2.0], [1.0, 1.0]]);
        assert!(matches!(
            compute_prototypes(e.view(), &[0, 0, 0], 2),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn identity_head_puts_a_support_point_in_its_own_class() {
        let s = SupportSet::originals(array![[0.0f32, 0.0], [10.0, 10.0]], vec![0, 1]).unwrap();
        let m = ProtoModel::identity(&s, 2).unwrap();
        assert_eq!(m.predict(array![[10.0f32, 10.0]].view()).unwrap(), [1]);
        assert_eq!(proto_predict(&m, &s, array![[0.1f32, -0.2]].view()).unwrap(), [0]);
    }

    #[test]
    fn distant_wrong_prototype_gives_a_finite_loss() {
        let s = array![[0.0, 0.0], [100.0, 0.0]];
        let q = array![[100.0, 0.0]];
        let (loss, gs, gq) = prototype_loss_with_grad(s.view(), &[0, 1], q.view(), &[0], 2).unwrap();
        assert!((loss - 10_000.0).abs() < 1e-9, "{loss}");
        assert!(gs.iter().chain(gq.iter()).all(|v| v.is_finite()));
    }

    #[test]
    fn distance_ties_go_to_the_lower_class() {
        let p = array![[1.0, 0.0], [-1.0, 0.0]];
        assert_eq!(nearest_prototype(p.view(), array![[0.0, 5.0]].view()), [0]);
    }

    #[test]
    fn episode_loss_gradient_matches_finite_differences() {
        let s = random(6, 4, 1);
        let q = random(5, 4, 2);
        let sl = [0, 1, 2, 0, 1, 2];
        let ql = [2, 0, 1, 1, 0];
        let (_, gs, gq) = prototype_loss_with_grad(s.view(), &sl, q.view(), &ql, 3).unwrap();
        let loss = |s: &Array2<f64>, q: &Array2<f64>| prototype_loss_with_grad(s.view(), &sl, q.view(), &ql, 3).unwrap().0;
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for (target, grad) in [(0, &gs), (1, &gq)] {
            for idx in ndarray::indices(grad.raw_dim()) {
                let (mut sp, mut sm, mut qp, mut qm) = (s.clone(), s.clone(), q.clone(), q.clone());
                if target == 0 {
                    sp[idx] += h;
                    sm[idx] -= h;
                } else {
                    qp[idx] += h;
                    qm[idx] -= h;
                }
                let fd = (loss(&sp, &qp) - loss(&sm, &qm)) / (2.0 * h);
                worst = worst.max((fd - grad[idx]).abs() / fd.abs().max(grad[idx].abs()).max(1e-6));
            }
        }
        assert!(worst < 1e-5, "relative error {worst}");
    }

    #[test]
    fn clustered_data_is_classified_perfectly_after_fitting() {
        let pool = blobs(4, 6, 12, 0.05, 3.0, 7);
        let cfg = ProtoConfig {
            adapt_widths: vec![16, 8],
            episodes: 100,
            support_per_class: 2,
            query_per_class: 3,
            ..Default::default()
        };
        let m = proto_fit(&pool, 4, &cfg, 1).unwrap();
        let test = blobs(4, 10, 12, 0.05, 3.0, 7);
        assert_eq!(m.predict(test.features.view()).unwrap(), test.labels);
    }

    #[test]
    fn short_class_is_named_in_the_error() {
        let mut pool = blobs(3, 3, 4, 0.1, 1.0, 2);
        pool.labels[0] = 1;
        let cfg = ProtoConfig {
            support_per_class: 1,
            query_per_class: 2,
            ..Default::default()
        };
        let err = proto_fit(&pool, 3, &cfg, 0).unwrap_err();
        assert!(err.to_string().contains("class 0"), "{err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn prototypes_are_linear(seed in any::<u64>(), a in -4.0f64..4.0) {
            let e = random(9, 3, seed);
            let labels: Vec<usize> = (0..9).map(|i| i % 3).collect();
            let p = compute_prototypes(e.view(), &labels, 3).unwrap();
            let scaled = compute_prototypes((&e * a).view(), &labels, 3).unwrap();
            for (x, y) in scaled.iter().zip(p.iter()) {
                prop_assert!((x - a * y).abs() <= 1e-9 * (1.0 + y.abs()));
            }
        }

        #[test]
        fn nearest_prototype_is_translation_invariant(seed in any::<u64>(), shift in -10.0f64..10.0) {
            let p = random(5, 4, seed);
            let q = random(7, 4, !seed);
            let a = nearest_prototype(p.view(), q.view());
            let b = nearest_prototype((&p + shift).view(), (&q + shift).view());
            prop_assert_eq!(a, b);
        }

        #[test]
        fn invariant_under_support_permutation(seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let s = blobs(3, 4, 5, 1.0, 1.0, seed);
            let mut order: Vec<usize> = (0..s.len()).collect();
            order.shuffle(&mut seed::rng(seed));
            let p = SupportSet::originals(
                s.features.select(Axis(0), &order),
                order.iter().map(|&i| s.labels[i]).collect(),
            ).unwrap();
            let q = blobs(3, 3, 5, 1.0, 1.0, seed ^ 3).features;
            let a = ProtoModel::identity(&s, 3).unwrap().predict(q.view()).unwrap();
            let b = ProtoModel::identity(&p, 3).unwrap().predict(q.view()).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
