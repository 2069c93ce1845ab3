//! N-way-K-shot evaluation: support sampling, support augmentation through
//! the frozen encoder, bootstrapped episodes, accuracy grids, augmentation
//! series and confusion reports.
//!
//! Every episode uses all classes of the vocabulary and queries the full
//! held-out test partition. Seeds are derived from values (bootstrap index,
//! samples per class, augmentation count, classifier), so a cell computed
//! inside a grid equals the same cell computed on its own.

mod confusion;
mod grid;
pub mod reference;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use ndarray::{concatenate, Array2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_support, AugmentationPipeline};
use crate::classifiers::{ClassifierKind, ClassifierParams, Provenance, SupportSet, TrainedClassifier};
use crate::corpus::{CorpusSplit, FeatureRecord};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::imaging::Crop;
use crate::seed::{self, stream};

pub use confusion::{confusion_csv, confusion_report, parse_confusion_csv, ConfusionReport};
pub use grid::{
    augmentation_effect_series, grid_csv, parse_grid_csv, render_table, results_grid, run_records, CellOutcome,
    GridCsvRow, ResultsGrid, RunRecord, GRID_CSV_HEADER,
};

/// A grid row: samples per class, or a support/query split for the
/// prototypical head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum RowKey {
    Shots(usize),
    Split { support: usize, query: usize },
}

impl RowKey {
    /// Original support samples drawn per class.
    pub fn per_class(self) -> usize {
        match self {
            RowKey::Shots(k) => k,
            RowKey::Split { support, query } => support + query,
        }
    }

    pub fn as_pair(self) -> (usize, Option<usize>) {
        match self {
            RowKey::Shots(k) => (k, None),
            RowKey::Split { support, query } => (support, Some(query)),
        }
    }
}

impl fmt::Display for RowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RowKey::Shots(k) => write!(f, "{k}"),
            RowKey::Split { support, query } => write!(f, "{support}/{query}"),
        }
    }
}

impl FromStr for RowKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::validation(format!("bad row key {s:?}: expected K or S/Q"));
        let s = s.trim();
        match s.split_once('/') {
            Some((a, b)) => Ok(RowKey::Split {
                support: a.trim().parse().map_err(|_| bad())?,
                query: b.trim().parse().map_err(|_| bad())?,
            }),
            None => Ok(RowKey::Shots(s.parse().map_err(|_| bad())?)),
        }
    }
}

impl From<RowKey> for String {
    fn from(r: RowKey) -> String {
        r.to_string()
    }
}

impl TryFrom<String> for RowKey {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    /// Original support samples per class.
    pub k: usize,
    /// Augmented copies per original support crop.
    pub a: usize,
    pub classifier: ClassifierKind,
    /// `(S, Q)` for the prototypical head, with `S + Q = k`.
    pub proto_split: Option<(usize, usize)>,
    pub n_bootstraps: usize,
    pub seed: u64,
}

impl EpisodeSpec {
    pub fn new(row: RowKey, a: usize, classifier: ClassifierKind, n_bootstraps: usize, seed: u64) -> Self {
        let proto_split = match row {
            RowKey::Split { support, query } => Some((support, query)),
            RowKey::Shots(_) => None,
        };
        Self {
            k: row.per_class(),
            a,
            classifier,
            proto_split,
            n_bootstraps,
            seed,
        }
    }

    pub fn row(&self) -> RowKey {
        match self.proto_split {
            Some((support, query)) => RowKey::Split { support, query },
            None => RowKey::Shots(self.k),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::validation("K must be at least 1"));
        }
        if self.n_bootstraps == 0 {
            return Err(Error::validation("n_bootstraps must be at least 1"));
        }
        match (self.classifier, self.proto_split) {
            (ClassifierKind::Proto, None) => Err(Error::validation("the prototypical head needs an S/Q split")),
            (ClassifierKind::Proto, Some((s, q))) if s == 0 || q == 0 || s + q != self.k => Err(
                Error::validation(format!("S/Q split {s}/{q} is inconsistent with K = {}", self.k)),
            ),
            (kind, Some(_)) if kind != ClassifierKind::Proto => {
                Err(Error::validation(format!("an S/Q split only applies to proto, not {kind}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// `trace(confusion) / sum(confusion)`.
    pub accuracy: f64,
    /// Rows are true classes, columns predicted classes.
    pub confusion: Vec<Vec<u64>>,
    pub per_bootstrap_accuracies: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation of the per-bootstrap accuracies.
    pub std: f64,
}

impl EvalResult {
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Self {
        let accuracy = confusion_accuracy(&confusion);
        Self {
            accuracy,
            confusion,
            per_bootstrap_accuracies: vec![accuracy],
            mean: accuracy,
            std: 0.0,
        }
    }
}

fn confusion_accuracy(confusion: &[Vec<u64>]) -> f64 {
    let total: u64 = confusion.iter().flatten().sum();
    let trace: u64 = confusion.iter().enumerate().map(|(i, r)| r[i]).sum();
    if total == 0 {
        0.0
    } else {
        trace as f64 / total as f64
    }
}

/// Combines bootstrap results: per-bootstrap list, mean, population std and
/// the element-wise sum of the confusion matrices.
pub fn aggregate(results: &[EvalResult]) -> Result<EvalResult> {
    let first = results.first().ok_or_else(|| Error::validation("no bootstrap results to aggregate"))?;
    let c = first.confusion.len();
    let mut confusion = vec![vec![0u64; c]; c];
    let mut accs = Vec::with_capacity(results.len());
    for r in results {
        if r.confusion.len() != c {
            return Err(Error::validation("bootstrap confusion matrices differ in size"));
        }
        for (acc_row, row) in confusion.iter_mut().zip(&r.confusion) {
            for (a, v) in acc_row.iter_mut().zip(row) {
                *a += v;
            }
        }
        accs.extend_from_slice(&r.per_bootstrap_accuracies);
    }
    let n = accs.len() as f64;
    let mean = accs.iter().sum::<f64>() / n;
    let std = (accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n).sqrt();
    Ok(EvalResult {
        accuracy: confusion_accuracy(&confusion),
        confusion,
        per_bootstrap_accuracies: accs,
        mean,
        std,
    })
}

/// Glyph-indexed feature matrix with labels.
#[derive(Debug, Clone)]
pub struct FeatureTable {
    ids: Vec<String>,
    labels: Vec<usize>,
    features: Array2<f32>,
    index: HashMap<String, usize>,
}

impl FeatureTable {
    pub fn new(ids: Vec<String>, labels: Vec<usize>, features: Array2<f32>) -> Result<Self> {
        if ids.len() != labels.len() || ids.len() != features.nrows() {
            return Err(Error::validation("feature table ids, labels and rows differ in count"));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::validation(format!("duplicate glyph id {id:?} in feature table")));
            }
        }
        Ok(Self {
            ids,
            labels,
            features,
            index,
        })
    }

    /// Joins feature records with labels by glyph id.
    pub fn from_records(records: &[FeatureRecord], labels: &HashMap<String, usize>) -> Result<Self> {
        let dim = records.first().map_or(0, |r| r.vector.len());
        let mut data = Vec::with_capacity(records.len() * dim);
        let mut ids = Vec::with_capacity(records.len());
        let mut labs = Vec::with_capacity(records.len());
        for r in records {
            if r.vector.len() != dim {
                return Err(Error::validation(format!("record {:?} has width {}", r.glyph_id, r.vector.len())));
            }
            let label = *labels
                .get(&r.glyph_id)
                .ok_or_else(|| Error::validation(format!("feature record {:?} has no label", r.glyph_id)))?;
            data.extend_from_slice(&r.vector);
            ids.push(r.glyph_id.clone());
            labs.push(label);
        }
        let features = Array2::from_shape_vec((ids.len(), dim), data).expect("sizes agree");
        Self::new(ids, labs, features)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn label(&self, id: &str) -> Option<usize> {
        self.index.get(id).map(|&i| self.labels[i])
    }

    fn positions(&self, ids: &[String]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| {
                self.index
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::validation(format!("no features for glyph {id:?}")))
            })
            .collect()
    }

    /// Feature rows and labels for `ids`, in order.
    pub fn rows(&self, ids: &[String]) -> Result<(Array2<f32>, Vec<usize>)> {
        let pos = self.positions(ids)?;
        Ok((self.features.select(Axis(0), &pos), pos.iter().map(|&i| self.labels[i]).collect()))
    }
}

/// Original support rows together with their glyph ids.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledSupport {
    pub glyph_ids: Vec<String>,
    pub set: SupportSet,
}

/// Draws exactly `k` pool glyphs per class without replacement, class by
/// class in vocabulary order.
pub fn sample_support(
    table: &FeatureTable,
    pool: &[String],
    class_names: &[String],
    k: usize,
    seed: u64,
) -> Result<SampledSupport> {
    if k == 0 {
        return Err(Error::validation("K must be at least 1"));
    }
    let mut by_class: Vec<Vec<&String>> = vec![Vec::new(); class_names.len()];
    for id in pool {
        let label = table
            .label(id)
            .ok_or_else(|| Error::validation(format!("no features for pool glyph {id:?}")))?;
        by_class
            .get_mut(label)
            .ok_or_else(|| Error::validation(format!("label {label} outside the vocabulary")))?
            .push(id);
    }
    let mut ids = Vec::with_capacity(k * class_names.len());
    for (c, members) in by_class.iter_mut().enumerate() {
        if members.len() < k {
            return Err(Error::validation(format!(
                "class {:?} has {} training samples, fewer than K = {k}",
                class_names[c],
                members.len()
            )));
        }
        members.shuffle(&mut seed::rng(seed::derive(seed, &[c as u64])));
        ids.extend(members[..k].iter().map(|s| (*s).clone()));
    }
    let (features, labels) = table.rows(&ids)?;
    Ok(SampledSupport {
        glyph_ids: ids,
        set: SupportSet::originals(features, labels)?,
    })
}

/// Encoded augmented copies, `copies` rows per original support row.
fn encode_copies(
    sampled: &SampledSupport,
    copies: usize,
    crops: &HashMap<String, Crop>,
    pipeline: &AugmentationPipeline,
    encoder: &Encoder,
    seed: u64,
) -> Result<Vec<Array2<f32>>> {
    sampled
        .glyph_ids
        .par_iter()
        .enumerate()
        .map(|(j, id)| {
            let crop = crops.get(id).ok_or_else(|| {
                Error::io(
                    PathBuf::from(id),
                    std::io::Error::new(std::io::ErrorKind::NotFound, "no source crop for support glyph"),
                )
            })?;
            let aug = augment_support(crop, copies, pipeline, seed::derive(seed, &[j as u64]))?;
            encoder.forward(&aug)
        })
        .collect()
}

fn assemble(sampled: &SampledSupport, per_row: &[Array2<f32>], a: usize) -> Result<SupportSet> {
    let base = &sampled.set;
    let mut blocks = vec![base.features.view()];
    let mut labels = base.labels.clone();
    let mut provenance = base.provenance.clone();
    for (j, copies) in per_row.iter().enumerate() {
        blocks.push(copies.slice(ndarray::s![..a, ..]));
        labels.extend(std::iter::repeat(base.labels[j]).take(a));
        provenance.extend(std::iter::repeat(Provenance::Augmented).take(a));
    }
    let features = concatenate(Axis(0), &blocks).map_err(|e| Error::validation(e.to_string()))?;
    SupportSet::new(features, labels, provenance)
}

/// Appends `a` augmented, encoded copies of every original support row.
/// Output order: the originals, then the copies of row 0, row 1, ...
pub fn build_augmented_support(
    sampled: &SampledSupport,
    a: usize,
    crops: &HashMap<String, Crop>,
    pipeline: &AugmentationPipeline,
    encoder: &Encoder,
    seed: u64,
) -> Result<SupportSet> {
    if a == 0 {
        return Ok(sampled.set.clone());
    }
    let per_row = encode_copies(sampled, a, crops, pipeline, encoder, seed)?;
    assemble(sampled, &per_row, a)
}

type CacheKey = (usize, usize);

/// Everything an episode needs besides its spec.
pub struct EvalContext<'a> {
    pub class_names: &'a [String],
    pub split: &'a CorpusSplit,
    pub features: &'a FeatureTable,
    pub crops: &'a HashMap<String, Crop>,
    /// Required when any cell uses augmentation.
    pub encoder: Option<&'a Encoder>,
    pub pipeline: &'a AugmentationPipeline,
    pub params: &'a ClassifierParams,
    /// Encoded copies keyed by (samples per class, bootstrap); copies for a
    /// smaller count are a prefix of those for a larger one.
    cache: Mutex<HashMap<CacheKey, Arc<(usize, Vec<Array2<f32>>)>>>,
}

impl<'a> EvalContext<'a> {
    pub fn new(
        class_names: &'a [String],
        split: &'a CorpusSplit,
        features: &'a FeatureTable,
        crops: &'a HashMap<String, Crop>,
        encoder: Option<&'a Encoder>,
        pipeline: &'a AugmentationPipeline,
        params: &'a ClassifierParams,
    ) -> Self {
        Self {
            class_names,
            split,
            features,
            crops,
            encoder,
            pipeline,
            params,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    fn augmented(&self, sampled: &SampledSupport, a: usize, key: CacheKey, seed: u64) -> Result<SupportSet> {
        if a == 0 {
            return Ok(sampled.set.clone());
        }
        let encoder = self
            .encoder
            .ok_or_else(|| Error::validation("augmented cells need an encoder checkpoint"))?;
        let cached = self.cache.lock().expect("cache lock").get(&key).cloned();
        let entry = match cached {
            Some(e) if e.0 >= a => e,
            _ => {
                let copies = encode_copies(sampled, a, self.crops, self.pipeline, encoder, seed)?;
                let e = Arc::new((a, copies));
                let mut cache = self.cache.lock().expect("cache lock");
                let slot = cache.entry(key).or_insert_with(|| e.clone());
                if slot.0 < a {
                    *slot = e.clone();
                }
                e
            }
        };
        assemble(sampled, &entry.1, a)
    }
}

fn episode_context(spec: &EpisodeSpec, bootstrap: usize) -> String {
    format!(
        "episode {} K={} A={} bootstrap {bootstrap}",
        spec.classifier,
        spec.row(),
        spec.a
    )
}

/// One bootstrap: sample, augment, fit, predict the whole test partition.
pub fn run_episode(spec: &EpisodeSpec, ctx: &EvalContext<'_>, bootstrap: usize) -> Result<EvalResult> {
    spec.validate()?;
    run_episode_inner(spec, ctx, bootstrap).map_err(|e| e.context(episode_context(spec, bootstrap)))
}

fn run_episode_inner(spec: &EpisodeSpec, ctx: &EvalContext<'_>, bootstrap: usize) -> Result<EvalResult> {
    let bseed = seed::derive(spec.seed, &[stream::BOOTSTRAP, bootstrap as u64]);
    let k = spec.k as u64;
    let sampled = sample_support(
        ctx.features,
        &ctx.split.train_pool,
        ctx.class_names,
        spec.k,
        seed::derive(bseed, &[stream::SUPPORT, k]),
    )?;
    let support = ctx.augmented(
        &sampled,
        spec.a,
        (spec.k, bootstrap),
        seed::derive(bseed, &[stream::AUGMENT, k]),
    )?;

    let test_ids: HashSet<&String> = ctx.split.test_set.iter().collect();
    if let Some(leak) = sampled.glyph_ids.iter().find(|id| test_ids.contains(id)) {
        return Err(Error::validation(format!("support glyph {leak:?} is in the test partition")));
    }
    let (query, truth) = ctx.features.rows(&ctx.split.test_set)?;

    let mut params = ctx.params.clone();
    if let Some((s, q)) = spec.proto_split {
        params.proto.support_per_class = s;
        params.proto.query_per_class = q;
    }
    let kind_tag = ClassifierKind::ALL.iter().position(|&c| c == spec.classifier).expect("known") as u64;
    let clf_seed = seed::derive(bseed, &[stream::CLASSIFIER, kind_tag, k, spec.a as u64]);
    let clf = TrainedClassifier::fit(spec.classifier, &support, ctx.class_count(), &params, clf_seed)?;
    let pred = clf.predict(query.view())?;

    let c = ctx.class_count();
    let mut confusion = vec![vec![0u64; c]; c];
    for (&t, &p) in truth.iter().zip(&pred) {
        confusion[t][p] += 1;
    }
    Ok(EvalResult::from_confusion(confusion))
}

/// Runs bootstraps `0..n_bootstraps` and aggregates them.
pub fn bootstrap_evaluate(spec: &EpisodeSpec, ctx: &EvalContext<'_>) -> Result<EvalResult> {
    spec.validate()?;
    let results: Vec<EvalResult> = (0..spec.n_bootstraps)
        .into_par_iter()
        .map(|b| run_episode(spec, ctx, b))
        .collect::<Result<_>>()?;
    aggregate(&results)
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use image::{Rgb, RgbImage};

    /// Three visually distinct shapes with mild pixel noise.
    pub fn shape_crop(class: usize, variant: u64) -> Crop {
        let mut rng = seed::rng(variant);
        use rand::Rng;
        let r = 12 + (variant % 5) as i64;
        RgbImage::from_fn(64, 64, |x, y| {
            let (dx, dy) = (x as i64 - 32, y as i64 - 32);
            let on = match class % 3 {
                0 => dx * dx + dy * dy < r * r,
                1 => dx.abs() < r && dy.abs() < 3,
                _ => dx.abs() < 3 && dy.abs() < r,
            };
            let base: i32 = if on { 30 } else { 220 };
            let v = (base + rng.random_range(-10..=10)).clamp(0, 255) as u8;
            Rgb([v, v, v])
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::split_labels;
    use crate::encoder::EncoderConfig;

    struct Fixture {
        names: Vec<String>,
        split: CorpusSplit,
        table: FeatureTable,
        crops: HashMap<String, Crop>,
        encoder: Encoder,
    }

    fn fixture(per_class: usize) -> Fixture {
        let names: Vec<String> = ["circle", "hbar", "vbar"].iter().map(|s| s.to_string()).collect();
        let encoder = Encoder::new(
            EncoderConfig {
                channels: 1,
                expander_dims: vec![8],
            },
            1,
        )
        .unwrap();
        let mut ids = Vec::new();
        let mut labels = Vec::new();
        let mut crops = HashMap::new();
        for i in 0..per_class * 3 {
            let id = format!("g{i:03}");
            crops.insert(id.clone(), testutil::shape_crop(i % 3, i as u64));
            ids.push(id);
            labels.push(i % 3);
        }
        let ordered: Vec<Crop> = ids.iter().map(|id| crops[id].clone()).collect();
        let features = encoder.forward(&ordered).unwrap();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let split = split_labels(&refs, &labels, 0.3, 4).unwrap();
        let table = FeatureTable::new(ids, labels, features).unwrap();
        Fixture {
            names,
            split,
            table,
            crops,
            encoder,
        }
    }

    #[test]
    fn support_counts_and_determinism() {
        let f = fixture(12);
        let s = sample_support(&f.table, &f.split.train_pool, &f.names, 5, 3).unwrap();
        assert_eq!(s.set.len(), 15);
        assert_eq!(crate::corpus::class_counts(s.set.labels.iter().copied(), 3), [5, 5, 5]);
        let again = sample_support(&f.table, &f.split.train_pool, &f.names, 5, 3).unwrap();
        assert_eq!(s.glyph_ids, again.glyph_ids);
        let err = sample_support(&f.table, &f.split.train_pool, &f.names, 50, 3).unwrap_err();
        assert!(err.to_string().contains("circle"), "{err}");
    }

    #[test]
    fn augmented_support_sizes_and_provenance() {
        let f = fixture(8);
        let pipeline = AugmentationPipeline::classify_reduced_default();
        let s = sample_support(&f.table, &f.split.train_pool, &f.names, 2, 1).unwrap();
        let same = build_augmented_support(&s, 0, &f.crops, &pipeline, &f.encoder, 2).unwrap();
        assert_eq!(same, s.set);
        let aug = build_augmented_support(&s, 2, &f.crops, &pipeline, &f.encoder, 2).unwrap();
        assert_eq!(aug.len(), 3 * 2 * 3);
        assert_eq!(aug.count(Provenance::Original), 6);
        assert_eq!(aug.count(Provenance::Augmented), 12);
        let mut missing = f.crops.clone();
        missing.remove(&s.glyph_ids[0]);
        let err = build_augmented_support(&s, 1, &missing, &pipeline, &f.encoder, 2).unwrap_err();
        assert_eq!(err.class(), crate::error::ErrorClass::Io);
    }

    #[test]
    fn cached_copies_match_a_direct_build() {
        let f = fixture(8);
        let pipeline = AugmentationPipeline::classify_reduced_default();
        let params = ClassifierParams::default();
        let ctx = EvalContext::new(&f.names, &f.split, &f.table, &f.crops, Some(&f.encoder), &pipeline, &params);
        let s = sample_support(&f.table, &f.split.train_pool, &f.names, 2, 1).unwrap();
        let big = ctx.augmented(&s, 3, (2, 0), 9).unwrap();
        let small = ctx.augmented(&s, 1, (2, 0), 9).unwrap();
        assert_eq!(small, build_augmented_support(&s, 1, &f.crops, &pipeline, &f.encoder, 9).unwrap());
        assert_eq!(big, build_augmented_support(&s, 3, &f.crops, &pipeline, &f.encoder, 9).unwrap());
    }

    #[test]
    fn oracle_support_gives_perfect_knn() {
        let f = fixture(10);
        let pipeline = AugmentationPipeline::classify_reduced_default();
        let params = ClassifierParams::default();
        // Train pool = test set duplicated under new ids.
        let mut ids = Vec::new();
        let mut labels = Vec::new();
        let mut rows = Vec::new();
        for id in &f.split.test_set {
            for copy in ["", "-dup"] {
                ids.push(format!("{id}{copy}"));
                labels.push(f.table.label(id).unwrap());
                rows.push(f.table.rows(std::slice::from_ref(id)).unwrap().0);
            }
        }
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        let table = FeatureTable::new(ids.clone(), labels, concatenate(Axis(0), &views).unwrap()).unwrap();
        let split = CorpusSplit {
            train_pool: ids.iter().filter(|i| i.ends_with("-dup")).cloned().collect(),
            test_set: f.split.test_set.clone(),
            seed: 0,
        };
        let ctx = EvalContext::new(&f.names, &split, &table, &f.crops, None, &pipeline, &params);
        let per_class = split.train_pool.len() / 3;
        let spec = EpisodeSpec::new(RowKey::Shots(per_class), 0, ClassifierKind::Knn, 1, 0);
        let r = run_episode(&spec, &ctx, 0).unwrap();
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn every_head_separates_the_shapes_and_accuracy_matches_confusion() {
        let f = fixture(16);
        let pipeline = AugmentationPipeline::classify_reduced_default();
        let mut params = ClassifierParams::default();
        params.mlp.epochs = 60;
        params.mlp.layer_widths = vec![64, 32];
        params.proto.episodes = 100;
        params.proto.adapt_widths = vec![64, 32];
        let ctx = EvalContext::new(&f.names, &f.split, &f.table, &f.crops, Some(&f.encoder), &pipeline, &params);
        for kind in ClassifierKind::ALL {
            let row = if kind == ClassifierKind::Proto {
                RowKey::Split { support: 2, query: 3 }
            } else {
                RowKey::Shots(5)
            };
            let spec = EpisodeSpec::new(row, 0, kind, 2, 11);
            let r = bootstrap_evaluate(&spec, &ctx).unwrap();
            assert!(r.mean >= 0.99, "{kind}: {}", r.mean);
            let trace: u64 = (0..3).map(|i| r.confusion[i][i]).sum();
            let total: u64 = r.confusion.iter().flatten().sum();
            assert_eq!(r.accuracy, trace as f64 / total as f64);
            let per_class: Vec<u64> = r.confusion.iter().map(|row| row.iter().sum()).collect();
            let expected = crate::corpus::class_counts(
                f.split.test_set.iter().map(|id| f.table.label(id).unwrap()),
                3,
            );
            let expected: Vec<u64> = expected.iter().map(|&n| 2 * n as u64).collect();
            assert_eq!(per_class, expected);
        }
    }

    #[test]
    fn aggregation_arithmetic() {
        let parts: Vec<EvalResult> = [0.8, 0.9, 1.0, 0.7, 0.6]
            .iter()
            .enumerate()
            .map(|(i, &a)| EvalResult {
                accuracy: a,
                confusion: vec![vec![i as u64, 1], vec![2, 3]],
                per_bootstrap_accuracies: vec![a],
                mean: a,
                std: 0.0,
            })
            .collect();
        let agg = aggregate(&parts).unwrap();
        assert!((agg.mean - 0.8).abs() < 1e-12);
        assert_eq!(agg.confusion, vec![vec![10, 5], vec![10, 15]]);
        assert!((agg.std - 0.02f64.sqrt()).abs() < 1e-12);
        let single = aggregate(&parts[..1]).unwrap();
        assert_eq!((single.mean, single.std), (0.8, 0.0));
    }

    #[test]
    fn spec_validation_and_row_keys() {
        assert!(EpisodeSpec::new(RowKey::Shots(3), 0, ClassifierKind::Proto, 1, 0).validate().is_err());
        assert!(EpisodeSpec::new(RowKey::Split { support: 1, query: 2 }, 0, ClassifierKind::Mlp, 1, 0)
            .validate()
            .is_err());
        let ok = EpisodeSpec::new(RowKey::Split { support: 1, query: 2 }, 5, ClassifierKind::Proto, 5, 0);
        ok.validate().unwrap();
        assert_eq!(ok.k, 3);
        assert_eq!("6/4".parse::<RowKey>().unwrap(), RowKey::Split { support: 6, query: 4 });
        assert_eq!("10".parse::<RowKey>().unwrap(), RowKey::Shots(10));
        assert!("x".parse::<RowKey>().is_err());
    }
}
