//! Few-shot classification heads over backbone features.
//!
//! All four heads share one interface: fit on a [`SupportSet`], then
//! predict labels for a query matrix. Fitted models are immutable and can
//! be shared across threads.

mod blob;
mod knn;
mod mlp;
mod proto;
mod svm;

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Checkpoint;

pub use knn::{knn_fit, knn_predict, KnnConfig, KnnModel};
pub use mlp::{mlp_fit, mlp_predict, MlpConfig, MlpModel};
pub use proto::{
    compute_prototypes, nearest_prototype, proto_fit, proto_predict, prototype_loss_with_grad, ProtoConfig,
    ProtoModel,
};
pub use svm::{svm_fit, svm_predict, SvmConfig, SvmModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    Knn,
    Svm,
    Mlp,
    Proto,
}

impl ClassifierKind {
    pub const ALL: [ClassifierKind; 4] = [Self::Knn, Self::Svm, Self::Mlp, Self::Proto];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Knn => "knn",
            Self::Svm => "svm",
            Self::Mlp => "mlp",
            Self::Proto => "proto",
        }
    }
}

impl std::fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ClassifierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::validation(format!("unknown classifier {s:?} (expected knn, svm, mlp or proto)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Original,
    Augmented,
}

/// Labelled feature rows a classifier conditions on.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportSet {
    pub features: Array2<f32>,
    pub labels: Vec<usize>,
    pub provenance: Vec<Provenance>,
}

impl SupportSet {
    pub fn new(features: Array2<f32>, labels: Vec<usize>, provenance: Vec<Provenance>) -> Result<Self> {
        let set = Self {
            features,
            labels,
            provenance,
        };
        set.validate()?;
        Ok(set)
    }

    /// All rows flagged as originals.
    pub fn originals(features: Array2<f32>, labels: Vec<usize>) -> Result<Self> {
        let n = labels.len();
        Self::new(features, labels, vec![Provenance::Original; n])
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.features.nrows();
        if m == 0 {
            return Err(Error::validation("support set is empty"));
        }
        if self.labels.len() != m || self.provenance.len() != m {
            return Err(Error::validation(format!(
                "support set has {m} feature rows but {} labels and {} provenance flags",
                self.labels.len(),
                self.provenance.len()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Distinct labels in ascending order.
    pub fn classes(&self) -> Vec<usize> {
        let mut c = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    pub fn count(&self, provenance: Provenance) -> usize {
        self.provenance.iter().filter(|&&p| p == provenance).count()
    }
}

/// The shared fit/predict contract.
pub trait FewShotClassifier: Sized + Send + Sync {
    type Config;

    fn fit(support: &SupportSet, class_count: usize, config: &Self::Config, seed: u64) -> Result<Self>;

    fn predict(&self, query: ArrayView2<'_, f32>) -> Result<Vec<usize>>;

    fn class_count(&self) -> usize;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierParams {
    pub knn: KnnConfig,
    pub svm: SvmConfig,
    pub mlp: MlpConfig,
    pub proto: ProtoConfig,
}

/// A fitted head of any kind.
#[derive(Debug)]
pub enum TrainedClassifier {
    Knn(KnnModel),
    Svm(SvmModel),
    Mlp(MlpModel),
    Proto(ProtoModel),
}

impl TrainedClassifier {
    pub fn fit(
        kind: ClassifierKind,
        support: &SupportSet,
        class_count: usize,
        params: &ClassifierParams,
        seed: u64,
    ) -> Result<Self> {
        Ok(match kind {
            ClassifierKind::Knn => Self::Knn(KnnModel::fit(support, class_count, &params.knn, seed)?),
            ClassifierKind::Svm => Self::Svm(SvmModel::fit(support, class_count, &params.svm, seed)?),
            ClassifierKind::Mlp => Self::Mlp(MlpModel::fit(support, class_count, &params.mlp, seed)?),
            ClassifierKind::Proto => Self::Proto(ProtoModel::fit(support, class_count, &params.proto, seed)?),
        })
    }

    pub fn kind(&self) -> ClassifierKind {
        match self {
            Self::Knn(_) => ClassifierKind::Knn,
            Self::Svm(_) => ClassifierKind::Svm,
            Self::Mlp(_) => ClassifierKind::Mlp,
            Self::Proto(_) => ClassifierKind::Proto,
        }
    }

    pub fn class_count(&self) -> usize {
        match self {
            Self::Knn(m) => m.class_count(),
            Self::Svm(m) => m.class_count(),
            Self::Mlp(m) => m.class_count(),
            Self::Proto(m) => m.class_count(),
        }
    }

    pub fn predict(&self, query: ArrayView2<'_, f32>) -> Result<Vec<usize>> {
        match self {
            Self::Knn(m) => m.predict(query),
            Self::Svm(m) => m.predict(query),
            Self::Mlp(m) => m.predict(query),
            Self::Proto(m) => m.predict(query),
        }
    }

    /// kNN and SVM states are written as a binary blob, MLP and
    /// prototypical states as a weight checkpoint.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        match self {
            Self::Knn(m) => m.to_blob().save(path),
            Self::Svm(m) => m.to_blob().save(path),
            Self::Mlp(m) => m.to_checkpoint().save(path),
            Self::Proto(m) => m.to_checkpoint().save(path),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut magic = [0u8; 4];
        {
            use std::io::Read;
            let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
            f.read_exact(&mut magic)
                .map_err(|_| Error::format(path.display().to_string(), "file too short"))?;
        }
        if &magic == blob::MAGIC {
            let b = blob::Blob::load(path)?;
            match b.meta.get("kind").and_then(|v| v.as_str()) {
                Some("knn") => Ok(Self::Knn(KnnModel::from_blob(&b)?)),
                Some("svm") => Ok(Self::Svm(SvmModel::from_blob(&b)?)),
                other => Err(Error::format(path.display().to_string(), format!("unknown blob kind {other:?}"))),
            }
        } else {
            let ck = Checkpoint::load(path)?;
            match ck.meta.get("kind").and_then(|v| v.as_str()) {
                Some("mlp") => Ok(Self::Mlp(MlpModel::from_checkpoint(&ck)?)),
                Some("proto") => Ok(Self::Proto(ProtoModel::from_checkpoint(&ck)?)),
                other => Err(Error::format(
                    path.display().to_string(),
                    format!("unknown checkpoint kind {other:?}"),
                )),
            }
        }
    }
}

/// Rejects queries whose width differs from the support features.
pub(crate) fn check_query(query: &ArrayView2<'_, f32>, dim: usize) -> Result<()> {
    if query.ncols() != dim {
        return Err(Error::validation(format!(
            "query has {} features, the classifier was fitted on {dim}",
            query.ncols()
        )));
    }
    Ok(())
}

pub(crate) fn check_labels(support: &SupportSet, class_count: usize) -> Result<()> {
    support.validate()?;
    if let Some(&bad) = support.labels.iter().find(|&&l| l >= class_count) {
        return Err(Error::validation(format!(
            "support label {bad} is outside the {class_count}-class vocabulary"
        )));
    }
    Ok(())
}

pub(crate) fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}
