//! Declarative run configuration.
//!
//! A run is described by one TOML file. Every key has a default, unknown
//! keys are rejected, and individual keys can be overridden with
//! `section.key=value` strings. The SHA-256 of the canonical JSON form of
//! the resolved configuration identifies the run in every artifact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::augment::{default_classify_transforms, default_ssl_transforms, AugmentationPipeline, PipelineConfig, PipelineName};
use crate::classifiers::{ClassifierKind, ClassifierParams};
use crate::encoder::{EncoderConfig, TrainConfig, VicRegConfig};
use crate::error::{Error, Result};
use crate::harness::{reference, RowKey};
use crate::preprocess::{BinarizationParams, CropScanParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub preprocess: PreprocessConfig,
    pub augment: AugmentConfig,
    pub encoder: EncoderConfig,
    pub vicreg: VicRegConfig,
    pub training: TrainingConfig,
    pub classifiers: ClassifierParams,
    pub evaluation: EvaluationConfig,
    pub report: ReportConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("run"),
            corpus: CorpusConfig::default(),
            preprocess: PreprocessConfig::default(),
            augment: AugmentConfig::default(),
            encoder: EncoderConfig::default(),
            vicreg: VicRegConfig::default(),
            training: TrainingConfig::default(),
            classifiers: ClassifierParams::default(),
            evaluation: EvaluationConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Directory of page images (PNG) scanned by `extract-crops`.
    pub pages_dir: PathBuf,
    /// Labelled glyph manifest used by `encode` and `evaluate`.
    pub labeled_manifest: PathBuf,
    /// Crop manifest used for self-supervised training. Empty means the
    /// manifest written by `extract-crops`.
    pub ssl_manifest: String,
    pub test_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            pages_dir: PathBuf::from("pages"),
            labeled_manifest: PathBuf::from("glyphs/manifest.csv"),
            ssl_manifest: String::new(),
            test_fraction: 0.3,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub binarization: BinarizationParams,
    pub scan: CropScanParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub ssl: PipelineConfig,
    pub classify: PipelineConfig,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            ssl: PipelineConfig {
                transforms: default_ssl_transforms(),
            },
            classify: PipelineConfig {
                transforms: default_classify_transforms(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_size: t.batch_size,
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluationMode {
    /// Accuracy tables over samples per class × augmentations.
    Table,
    /// Accuracy against augmentations at one row per classifier.
    Series,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub mode: EvaluationMode,
    pub classifiers: Vec<ClassifierKind>,
    pub samples_per_class: Vec<usize>,
    /// Rows of the prototypical table, written `S/Q`.
    pub support_query: Vec<RowKey>,
    pub augmentations: Vec<usize>,
    pub n_bootstraps: usize,
    pub series_samples_per_class: usize,
    pub series_support_query: RowKey,
    /// Class names for an additional restricted confusion matrix.
    pub confusion_subset: Vec<String>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            mode: EvaluationMode::Both,
            classifiers: ClassifierKind::ALL.to_vec(),
            samples_per_class: reference::SAMPLES_PER_CLASS.to_vec(),
            support_query: reference::SUPPORT_QUERY
                .iter()
                .map(|&(support, query)| RowKey::Split { support, query })
                .collect(),
            augmentations: reference::AUGMENTATIONS.to_vec(),
            n_bootstraps: 5,
            series_samples_per_class: 3,
            series_support_query: RowKey::Split { support: 1, query: 2 },
            confusion_subset: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    /// Largest |ours − published| in percentage points flagged as OK.
    pub tolerance: f64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { tolerance: 7.0 }
    }
}

impl EvaluationConfig {
    pub fn table_rows(&self, kind: ClassifierKind) -> Vec<RowKey> {
        if kind == ClassifierKind::Proto {
            self.support_query.clone()
        } else {
            self.samples_per_class.iter().map(|&k| RowKey::Shots(k)).collect()
        }
    }

    pub fn series_row(&self, kind: ClassifierKind) -> RowKey {
        if kind == ClassifierKind::Proto {
            self.series_support_query
        } else {
            RowKey::Shots(self.series_samples_per_class)
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classifiers.is_empty() || self.augmentations.is_empty() {
            return Err(Error::validation("evaluation needs at least one classifier and one augmentation count"));
        }
        if self.n_bootstraps == 0 {
            return Err(Error::validation("evaluation.n_bootstraps must be at least 1"));
        }
        if self.samples_per_class.contains(&0) || self.series_samples_per_class == 0 {
            return Err(Error::validation("samples per class must be at least 1"));
        }
        let split_ok = |r: &RowKey| matches!(r, RowKey::Split { support, query } if *support > 0 && *query > 0);
        if !self.support_query.iter().all(split_ok) || !split_ok(&self.series_support_query) {
            return Err(Error::validation("support/query rows must be written S/Q with S, Q ≥ 1"));
        }
        let needs = |kind| self.classifiers.contains(&kind);
        if needs(ClassifierKind::Proto) && self.support_query.is_empty() && self.mode != EvaluationMode::Series {
            return Err(Error::validation("evaluation.support_query is empty"));
        }
        if ClassifierKind::ALL[..3].iter().any(|&k| needs(k))
            && self.samples_per_class.is_empty()
            && self.mode != EvaluationMode::Series
        {
            return Err(Error::validation("evaluation.samples_per_class is empty"));
        }
        Ok(())
    }
}

impl RunConfig {
    /// Reads a TOML file (or starts from defaults) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut tree = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::validation(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let config: RunConfig = toml::Value::Table(tree)
            .try_into()
            .map_err(|e: toml::de::Error| Error::validation(format!("configuration: {}", e.message())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| Error::validation(format!("configuration: {}", e.message())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serialises to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.corpus.test_fraction > 0.0 && self.corpus.test_fraction < 1.0) {
            return Err(Error::validation("corpus.test_fraction must lie in (0, 1)"));
        }
        self.preprocess.binarization.validate()?;
        self.preprocess.scan.validate()?;
        self.ssl_pipeline()?;
        self.classify_pipeline()?;
        self.encoder.validate()?;
        self.vicreg.validate()?;
        self.train_config(None).validate()?;
        self.classifiers.knn.validate()?;
        self.classifiers.svm.validate()?;
        self.classifiers.mlp.validate()?;
        self.classifiers.proto.validate()?;
        self.evaluation.validate()?;
        if !(self.report.tolerance >= 0.0) {
            return Err(Error::validation("report.tolerance must be non-negative"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON serialisation.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("configuration serialises to JSON");
        Sha256::digest(&canonical).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn ssl_pipeline(&self) -> Result<AugmentationPipeline> {
        self.augment.ssl.build(PipelineName::SslFull)
    }

    pub fn classify_pipeline(&self) -> Result<AugmentationPipeline> {
        self.augment.classify.build(PipelineName::ClassifyReduced)
    }

    pub fn train_config(&self, checkpoint_path: Option<PathBuf>) -> TrainConfig {
        TrainConfig {
            batch_size: self.training.batch_size,
            epochs: self.training.epochs,
            learning_rate: self.training.learning_rate,
            weight_decay: self.training.weight_decay,
            seed: self.seed,
            checkpoint_path,
        }
    }

    pub fn crops_dir(&self) -> PathBuf {
        self.output_dir.join("crops")
    }

    pub fn ssl_manifest(&self) -> PathBuf {
        if self.corpus.ssl_manifest.is_empty() {
            self.crops_dir().join("manifest.csv")
        } else {
            PathBuf::from(&self.corpus.ssl_manifest)
        }
    }

    pub fn encoder_checkpoint(&self) -> PathBuf {
        self.output_dir.join("encoder.gsck")
    }

    pub fn loss_history(&self) -> PathBuf {
        self.output_dir.join("loss.csv")
    }

    pub fn feature_store(&self) -> PathBuf {
        self.output_dir.join("features.gsfs")
    }

    pub fn results_dir(&self) -> PathBuf {
        self.output_dir.join("results")
    }
}

/// Sets `dotted.key=value` in a TOML tree. The value is parsed as a TOML
/// value, falling back to a bare string.
pub fn apply_override(tree: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::validation(format!("override {assignment:?} is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::validation(format!("override key {key:?} is malformed")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, sections) = parts.split_last().expect("non-empty key");
    let mut node = tree;
    for s in sections {
        let entry = node
            .entry(s.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::validation(format!("override key {key:?}: {s:?} is not a section")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

fn describe(key: &str) -> &'static str {
    match key {
        "seed" => "global seed; every random stream is derived from it",
        "output_dir" => "directory for all artifacts",
        "corpus.pages_dir" => "page images scanned by extract-crops",
        "corpus.labeled_manifest" => "labelled glyph manifest for encode/evaluate",
        "corpus.ssl_manifest" => "crop manifest for train-encoder (empty: extract-crops output)",
        "corpus.test_fraction" => "per-class fraction held out as the query set",
        "preprocess.binarization.window_size" => "Sauvola window (odd, px)",
        "preprocess.binarization.k" => "Sauvola sensitivity k",
        "preprocess.binarization.r" => "Sauvola dynamic range R",
        "preprocess.scan.window" => "crop window (px)",
        "preprocess.scan.stride" => "window stride (px)",
        "preprocess.scan.entropy_threshold" => "minimum ink entropy of a kept window",
        "encoder.channels" => "1 grayscale, 3 colour",
        "encoder.expander_dims" => "expander layer widths",
        "vicreg.lambda_inv" => "invariance weight",
        "vicreg.mu_var" => "variance weight",
        "vicreg.phi_cov" => "covariance weight",
        "vicreg.gamma" => "target standard deviation",
        "vicreg.epsilon" => "variance stabiliser",
        "training.batch_size" => "crops per SSL batch",
        "training.epochs" => "SSL epochs",
        "training.learning_rate" => "AdamW learning rate",
        "training.weight_decay" => "AdamW decoupled weight decay",
        "classifiers.knn.k" => "neighbours",
        "classifiers.svm.c" => "soft-margin C",
        "classifiers.svm.gamma" => "RBF gamma (unset: 1/(d·var))",
        "classifiers.svm.tolerance" => "SMO stopping tolerance",
        "classifiers.svm.max_iterations" => "SMO iteration cap",
        "classifiers.mlp.layer_widths" => "hidden stage widths",
        "classifiers.mlp.dropout_rate" => "dropout after each hidden stage",
        "classifiers.mlp.epochs" => "training epochs",
        "classifiers.mlp.batch_size" => "minibatch size",
        "classifiers.mlp.learning_rate" => "Adam learning rate",
        "classifiers.mlp.weight_decay" => "decoupled weight decay",
        "classifiers.proto.adapt_widths" => "embedding head widths",
        "classifiers.proto.support_per_class" => "S per episode (overridden by table rows)",
        "classifiers.proto.query_per_class" => "Q per episode (overridden by table rows)",
        "classifiers.proto.episodes" => "training episodes",
        "classifiers.proto.learning_rate" => "Adam learning rate",
        "evaluation.mode" => "table, series or both",
        "evaluation.classifiers" => "heads to evaluate",
        "evaluation.samples_per_class" => "table rows K",
        "evaluation.support_query" => "prototypical table rows S/Q",
        "evaluation.augmentations" => "table columns A",
        "evaluation.n_bootstraps" => "bootstrap repetitions per cell",
        "evaluation.series_samples_per_class" => "series row K",
        "evaluation.series_support_query" => "series row S/Q for the prototypical head",
        "evaluation.confusion_subset" => "class names for an extra restricted confusion matrix",
        "report.tolerance" => "largest |delta| (points) flagged OK",
        _ => "",
    }
}

fn flatten(prefix: &str, value: &Value, out: &mut Vec<(String, String)>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        Value::Array(items) if items.iter().any(Value::is_object) => {
            for (i, v) in items.iter().enumerate() {
                flatten(&format!("{prefix}[{i}]"), v, out);
            }
        }
        Value::Null => out.push((prefix.to_string(), "(unset)".into())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

/// Every configuration key with its default value, one per line.
pub fn config_reference() -> String {
    let mut rows = Vec::new();
    flatten("", &serde_json::to_value(RunConfig::default()).expect("serialisable"), &mut rows);
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::new();
    for (k, v) in rows {
        let d = describe(&k);
        if d.is_empty() {
            out.push_str(&format!("  {k:<width$} = {v}\n"));
        } else {
            out.push_str(&format!("  {k:<width$} = {v}  # {d}\n"));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml_str("[training]\nepochz = 3\n").unwrap_err();
        assert!(err.to_string().contains("epochz"), "{err}");
        assert!(RunConfig::load(None, &["vicreg.lamda_inv=3".into()]).is_err());
    }

    #[test]
    fn overrides_apply_and_change_the_hash() {
        let base = RunConfig::load(None, &[]).unwrap();
        let c = RunConfig::load(
            None,
            &[
                "training.epochs=2".into(),
                "evaluation.samples_per_class=[1, 5]".into(),
                "evaluation.support_query=[\"2/3\"]".into(),
                "output_dir=out/x".into(),
                "classifiers.svm.gamma=0.5".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.training.epochs, 2);
        assert_eq!(c.evaluation.samples_per_class, vec![1, 5]);
        assert_eq!(c.evaluation.support_query, vec![RowKey::Split { support: 2, query: 3 }]);
        assert_eq!(c.output_dir, PathBuf::from("out/x"));
        assert_eq!(c.classifiers.svm.gamma, Some(0.5));
        assert_ne!(c.hash(), base.hash());
        assert!(apply_override(&mut toml::Table::new(), "novalue").is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::load(None, &["corpus.test_fraction=1.5".into()]).is_err());
        assert!(RunConfig::load(None, &["evaluation.support_query=[\"3\"]".into()]).is_err());
        assert!(RunConfig::load(None, &["preprocess.binarization.window_size=4".into()]).is_err());
    }

    #[test]
    fn reference_lists_every_leaf_key() {
        let r = config_reference();
        for key in [
            "seed",
            "vicreg.lambda_inv",
            "classifiers.mlp.layer_widths",
            "augment.ssl.transforms[0].kind",
            "evaluation.n_bootstraps",
            "classifiers.svm.gamma",
        ] {
            assert!(r.contains(key), "{key} missing");
        }
        assert!(r.contains("10.0"));
    }
}
