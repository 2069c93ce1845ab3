//! Labelled glyph corpora: the class vocabulary, manifest ingestion, crop
//! persistence, the binary feature store and train/test partitioning.

mod manifest;
mod split;
mod store;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Crop;

pub use manifest::{load_corpus, load_corpus_with_vocab, write_manifest, ManifestRow, MANIFEST_HEADER};
pub use split::{split_labels, stratified_split, CorpusSplit};
pub use store::{read_feature_store, write_feature_store, FeatureRecord, FEATURE_DIM};

/// Ordered set of class names with a name → index bijection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassVocabulary {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl ClassVocabulary {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(names.len());
        for (i, name) in names.iter().enumerate() {
            if name.is_empty() {
                return Err(Error::validation(format!("class {i} has an empty name")));
            }
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::validation(format!("duplicate class name {name:?}")));
            }
        }
        Ok(Self { names, index })
    }

    /// Builds a vocabulary from arbitrary labels, sorted by name.
    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut names: Vec<String> = labels.into_iter().map(str::to_owned).collect();
        names.sort();
        names.dedup();
        Self::new(names)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }
}

/// Pixel-space bounding box `(x, y, w, h)` of a glyph on its source page.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

#[derive(Debug, Clone)]
pub struct LabeledGlyph {
    pub glyph_id: String,
    pub crop: Crop,
    pub label: usize,
    pub page_id: String,
    pub bbox: BBox,
}

/// Per-class sample counts, indexed by class.
pub fn class_counts(labels: impl IntoIterator<Item = usize>, class_count: usize) -> Vec<usize> {
    let mut counts = vec![0; class_count];
    for l in labels {
        counts[l] += 1;
    }
    counts
}
