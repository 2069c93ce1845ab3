//! Degradation-style augmentation: individual transforms and the two
//! pipelines used by the system (self-supervised view generation and
//! classification-time support augmentation).

mod transforms;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Crop;
use crate::seed;

pub use transforms::{apply_transform, TransformKind, TransformSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineName {
    /// Distortions used to build the two views for self-supervised training.
    SslFull,
    /// Transforms used to synthesise extra support samples.
    ClassifyReduced,
}

/// An ordered, validated list of transforms.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AugmentationPipeline {
    name: PipelineName,
    transforms: Vec<TransformSpec>,
}

impl AugmentationPipeline {
    /// Validates every transform and the composition rules of `name`:
    /// `ssl_full` never flips horizontally, and `classify_reduced` is exactly
    /// resized crop, colour jitter and Gaussian blur.
    pub fn new(name: PipelineName, transforms: Vec<TransformSpec>) -> Result<Self> {
        for t in &transforms {
            t.validate()?;
        }
        let kinds: BTreeSet<TransformKind> = transforms.iter().map(TransformSpec::kind).collect();
        match name {
            PipelineName::SslFull => {
                if kinds.contains(&TransformKind::HorizontalFlip) {
                    return Err(Error::validation(
                        "ssl_full pipeline must not flip horizontally: mirrored glyphs change meaning",
                    ));
                }
            }
            PipelineName::ClassifyReduced => {
                let expected = BTreeSet::from([
                    TransformKind::RandomResizedCrop,
                    TransformKind::ColorJitter,
                    TransformKind::GaussianBlur,
                ]);
                if kinds != expected || transforms.len() != 3 {
                    return Err(Error::validation(format!(
                        "classify_reduced pipeline must contain exactly RandomResizedCrop, ColorJitter and \
                         GaussianBlur, found {kinds:?}"
                    )));
                }
            }
        }
        Ok(Self { name, transforms })
    }

    pub fn ssl_full_default() -> Self {
        Self::new(PipelineName::SslFull, default_ssl_transforms()).expect("default ssl pipeline is valid")
    }

    pub fn classify_reduced_default() -> Self {
        Self::new(PipelineName::ClassifyReduced, default_classify_transforms())
            .expect("default classification pipeline is valid")
    }

    pub fn name(&self) -> PipelineName {
        self.name
    }

    pub fn transforms(&self) -> &[TransformSpec] {
        &self.transforms
    }

    /// Runs every transform in order; transform `i` sees seed `derive(seed, [i])`.
    pub fn apply(&self, crop: &Crop, seed: u64) -> Crop {
        self.transforms
            .iter()
            .enumerate()
            .fold(crop.clone(), |img, (i, t)| apply_transform(&img, t, seed::derive(seed, &[i as u64])))
    }
}

pub fn default_ssl_transforms() -> Vec<TransformSpec> {
    vec![
        TransformSpec::RandomResizedCrop {
            probability: 1.0,
            area: [0.6, 1.0],
            aspect: [0.75, 1.33],
        },
        TransformSpec::RandomRotation {
            probability: 0.5,
            degrees: 10.0,
        },
        TransformSpec::ElasticDistortion {
            probability: 0.3,
            alpha: [8.0, 16.0],
            sigma: [3.0, 5.0],
        },
        TransformSpec::ColorJitter {
            probability: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
        },
        TransformSpec::RandomGreyscale { probability: 0.2 },
        TransformSpec::SaltAndPepper {
            probability: 0.5,
            density: [0.01, 0.05],
        },
        TransformSpec::GaussianBlur {
            probability: 0.5,
            sigma: [0.1, 2.0],
        },
        TransformSpec::Fade {
            probability: 0.5,
            strength: [0.1, 0.5],
        },
    ]
}

pub fn default_classify_transforms() -> Vec<TransformSpec> {
    vec![
        TransformSpec::RandomResizedCrop {
            probability: 1.0,
            area: [0.6, 1.0],
            aspect: [0.75, 1.33],
        },
        TransformSpec::ColorJitter {
            probability: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
        },
        TransformSpec::GaussianBlur {
            probability: 0.5,
            sigma: [0.1, 2.0],
        },
    ]
}

/// Two independently distorted views of one crop, seeded `2·seed` and
/// `2·seed + 1`.
pub fn ssl_view_pair(crop: &Crop, pipeline: &AugmentationPipeline, seed: u64) -> Result<(Crop, Crop)> {
    if pipeline.name() != PipelineName::SslFull {
        return Err(Error::validation("view pairs require the ssl_full pipeline"));
    }
    let base = seed.wrapping_mul(2);
    Ok((pipeline.apply(crop, base), pipeline.apply(crop, base.wrapping_add(1))))
}

/// `count` augmented copies of a support crop; copy `j` uses seed
/// `derive(seed, [j])`.
pub fn augment_support(crop: &Crop, count: usize, pipeline: &AugmentationPipeline, seed: u64) -> Result<Vec<Crop>> {
    if pipeline.name() != PipelineName::ClassifyReduced {
        return Err(Error::validation("support augmentation requires the classify_reduced pipeline"));
    }
    Ok((0..count)
        .map(|j| pipeline.apply(crop, seed::derive(seed, &[j as u64])))
        .collect())
}

/// Wire form of a pipeline inside a configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub transforms: Vec<TransformSpec>,
}

impl PipelineConfig {
    pub fn build(&self, name: PipelineName) -> Result<AugmentationPipeline> {
        AugmentationPipeline::new(name, self.transforms.clone())
    }
}
