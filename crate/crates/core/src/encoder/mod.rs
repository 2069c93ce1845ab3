//! Self-supervised convolutional feature extractor.
//!
//! The backbone zero-pads each 64×64 crop to 80×80 and applies four blocks
//! of `conv 3×3 (same) → batch norm → ReLU → max-pool 2×2` with widths
//! 32/64/64/64, ending at a 5×5×64 map flattened to 1600 features. The
//! expander is a stack of linear layers with batch norm and ReLU between
//! them; it is only used by the training objective.

mod train;
mod vicreg;

use ndarray::{concatenate, Array2, ArrayD, Axis, IxDyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::corpus::{FeatureRecord, LabeledGlyph, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::imaging::{luma, Crop, CROP_SIZE};
use crate::nn::{
    into_matrix, BatchNorm, Checkpoint, Conv2d, Flatten, Linear, MaxPool2d, Real, Relu, Sequential, ZeroPad2d,
};
use crate::seed::{self, stream};

pub use train::{
    read_loss_history, train_encoder, train_encoder_with, write_loss_history, LossRecord, TrainConfig,
    TrainOptions, TrainOutcome, LOSS_HISTORY_HEADER,
};
pub use vicreg::{vicreg_loss, vicreg_loss_with_grad, LossBreakdown, LossWithGrad, VicRegConfig};

const INPUT_PAD: usize = 8;
const BLOCK_WIDTHS: [usize; 4] = [32, 64, 64, 64];
const INFER_CHUNK: usize = 32;

pub(crate) const BACKBONE_PREFIX: &str = "backbone";
pub(crate) const EXPANDER_PREFIX: &str = "expander";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// 1 for grayscale input, 3 for colour.
    pub channels: usize,
    pub expander_dims: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: 1,
            expander_dims: vec![2048, 2048, 2048],
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::validation(format!(
                "encoder channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        if self.expander_dims.is_empty() {
            return Err(Error::validation("expander_dims must not be empty"));
        }
        if self.expander_dims.contains(&0) {
            return Err(Error::validation("expander widths must be positive"));
        }
        Ok(())
    }

    pub fn input_size(&self) -> usize {
        CROP_SIZE as usize
    }

    pub fn feature_dim(&self) -> usize {
        FEATURE_DIM
    }

    pub fn embedding_dim(&self) -> usize {
        *self.expander_dims.last().expect("validated non-empty")
    }
}

pub fn build_backbone<F: Real>(channels: usize, seed: u64) -> Sequential<F> {
    let mut rng = seed::rng(seed);
    let mut net = Sequential::new();
    net.push(ZeroPad2d::new(INPUT_PAD));
    let mut inputs = channels;
    for width in BLOCK_WIDTHS {
        net.push(Conv2d::new(inputs, width, 3, &mut rng))
            .push(BatchNorm::new(width))
            .push(Relu::new())
            .push(MaxPool2d::new());
        inputs = width;
    }
    net.push(Flatten::new());
    net
}

/// Linear layers of the given widths with batch norm and ReLU between them.
pub fn build_expander<F: Real>(inputs: usize, widths: &[usize], seed: u64) -> Sequential<F> {
    let mut rng = seed::rng(seed);
    let mut net = Sequential::new();
    let mut prev = inputs;
    for (i, &w) in widths.iter().enumerate() {
        net.push(Linear::new(prev, w, &mut rng));
        if i + 1 < widths.len() {
            net.push(BatchNorm::new(w)).push(Relu::new());
        }
        prev = w;
    }
    net
}

/// Backbone plus expander. Inference goes through `&self` and is safe to
/// share across threads.
pub struct Encoder {
    config: EncoderConfig,
    pub(crate) backbone: Sequential<f32>,
    pub(crate) expander: Sequential<f32>,
    trained: bool,
}

impl std::fmt::Debug for Encoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Encoder")
            .field("config", &self.config)
            .field("trained", &self.trained)
            .finish_non_exhaustive()
    }
}

impl Encoder {
    /// Randomly initialised weights; the encoder is flagged as untrained.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let backbone = build_backbone(config.channels, seed::derive(seed, &[stream::INIT, 0]));
        let expander = build_expander(FEATURE_DIM, &config.expander_dims, seed::derive(seed, &[stream::INIT, 1]));
        Ok(Self {
            config,
            backbone,
            expander,
            trained: false,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub(crate) fn mark_trained(&mut self) {
        self.trained = true;
    }

    /// Stacks crops into an `n × c × 64 × 64` tensor with values in [0, 1].
    pub fn images_to_tensor(&self, crops: &[Crop]) -> Result<ArrayD<f32>> {
        let side = CROP_SIZE as usize;
        let c = self.config.channels;
        let mut data = Vec::with_capacity(crops.len() * c * side * side);
        for (i, crop) in crops.iter().enumerate() {
            if crop.dimensions() != (CROP_SIZE, CROP_SIZE) {
                return Err(Error::validation(format!(
                    "crop {i} is {}×{}, the encoder expects {side}×{side}",
                    crop.width(),
                    crop.height()
                )));
            }
            if c == 1 {
                data.extend(crop.pixels().map(|p| (luma(p) / 255.0) as f32));
            } else {
                for ch in 0..3 {
                    data.extend(crop.pixels().map(|p| p.0[ch] as f32 / 255.0));
                }
            }
        }
        Ok(ArrayD::from_shape_vec(IxDyn(&[crops.len(), c, side, side]), data).expect("sizes agree"))
    }

    /// Inference-mode backbone features, `n × 1600`.
    pub fn forward(&self, crops: &[Crop]) -> Result<Array2<f32>> {
        if crops.is_empty() {
            return Err(Error::validation("encoder_forward needs at least one image"));
        }
        let chunks: Vec<Array2<f32>> = crops
            .par_chunks(INFER_CHUNK)
            .map(|chunk| {
                let x = self.images_to_tensor(chunk)?;
                Ok(into_matrix(self.backbone.infer(x)))
            })
            .collect::<Result<_>>()?;
        let views: Vec<_> = chunks.iter().map(|a| a.view()).collect();
        let out = concatenate(Axis(0), &views).expect("widths agree");
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("encoder produced non-finite features"));
        }
        Ok(out)
    }

    /// Inference-mode expander embeddings, `n × d_e`.
    pub fn expander_forward(&self, features: &Array2<f32>) -> Result<Array2<f32>> {
        if features.ncols() != FEATURE_DIM {
            return Err(Error::validation(format!(
                "expander expects {FEATURE_DIM}-wide features, got {}",
                features.ncols()
            )));
        }
        Ok(into_matrix(self.expander.infer(features.clone().into_dyn())))
    }

    /// One feature record per glyph, in input order.
    pub fn encode_corpus(&self, glyphs: &[LabeledGlyph]) -> Result<Vec<FeatureRecord>> {
        if glyphs.is_empty() {
            return Ok(Vec::new());
        }
        if !self.trained {
            log::warn!("encoding with randomly initialised (untrained) encoder weights");
        }
        let crops: Vec<Crop> = glyphs.iter().map(|g| g.crop.clone()).collect();
        let features = self.forward(&crops)?;
        Ok(glyphs
            .iter()
            .zip(features.outer_iter())
            .map(|(g, row)| FeatureRecord {
                glyph_id: g.glyph_id.clone(),
                vector: row.to_vec(),
            })
            .collect())
    }

    pub fn parameter_count(&self) -> usize {
        self.backbone.parameter_count() + self.expander.parameter_count()
    }

    pub(crate) fn meta(&self) -> Value {
        json!({
            "kind": "encoder",
            "encoder": self.config,
            "trained": self.trained,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.meta());
        ck.insert_sequential(&self.backbone, BACKBONE_PREFIX);
        ck.insert_sequential(&self.expander, EXPANDER_PREFIX);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.get("kind").and_then(Value::as_str) != Some("encoder") {
            return Err(Error::format("checkpoint", "not an encoder checkpoint"));
        }
        let config: EncoderConfig = serde_json::from_value(ck.meta["encoder"].clone())
            .map_err(|e| Error::format("checkpoint", format!("bad encoder config: {e}")))?;
        let mut enc = Self::new(config, 0)?;
        ck.load_sequential(&mut enc.backbone, BACKBONE_PREFIX)?;
        ck.load_sequential(&mut enc.expander, EXPANDER_PREFIX)?;
        enc.trained = ck.meta.get("trained").and_then(Value::as_bool).unwrap_or(false);
        Ok(enc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck;
    use image::{Rgb, RgbImage};
    use rand::Rng;

    fn small() -> EncoderConfig {
        EncoderConfig {
            channels: 1,
            expander_dims: vec![16, 8],
        }
    }

    fn noise_crop(seed: u64) -> Crop {
        let mut rng = seed::rng(seed);
        RgbImage::from_fn(64, 64, |_, _| {
            let v = rng.random::<u8>();
            Rgb([v, v, v])
        })
    }

    #[test]
    fn zero_image_gives_finite_feature_vector() {
        let enc = Encoder::new(small(), 3).unwrap();
        let out = enc.forward(&[RgbImage::new(64, 64)]).unwrap();
        assert_eq!(out.dim(), (1, 1600));
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn inference_is_deterministic_and_batch_independent() {
        let enc = Encoder::new(small(), 4).unwrap();
        let crops: Vec<Crop> = (0..40).map(noise_crop).collect();
        let a = enc.forward(&crops).unwrap();
        let b = enc.forward(&crops).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.nrows(), 40);
        let single = enc.forward(&crops[37..38]).unwrap();
        assert_eq!(single.row(0), a.row(37));
    }

    #[test]
    fn wrong_size_is_a_validation_error() {
        let enc = Encoder::new(small(), 0).unwrap();
        let err = enc.forward(&[RgbImage::new(32, 64)]).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn default_expander_shape_and_width_check() {
        let enc = Encoder::new(EncoderConfig::default(), 0).unwrap();
        let mut rng = seed::rng(9);
        let feats = Array2::from_shape_fn((4, 1600), |_| rng.random::<f32>());
        assert_eq!(enc.expander_forward(&feats).unwrap().dim(), (4, 2048));
        let mut dup = feats.clone();
        let first = dup.row(0).to_owned();
        dup.row_mut(1).assign(&first);
        let out = enc.expander_forward(&dup).unwrap();
        assert_eq!(out.row(0), out.row(1));
        assert!(matches!(
            enc.expander_forward(&Array2::zeros((2, 100))),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn toy_expander_gradient_matches_finite_differences() {
        let mut net = build_expander::<f64>(8, &[6, 5, 4], 11);
        let mut rng = seed::rng(12);
        let x = ArrayD::from_shape_fn(IxDyn(&[2, 8]), |_| rng.random_range(-1.0..1.0));
        let err = gradcheck::max_rel_error(&mut net, &x, 5);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn encode_corpus_preserves_order_and_duplicates() {
        use crate::corpus::BBox;
        let enc = Encoder::new(small(), 1).unwrap();
        assert!(enc.encode_corpus(&[]).unwrap().is_empty());
        let glyph = |id: &str, crop: Crop| LabeledGlyph {
            glyph_id: id.into(),
            crop,
            label: 0,
            page_id: "p".into(),
            bbox: BBox { x: 0, y: 0, w: 64, h: 64 },
        };
        let mut glyphs: Vec<_> = (0..10).map(|i| glyph(&format!("g{i}"), noise_crop(i))).collect();
        glyphs.push(glyph("dup", noise_crop(4)));
        let recs = enc.encode_corpus(&glyphs).unwrap();
        let ids: Vec<_> = recs.iter().map(|r| r.glyph_id.as_str()).collect();
        assert_eq!(ids[..3], ["g0", "g1", "g2"]);
        assert_eq!(recs.len(), 11);
        assert_eq!(recs[4].vector, recs[10].vector);
    }

    #[test]
    fn checkpoint_round_trip_preserves_outputs() {
        let enc = Encoder::new(small(), 7).unwrap();
        let back = Encoder::from_checkpoint(&enc.to_checkpoint()).unwrap();
        let crops = [noise_crop(1), noise_crop(2)];
        assert_eq!(enc.forward(&crops).unwrap(), back.forward(&crops).unwrap());
        assert!(!back.is_trained());
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig { channels: 2, ..small() }.validate().is_err());
        assert!(EncoderConfig { expander_dims: vec![], ..small() }.validate().is_err());
        assert_eq!(EncoderConfig::default().embedding_dim(), 2048);
    }
}
