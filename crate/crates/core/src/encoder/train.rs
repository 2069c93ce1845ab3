use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{concatenate, s, Array2, ArrayD, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::vicreg::{vicreg_loss_with_grad, LossBreakdown, VicRegConfig};
use super::{Encoder, EncoderConfig, BACKBONE_PREFIX, EXPANDER_PREFIX};
use crate::augment::{ssl_view_pair, AugmentationPipeline, PipelineName};
use crate::error::{Error, Result};
use crate::imaging::Crop;
use crate::nn::{into_matrix, minibatches, AdamW, AdamWConfig, Checkpoint, Param};
use crate::seed::{self, stream};

pub const LOSS_HISTORY_HEADER: &str = "step,invariance,variance,covariance,total";
const OPTIMIZER_PREFIX: &str = "adamw";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Written at the end of every epoch when set.
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            epochs: 50,
            learning_rate: 1e-3,
            weight_decay: 1e-6,
            seed: 0,
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::validation(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("learning_rate must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::validation("weight_decay must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub invariance: f64,
    pub variance: f64,
    pub covariance: f64,
    pub total: f64,
}

impl LossRecord {
    fn new(step: u64, l: &LossBreakdown) -> Self {
        Self {
            step,
            invariance: l.invariance,
            variance: l.variance,
            covariance: l.covariance,
            total: l.total,
        }
    }
}

#[derive(Debug, Default)]
pub struct TrainOptions<'a> {
    /// Continue from an epoch-end checkpoint.
    pub resume: Option<&'a Checkpoint>,
    /// Merged into the checkpoint metadata (e.g. a config hash).
    pub extra_meta: Option<Value>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub encoder: Encoder,
    /// Records for the steps run by this call; step numbers continue across
    /// resumes.
    pub history: Vec<LossRecord>,
    pub epochs_completed: usize,
}

pub fn train_encoder(
    crops: &[Crop],
    enc: &EncoderConfig,
    vic: &VicRegConfig,
    train: &TrainConfig,
    pipeline: &AugmentationPipeline,
) -> Result<TrainOutcome> {
    train_encoder_with(crops, enc, vic, train, pipeline, TrainOptions::default())
}

struct Trainer<'a> {
    encoder: Encoder,
    optimizer: AdamW<f32>,
    vic: &'a VicRegConfig,
    train: &'a TrainConfig,
    step: u64,
}

fn named_params(encoder: &mut Encoder) -> Vec<(String, &mut Param<f32>)> {
    let mut params = encoder.backbone.named_params_mut(BACKBONE_PREFIX);
    params.extend(encoder.expander.named_params_mut(EXPANDER_PREFIX));
    params
}

impl Trainer<'_> {
    fn step(&mut self, view_a: ArrayD<f32>, view_b: ArrayD<f32>) -> Result<LossBreakdown> {
        let n = view_a.shape()[0];
        let x = concatenate(Axis(0), &[view_a.view(), view_b.view()]).expect("views share a shape");
        let mut noop = seed::rng(0);
        let features = self.encoder.backbone.forward(x, &mut noop);
        let z = into_matrix(self.encoder.expander.forward(features, &mut noop)).mapv(f64::from);
        let za = z.slice(s![..n, ..]).to_owned();
        let zb = z.slice(s![n.., ..]).to_owned();
        let out = vicreg_loss_with_grad(&za, &zb, self.vic)?;
        self.step += 1;
        if !out.loss.is_finite() {
            self.encoder.backbone.clear_cache();
            self.encoder.expander.clear_cache();
            return Err(Error::numerical(format!(
                "non-finite VICReg loss at step {}: total={} invariance={} variance={} covariance={}",
                self.step, out.loss.total, out.loss.invariance, out.loss.variance, out.loss.covariance
            )));
        }
        let grad: Array2<f32> = concatenate(Axis(0), &[out.grad_a.view(), out.grad_b.view()])
            .expect("gradients share a shape")
            .mapv(|v| v as f32);
        self.encoder.backbone.zero_grad();
        self.encoder.expander.zero_grad();
        let g = self.encoder.expander.backward(grad.into_dyn());
        self.encoder.backbone.backward(g);
        self.optimizer.step(named_params(&mut self.encoder));
        Ok(out.loss)
    }

    fn checkpoint(&self, epoch: usize, extra: Option<&Value>) -> Checkpoint {
        let mut ck = self.encoder.to_checkpoint();
        let meta = ck.meta.as_object_mut().expect("object meta");
        meta.insert("epoch".into(), epoch.into());
        meta.insert("step".into(), self.step.into());
        meta.insert("seed".into(), self.train.seed.into());
        meta.insert("vicreg".into(), serde_json::to_value(self.vic).expect("serialisable"));
        if let Some(Value::Object(extra)) = extra {
            for (k, v) in extra {
                meta.insert(k.clone(), v.clone());
            }
        }
        for (name, t) in self.optimizer.state() {
            ck.insert(format!("{OPTIMIZER_PREFIX}.{name}"), t);
        }
        ck
    }

    fn restore_optimizer(&mut self, ck: &Checkpoint, step: u64) -> Result<()> {
        let names: Vec<String> = named_params(&mut self.encoder).into_iter().map(|(n, _)| n).collect();
        let mut moments = BTreeMap::new();
        if step > 0 {
            for name in names {
                let get = |suffix: &str| {
                    ck.get::<f32>(&format!("{OPTIMIZER_PREFIX}.{name}.{suffix}"))
                        .ok_or_else(|| Error::format("checkpoint", format!("missing optimizer state for {name}")))
                };
                moments.insert(name.clone(), (get("m")?, get("v")?));
            }
        }
        self.optimizer.restore(step, moments);
        Ok(())
    }
}

/// Trains backbone and expander with the VICReg objective on pairs of
/// augmented views. Each epoch visits the crops in a seeded order; every
/// batch is embedded as one stacked pass over both views.
pub fn train_encoder_with(
    crops: &[Crop],
    enc: &EncoderConfig,
    vic: &VicRegConfig,
    train: &TrainConfig,
    pipeline: &AugmentationPipeline,
    options: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    enc.validate()?;
    vic.validate()?;
    train.validate()?;
    if pipeline.name() != PipelineName::SslFull {
        return Err(Error::validation("encoder training uses the ssl_full augmentation pipeline"));
    }
    if crops.is_empty() {
        return Err(Error::validation("no crops to train on"));
    }
    if crops.len() < train.batch_size {
        return Err(Error::validation(format!(
            "{} crops available, fewer than batch_size {}",
            crops.len(),
            train.batch_size
        )));
    }

    let optimizer = AdamW::new(AdamWConfig {
        learning_rate: train.learning_rate,
        weight_decay: train.weight_decay,
        ..Default::default()
    });
    let (encoder, start_epoch, step) = match options.resume {
        None => (Encoder::new(enc.clone(), train.seed)?, 0, 0),
        Some(ck) => {
            let encoder = Encoder::from_checkpoint(ck)?;
            if encoder.config() != enc {
                return Err(Error::validation("resume checkpoint was trained with a different encoder config"));
            }
            if ck.meta.get("seed").and_then(Value::as_u64) != Some(train.seed) {
                return Err(Error::validation("resume checkpoint was trained with a different seed"));
            }
            let epoch = ck.meta.get("epoch").and_then(Value::as_u64).unwrap_or(0) as usize;
            let step = ck.meta.get("step").and_then(Value::as_u64).unwrap_or(0);
            (encoder, epoch, step)
        }
    };
    let mut trainer = Trainer {
        encoder,
        optimizer,
        vic,
        train,
        step,
    };
    if let Some(ck) = options.resume {
        trainer.restore_optimizer(ck, step)?;
    }

    let mut history = Vec::new();
    for epoch in start_epoch..train.epochs {
        let mut order: Vec<usize> = (0..crops.len()).collect();
        order.shuffle(&mut seed::rng(seed::derive(train.seed, &[stream::SSL_SHUFFLE, epoch as u64])));
        let mut position = 0u64;
        for batch in minibatches(&order, train.batch_size) {
            let first = position;
            let pairs: Vec<(Crop, Crop)> = batch
                .par_iter()
                .enumerate()
                .map(|(j, &i)| {
                    let s = seed::derive(train.seed, &[stream::SSL_VIEWS, epoch as u64, first + j as u64]);
                    ssl_view_pair(&crops[i], pipeline, s)
                })
                .collect::<Result<_>>()?;
            position += batch.len() as u64;
            let (a, b): (Vec<Crop>, Vec<Crop>) = pairs.into_iter().unzip();
            let va = trainer.encoder.images_to_tensor(&a)?;
            let vb = trainer.encoder.images_to_tensor(&b)?;
            let loss = trainer.step(va, vb)?;
            log::debug!("epoch {epoch} step {} loss {:.5}", trainer.step, loss.total);
            history.push(LossRecord::new(trainer.step, &loss));
        }
        trainer.encoder.backbone.clear_cache();
        trainer.encoder.expander.clear_cache();
        trainer.encoder.mark_trained();
        if let Some(path) = &train.checkpoint_path {
            trainer.checkpoint(epoch + 1, options.extra_meta.as_ref()).save(path)?;
        }
        if let Some(last) = history.last() {
            log::info!("epoch {}/{} done, loss {:.5}", epoch + 1, train.epochs, last.total);
        }
    }

    Ok(TrainOutcome {
        encoder: trainer.encoder,
        history,
        epochs_completed: train.epochs.max(start_epoch),
    })
}

pub fn write_loss_history(path: impl AsRef<Path>, records: &[LossRecord], comment: Option<&str>) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    if let Some(c) = comment {
        writeln!(out, "# {c}").map_err(io)?;
    }
    writeln!(out, "{LOSS_HISTORY_HEADER}").map_err(io)?;
    for r in records {
        writeln!(
            out,
            "{},{:e},{:e},{:e},{:e}",
            r.step, r.invariance, r.variance, r.covariance, r.total
        )
        .map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_loss_history(path: impl AsRef<Path>) -> Result<Vec<LossRecord>> {
    let path = path.as_ref();
    let ctx = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut header_seen = false;
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if !header_seen {
            if line.trim() != LOSS_HISTORY_HEADER {
                return Err(Error::format(ctx, format!("unexpected loss history header {line:?}")));
            }
            header_seen = true;
            continue;
        }
        let bad = || Error::format(ctx.clone(), format!("malformed loss record on line {}", n + 1));
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(bad());
        }
        let num = |i: usize| fields[i].trim().parse::<f64>().map_err(|_| bad());
        records.push(LossRecord {
            step: fields[0].trim().parse().map_err(|_| bad())?,
            invariance: num(1)?,
            variance: num(2)?,
            covariance: num(3)?,
            total: num(4)?,
        });
    }
    Ok(records)
}
