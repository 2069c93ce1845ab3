use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{check_labels, check_query, FewShotClassifier, SupportSet};
use crate::error::{Error, Result};
use crate::nn::{into_matrix, minibatches, AdamW, AdamWConfig, BatchNorm, Checkpoint, Dropout, Linear, Relu, Sequential};
use crate::seed::{self, stream};

const NET_PREFIX: &str = "mlp";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpConfig {
    /// Output widths of the hidden stages, each a linear layer followed by
    /// batch norm, ReLU and dropout. A linear head to the class count
    /// follows the last stage.
    pub layer_widths: Vec<usize>,
    pub dropout_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            layer_widths: vec![1600, 1024, 512, 256, 128],
            dropout_rate: 0.3,
            epochs: 200,
            batch_size: 64,
            learning_rate: 1e-3,
            weight_decay: 0.0,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.is_empty() || self.layer_widths.contains(&0) {
            return Err(Error::validation("mlp.layer_widths must be a non-empty list of positive widths"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::validation("mlp.dropout_rate must lie in [0, 1)"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::validation("mlp.batch_size and mlp.epochs must be positive"));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::validation("mlp.learning_rate must be positive and weight_decay non-negative"));
        }
        Ok(())
    }
}

pub struct MlpModel {
    config: MlpConfig,
    class_count: usize,
    input_dim: usize,
    net: Sequential<f32>,
}

impl std::fmt::Debug for MlpModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MlpModel")
            .field("config", &self.config)
            .field("class_count", &self.class_count)
            .field("input_dim", &self.input_dim)
            .finish_non_exhaustive()
    }
}

fn build(config: &MlpConfig, input_dim: usize, class_count: usize, seed: u64) -> Sequential<f32> {
    let mut rng = seed::rng(seed);
    let mut net = Sequential::new();
    let mut prev = input_dim;
    for &w in &config.layer_widths {
        net.push(Linear::new(prev, w, &mut rng))
            .push(BatchNorm::new(w))
            .push(Relu::new())
            .push(Dropout::new(config.dropout_rate));
        prev = w;
    }
    net.push(Linear::new(prev, class_count, &mut rng));
    net
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let n = labels.len() as f64;
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (mut row, &y) in grad.outer_iter_mut().zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        loss -= (row[y] / z).ln();
        row.mapv_inplace(|v| v / z / n);
        row[y] -= 1.0 / n;
    }
    (loss / n, grad)
}

fn argmax_rows(scores: &Array2<f32>) -> Vec<usize> {
    scores
        .outer_iter()
        .map(|row| {
            let mut best = 0;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

pub fn mlp_fit(support: &SupportSet, class_count: usize, config: &MlpConfig, seed: u64) -> Result<MlpModel> {
    check_labels(support, class_count)?;
    config.validate()?;
    let input_dim = support.dim();
    let mut net = build(config, input_dim, class_count, seed::derive(seed, &[stream::CLASSIFIER, 0]));
    let mut opt = AdamW::new(AdamWConfig {
        learning_rate: config.learning_rate,
        weight_decay: config.weight_decay,
        ..Default::default()
    });
    let mut dropout_rng = seed::rng(seed::derive(seed, &[stream::DROPOUT]));
    let mut order: Vec<usize> = (0..support.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut seed::rng(seed::derive(seed, &[stream::CLASSIFIER, 1, epoch as u64])));
        for batch in minibatches(&order, config.batch_size) {
            let x = support.features.select(Axis(0), batch).into_dyn();
            let labels: Vec<usize> = batch.iter().map(|&i| support.labels[i]).collect();
            let logits = into_matrix(net.forward(x, &mut dropout_rng)).mapv(f64::from);
            let (loss, grad) = cross_entropy(&logits, &labels);
            if !loss.is_finite() {
                net.clear_cache();
                return Err(Error::numerical(format!(
                    "non-finite MLP loss {loss} at epoch {epoch}"
                )));
            }
            net.zero_grad();
            net.backward(grad.mapv(|v| v as f32).into_dyn());
            opt.step(net.named_params_mut(NET_PREFIX));
        }
    }
    net.clear_cache();
    Ok(MlpModel {
        config: config.clone(),
        class_count,
        input_dim,
        net,
    })
}

pub fn mlp_predict(model: &MlpModel, query: ArrayView2<'_, f32>) -> Result<Vec<usize>> {
    check_query(&query, model.input_dim)?;
    let logits = into_matrix(model.net.infer(query.to_owned().into_dyn()));
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("MLP produced non-finite logits"));
    }
    Ok(argmax_rows(&logits))
}

impl MlpModel {
    pub(crate) fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(json!({
            "kind": "mlp",
            "config": self.config,
            "class_count": self.class_count,
            "input_dim": self.input_dim,
        }));
        ck.insert_sequential(&self.net, NET_PREFIX);
        ck
    }

    pub(crate) fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let bad = |what: &str| Error::format("mlp checkpoint", format!("missing {what}"));
        let config: MlpConfig = serde_json::from_value(ck.meta["config"].clone()).map_err(|_| bad("config"))?;
        let class_count = ck.meta["class_count"].as_u64().ok_or_else(|| bad("class_count"))? as usize;
        let input_dim = ck.meta.get("input_dim").and_then(Value::as_u64).ok_or_else(|| bad("input_dim"))? as usize;
        let mut net = build(&config, input_dim, class_count, 0);
        ck.load_sequential(&mut net, NET_PREFIX)?;
        Ok(Self {
            config,
            class_count,
            input_dim,
            net,
        })
    }
}

impl FewShotClassifier for MlpModel {
    type Config = MlpConfig;

    fn fit(support: &SupportSet, class_count: usize, config: &MlpConfig, seed: u64) -> Result<Self> {
        mlp_fit(support, class_count, config, seed)
    }

    fn predict(&self, query: ArrayView2<'_, f32>) -> Result<Vec<usize>> {
        mlp_predict(self, query)
    }

    fn class_count(&self) -> usize {
        self.class_count
    }
}
