//! A small define-by-layer neural network toolkit with explicit backward
//! passes.
//!
//! Layers cache what they need during a training forward pass and consume
//! it in `backward`. Inference goes through `infer`, which takes `&self`, so
//! a fitted network can be shared across threads. Every layer is generic
//! over the scalar type: training runs in `f32`, gradient checks in `f64`.

mod checkpoint;
mod conv;
mod layers;
mod optim;

use std::fmt::Debug;

use ndarray::{Array2, ArrayD, Ix2, IxDyn, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::RngCore;

pub use checkpoint::{Checkpoint, TensorEntry};
pub use conv::{Conv2d, MaxPool2d, ZeroPad2d};
pub use layers::{BatchNorm, Dropout, Flatten, Linear, Relu};
pub use optim::{AdamW, AdamWConfig};

pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Default
    + Send
    + Sync
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
    fn as_f32(self) -> f32 {
        self.to_f32().expect("finite conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<F> {
    pub value: ArrayD<F>,
    pub grad: ArrayD<F>,
}

impl<F: Real> Param<F> {
    pub fn new(value: ArrayD<F>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }
}

/// Views a network output of shape `[n, d]` as a matrix.
pub fn into_matrix<F: Real>(x: ArrayD<F>) -> Array2<F> {
    x.into_dimensionality::<Ix2>().expect("network output is a matrix")
}

/// Splits an epoch ordering into minibatches. A trailing single sample is
/// folded into the previous batch so that batch statistics stay defined.
pub fn minibatches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut batches: Vec<&[usize]> = order.chunks(batch_size.max(1)).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        batches.pop();
        let start = (batches.len() - 1) * batch_size;
        *batches.last_mut().expect("non-empty") = &order[start..];
    }
    batches
}

/// Uniform fan-in initialisation, `U(−1/√fan_in, 1/√fan_in)`.
pub(crate) fn init_uniform<F: Real>(shape: &[usize], fan_in: usize, rng: &mut dyn RngCore) -> ArrayD<F> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
            F::from_f64_lossy((2.0 * u - 1.0) * bound)
        })
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches data")
}

pub trait Layer<F: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Training-mode forward pass; caches activations for `backward`.
    fn forward(&mut self, x: ArrayD<F>, rng: &mut dyn RngCore) -> ArrayD<F>;

    /// Inference-mode forward pass.
    fn infer(&self, x: ArrayD<F>) -> ArrayD<F>;

    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&mut self, grad: ArrayD<F>) -> ArrayD<F>;

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<F>)> {
        Vec::new()
    }

    /// Everything that must be persisted: parameter values and running
    /// statistics.
    fn state(&self) -> Vec<(&'static str, &ArrayD<F>)> {
        Vec::new()
    }

    fn state_mut(&mut self) -> Vec<(&'static str, &mut ArrayD<F>)> {
        Vec::new()
    }

    /// Drops cached activations.
    fn clear_cache(&mut self) {}
}

/// Layers applied in order.
#[derive(Default)]
pub struct Sequential<F: Real> {
    layers: Vec<Box<dyn Layer<F>>>,
}

impl<F: Real> Sequential<F> {
    pub fn new() -> Self {
        Self { layers: Vec::new() }
    }

    pub fn push(&mut self, layer: impl Layer<F> + 'static) -> &mut Self {
        self.layers.push(Box::new(layer));
        self
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn forward(&mut self, x: ArrayD<F>, rng: &mut dyn RngCore) -> ArrayD<F> {
        self.layers.iter_mut().fold(x, |x, l| l.forward(x, rng))
    }

    pub fn infer(&self, x: ArrayD<F>) -> ArrayD<F> {
        self.layers.iter().fold(x, |x, l| l.infer(x))
    }

    pub fn backward(&mut self, grad: ArrayD<F>) -> ArrayD<F> {
        self.layers.iter_mut().rev().fold(grad, |g, l| l.backward(g))
    }

    pub fn zero_grad(&mut self) {
        for l in &mut self.layers {
            for (_, p) in l.params_mut() {
                p.zero_grad();
            }
        }
    }

    pub fn clear_cache(&mut self) {
        self.layers.iter_mut().for_each(|l| l.clear_cache());
    }

    /// Parameters named `<prefix>.<layer index>.<layer name>.<tensor>`.
    pub fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Param<F>)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| {
                let lname = l.name();
                l.params_mut()
                    .into_iter()
                    .map(move |(n, p)| (format!("{prefix}.{i}.{lname}.{n}"), p))
            })
            .collect()
    }

    pub fn named_state(&self, prefix: &str) -> Vec<(String, &ArrayD<F>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                let lname = l.name();
                l.state().into_iter().map(move |(n, t)| (format!("{prefix}.{i}.{lname}.{n}"), t))
            })
            .collect()
    }

    pub fn named_state_mut(&mut self, prefix: &str) -> Vec<(String, &mut ArrayD<F>)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| {
                let lname = l.name();
                l.state_mut()
                    .into_iter()
                    .map(move |(n, t)| (format!("{prefix}.{i}.{lname}.{n}"), t))
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.named_state("")
            .iter()
            .filter(|(n, _)| !n.contains("running_"))
            .map(|(_, t)| t.len())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::minibatches;

    #[test]
    fn minibatches_fold_a_trailing_singleton() {
        let order: Vec<usize> = (0..9).collect();
        let sizes: Vec<usize> = minibatches(&order, 4).iter().map(|b| b.len()).collect();
        assert_eq!(sizes, [4, 5]);
        let sizes: Vec<usize> = minibatches(&order[..8], 3).iter().map(|b| b.len()).collect();
        assert_eq!(sizes, [3, 3, 2]);
        assert_eq!(minibatches(&order[..1], 4).len(), 1);
    }
}

#[cfg(test)]
pub(crate) mod gradcheck {
    use super::*;
    use ndarray::Zip;

    /// Loss used for gradient checks: `Σ w ⊙ y` with fixed random weights.
    pub fn probe_weights(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = crate::seed::rng(seed);
        init_uniform::<f64>(shape, 1, &mut rng)
    }

    /// Largest relative error between the analytic input and parameter
    /// gradients of `seq` and central finite differences of `Σ w ⊙ seq(x)`.
    pub fn max_rel_error(seq: &mut Sequential<f64>, x: &ArrayD<f64>, seed: u64) -> f64 {
        let mut rng = crate::seed::rng(seed);
        let y = seq.forward(x.clone(), &mut rng);
        let w = probe_weights(y.shape(), seed ^ 0xABCD);
        seq.zero_grad();
        let dx = seq.backward(w.clone());

        let loss = |seq: &mut Sequential<f64>, x: &ArrayD<f64>| -> f64 {
            let mut rng = crate::seed::rng(seed);
            let y = seq.forward(x.clone(), &mut rng);
            Zip::from(&y).and(&w).fold(0.0, |acc, a, b| acc + a * b)
        };
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let mut compare = |analytic: f64, numeric: f64| {
            let scale = analytic.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max((analytic - numeric).abs() / scale);
        };

        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[i] += h;
            xm.as_slice_mut().unwrap()[i] -= h;
            let numeric = (loss(seq, &xp) - loss(seq, &xm)) / (2.0 * h);
            compare(dx.as_slice().unwrap()[i], numeric);
        }

        let grads: Vec<(String, ArrayD<f64>)> = seq
            .named_params_mut("p")
            .into_iter()
            .map(|(n, p)| (n, p.grad.clone()))
            .collect();
        for (name, grad) in grads {
            for i in 0..grad.len() {
                let bump = |seq: &mut Sequential<f64>, delta: f64| {
                    let mut params = seq.named_params_mut("p");
                    let p = params.iter_mut().find(|(n, _)| *n == name).unwrap();
                    p.1.value.as_slice_mut().unwrap()[i] += delta;
                };
                bump(seq, h);
                let up = loss(seq, x);
                bump(seq, -2.0 * h);
                let down = loss(seq, x);
                bump(seq, h);
                compare(grad.as_slice().unwrap()[i], (up - down) / (2.0 * h));
            }
        }
        worst
    }
}
