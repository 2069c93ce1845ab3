use ndarray::{s, Array1, Array3, ArrayD, Axis, Ix2, IxDyn};
use rand::RngCore;

use super::{init_uniform, Layer, Param, Real};

/// Fully connected layer, `y = x·Wᵀ + b`.
pub struct Linear<F: Real> {
    weight: Param<F>,
    bias: Param<F>,
    input: Option<ArrayD<F>>,
}

impl<F: Real> Linear<F> {
    pub fn new(inputs: usize, outputs: usize, rng: &mut dyn RngCore) -> Self {
        Self {
            weight: Param::new(init_uniform(&[outputs, inputs], inputs, rng)),
            bias: Param::new(init_uniform(&[outputs], inputs, rng)),
            input: None,
        }
    }

    /// Identity map, used for tests and as a neutral adaptation layer.
    pub fn identity(width: usize) -> Self {
        let eye = ndarray::Array2::<F>::eye(width).into_dyn();
        Self {
            weight: Param::new(eye),
            bias: Param::new(ArrayD::zeros(IxDyn(&[width]))),
            input: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    fn apply(&self, x: &ArrayD<F>) -> ArrayD<F> {
        let x2 = x.view().into_dimensionality::<Ix2>().expect("linear input must be 2-D");
        assert_eq!(x2.ncols(), self.in_features(), "linear input width");
        let w = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let b = self.bias.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        (x2.dot(&w.t()) + b).into_dyn()
    }
}

impl<F: Real> Layer<F> for Linear<F> {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn forward(&mut self, x: ArrayD<F>, _rng: &mut dyn RngCore) -> ArrayD<F> {
        let y = self.apply(&x);
        self.input = Some(x);
        y
    }

    fn infer(&self, x: ArrayD<F>) -> ArrayD<F> {
        self.apply(&x)
    }

    fn backward(&mut self, grad: ArrayD<F>) -> ArrayD<F> {
        let x = self.input.take().expect("backward without forward");
        let x2 = x.view().into_dimensionality::<Ix2>().unwrap();
        let g = grad.view().into_dimensionality::<Ix2>().unwrap();
        let w = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let dx = g.dot(&w).into_dyn();
        self.weight.grad += &g.t().dot(&x2).into_dyn();
        self.bias.grad += &g.sum_axis(Axis(0)).into_dyn();
        dx
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<F>)> {
        vec![("weight", &mut self.weight), ("bias", &mut self.bias)]
    }

    fn state(&self) -> Vec<(&'static str, &ArrayD<F>)> {
        vec![("weight", &self.weight.value), ("bias", &self.bias.value)]
    }

    fn state_mut(&mut self) -> Vec<(&'static str, &mut ArrayD<F>)> {
        vec![("weight", &mut self.weight.value), ("bias", &mut self.bias.value)]
    }

    fn clear_cache(&mut self) {
        self.input = None;
    }
}

/// Batch normalisation over the channel axis (axis 1) of `[n, C]` or
/// `[n, C, h, w]` inputs. Training uses batch statistics and updates running
/// estimates with momentum 0.1; inference uses the running estimates.
pub struct BatchNorm<F: Real> {
    gamma: Param<F>,
    beta: Param<F>,
    running_mean: ArrayD<F>,
    running_var: ArrayD<F>,
    momentum: F,
    eps: F,
    cache: Option<BnCache<F>>,
}

struct BnCache<F> {
    xhat: Array3<F>,
    inv_std: Array1<F>,
    shape: Vec<usize>,
}

fn as_ncl<F: Real>(x: ArrayD<F>) -> (Array3<F>, Vec<usize>) {
    let shape = x.shape().to_vec();
    let (n, c) = (shape[0], shape[1]);
    let l: usize = shape[2..].iter().product();
    let x = x.as_standard_layout().into_owned();
    (x.into_shape_with_order((n, c, l)).expect("contiguous"), shape)
}

impl<F: Real> BatchNorm<F> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(ArrayD::ones(IxDyn(&[channels]))),
            beta: Param::new(ArrayD::zeros(IxDyn(&[channels]))),
            running_mean: ArrayD::zeros(IxDyn(&[channels])),
            running_var: ArrayD::ones(IxDyn(&[channels])),
            momentum: F::from_f64_lossy(0.1),
            eps: F::from_f64_lossy(1e-5),
            cache: None,
        }
    }
}

impl<F: Real> Layer<F> for BatchNorm<F> {
    fn name(&self) -> &'static str {
        "batchnorm"
    }

    fn forward(&mut self, x: ArrayD<F>, _rng: &mut dyn RngCore) -> ArrayD<F> {
        let (mut x, shape) = as_ncl(x);
        let (n, c, l) = x.dim();
        let count = F::from_usize(n * l).unwrap();
        let mut inv_std = Array1::zeros(c);
        for ch in 0..c {
            let mut lane = x.slice_mut(s![.., ch, ..]);
            let mean = lane.sum() / count;
            let var = lane.fold(F::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / count;
            let istd = F::one() / (var + self.eps).sqrt();
            inv_std[ch] = istd;
            lane.mapv_inplace(|v| (v - mean) * istd);
            let unbiased = if n * l > 1 {
                var * count / (count - F::one())
            } else {
                var
            };
            let m = self.momentum;
            self.running_mean[ch] = (F::one() - m) * self.running_mean[ch] + m * mean;
            self.running_var[ch] = (F::one() - m) * self.running_var[ch] + m * unbiased;
        }
        let mut y = x.clone();
        for ch in 0..c {
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            y.slice_mut(s![.., ch, ..]).mapv_inplace(|v| g * v + b);
        }
        self.cache = Some(BnCache { xhat: x, inv_std, shape: shape.clone() });
        y.into_shape_with_order(IxDyn(&shape)).unwrap()
    }

    fn infer(&self, x: ArrayD<F>) -> ArrayD<F> {
        let (mut x, shape) = as_ncl(x);
        for ch in 0..x.dim().1 {
            let istd = F::one() / (self.running_var[ch] + self.eps).sqrt();
            let mean = self.running_mean[ch];
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            x.slice_mut(s![.., ch, ..]).mapv_inplace(|v| g * (v - mean) * istd + b);
        }
        x.into_shape_with_order(IxDyn(&shape)).unwrap()
    }

    fn backward(&mut self, grad: ArrayD<F>) -> ArrayD<F> {
        let BnCache { xhat, inv_std, shape } = self.cache.take().expect("backward without forward");
        let (mut g, _) = as_ncl(grad);
        let (n, c, l) = g.dim();
        let count = F::from_usize(n * l).unwrap();
        for ch in 0..c {
            let xh = xhat.slice(s![.., ch, ..]);
            let mut gl = g.slice_mut(s![.., ch, ..]);
            let sum_g = gl.sum();
            let sum_gx = ndarray::Zip::from(&gl).and(&xh).fold(F::zero(), |acc, &a, &b| acc + a * b);
            self.gamma.grad[ch] += sum_gx;
            self.beta.grad[ch] += sum_g;
            let scale = self.gamma.value[ch] * inv_std[ch] / count;
            ndarray::Zip::from(&mut gl)
                .and(&xh)
                .for_each(|gv, &xv| *gv = scale * (count * *gv - sum_g - xv * sum_gx));
        }
        g.into_shape_with_order(IxDyn(&shape)).unwrap()
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<F>)> {
        vec![("gamma", &mut self.gamma), ("beta", &mut self.beta)]
    }

    fn state(&self) -> Vec<(&'static str, &ArrayD<F>)> {
        vec![
            ("gamma", &self.gamma.value),
            ("beta", &self.beta.value),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ]
    }

    fn state_mut(&mut self) -> Vec<(&'static str, &mut ArrayD<F>)> {
        vec![
            ("gamma", &mut self.gamma.value),
            ("beta", &mut self.beta.value),
            ("running_mean", &mut self.running_mean),
            ("running_var", &mut self.running_var),
        ]
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

#[derive(Default)]
pub struct Relu {
    mask: Option<ArrayD<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<F: Real> Layer<F> for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn forward(&mut self, mut x: ArrayD<F>, _rng: &mut dyn RngCore) -> ArrayD<F> {
        self.mask = Some(x.mapv(|v| v > F::zero()));
        x.mapv_inplace(|v| v.max(F::zero()));
        x
    }

    fn infer(&self, mut x: ArrayD<F>) -> ArrayD<F> {
        x.mapv_inplace(|v| v.max(F::zero()));
        x
    }

    fn backward(&mut self, mut grad: ArrayD<F>) -> ArrayD<F> {
        let mask = self.mask.take().expect("backward without forward");
        ndarray::Zip::from(&mut grad).and(&mask).for_each(|g, &m| {
            if !m {
                *g = F::zero();
            }
        });
        grad
    }

    fn clear_cache(&mut self) {
        self.mask = None;
    }
}

/// Inverted dropout: kept activations are scaled by `1/(1−rate)` during
/// training; inference is the identity.
pub struct Dropout<F: Real> {
    rate: f64,
    mask: Option<ArrayD<F>>,
}

impl<F: Real> Dropout<F> {
    pub fn new(rate: f64) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate must lie in [0, 1)");
        Self { rate, mask: None }
    }
}

impl<F: Real> Layer<F> for Dropout<F> {
    fn name(&self) -> &'static str {
        "dropout"
    }

    fn forward(&mut self, x: ArrayD<F>, rng: &mut dyn RngCore) -> ArrayD<F> {
        let keep = F::from_f64_lossy(1.0 / (1.0 - self.rate));
        let threshold = (self.rate * (1u64 << 53) as f64) as u64;
        let mask = x.mapv(|_| if (rng.next_u64() >> 11) >= threshold { keep } else { F::zero() });
        let y = &x * &mask;
        self.mask = Some(mask);
        y
    }

    fn infer(&self, x: ArrayD<F>) -> ArrayD<F> {
        x
    }

    fn backward(&mut self, grad: ArrayD<F>) -> ArrayD<F> {
        grad * &self.mask.take().expect("backward without forward")
    }

    fn clear_cache(&mut self) {
        self.mask = None;
    }
}

/// `[n, ...] → [n, prod(...)]`.
#[derive(Default)]
pub struct Flatten {
    shape: Option<Vec<usize>>,
}

impl Flatten {
    pub fn new() -> Self {
        Self::default()
    }
}

fn flatten<F: Real>(x: ArrayD<F>) -> ArrayD<F> {
    let n = x.shape()[0];
    let rest: usize = x.shape()[1..].iter().product();
    x.as_standard_layout()
        .into_owned()
        .into_shape_with_order(IxDyn(&[n, rest]))
        .unwrap()
}

impl<F: Real> Layer<F> for Flatten {
    fn name(&self) -> &'static str {
        "flatten"
    }

    fn forward(&mut self, x: ArrayD<F>, _rng: &mut dyn RngCore) -> ArrayD<F> {
        self.shape = Some(x.shape().to_vec());
        flatten(x)
    }

    fn infer(&self, x: ArrayD<F>) -> ArrayD<F> {
        flatten(x)
    }

    fn backward(&mut self, grad: ArrayD<F>) -> ArrayD<F> {
        let shape = self.shape.take().expect("backward without forward");
        grad.into_shape_with_order(IxDyn(&shape)).unwrap()
    }
}
