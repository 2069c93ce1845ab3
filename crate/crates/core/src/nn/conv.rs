use ndarray::{s, Array2, Array4, ArrayD, Axis, Ix4, IxDyn};
use rand::RngCore;
use rayon::prelude::*;

use super::{init_uniform, Layer, Param, Real};

/// Samples per im2col block. Gradient partials are reduced in block order,
/// so results do not depend on the thread count.
const BLOCK: usize = 8;

/// Square-kernel convolution with stride 1 and "same" zero padding.
pub struct Conv2d<F: Real> {
    weight: Param<F>,
    bias: Param<F>,
    kernel: usize,
    input: Option<Array4<F>>,
}

impl<F: Real> Conv2d<F> {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut dyn RngCore) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        let fan_in = in_channels * kernel * kernel;
        Self {
            weight: Param::new(init_uniform(&[out_channels, in_channels, kernel, kernel], fan_in, rng)),
            bias: Param::new(init_uniform(&[out_channels], fan_in, rng)),
            kernel,
            input: None,
        }
    }

    fn weight_matrix(&self) -> Array2<F> {
        let oc = self.weight.value.shape()[0];
        let rest = self.weight.value.len() / oc;
        self.weight
            .value
            .view()
            .into_shape_with_order((oc, rest))
            .expect("contiguous weights")
            .to_owned()
    }

    /// `[C·k·k, b·h·w]` patch matrix for samples `x[start..start + b]`.
    fn im2col(&self, x: &Array4<F>, start: usize, b: usize) -> Array2<F> {
        let (_, c, h, w) = x.dim();
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let hw = h * w;
        let mut cols = Array2::<F>::zeros((c * k * k, b * hw));
        let xs = x.as_slice().expect("standard layout");
        let cols_slice = cols.as_slice_mut().unwrap();
        let width = b * hw;
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols_slice[row * width..(row + 1) * width];
                    for si in 0..b {
                        let src = &xs[((start + si) * c + ci) * hw..((start + si) * c + ci + 1) * hw];
                        let dst = &mut dst[si * hw..(si + 1) * hw];
                        for y in 0..h {
                            let sy = y as isize + ky as isize - pad;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let src_row = &src[sy as usize * w..(sy as usize + 1) * w];
                            let dst_row = &mut dst[y * w..(y + 1) * w];
                            let dx = kx as isize - pad;
                            let x0 = (-dx).max(0) as usize;
                            let x1 = (w as isize - dx).min(w as isize) as usize;
                            for xx in x0..x1 {
                                dst_row[xx] = src_row[(xx as isize + dx) as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adds the patch gradients back onto `dx` (shape `[b, C, h, w]`).
    fn col2im(&self, dcols: &Array2<F>, dx: &mut [F], b: usize, c: usize, h: usize, w: usize) {
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let hw = h * w;
        let width = b * hw;
        let dcs = dcols.as_slice().expect("standard layout");
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &dcs[row * width..(row + 1) * width];
                    for si in 0..b {
                        let src = &src[si * hw..(si + 1) * hw];
                        let dst = &mut dx[(si * c + ci) * hw..(si * c + ci + 1) * hw];
                        for y in 0..h {
                            let sy = y as isize + ky as isize - pad;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let dx_ = kx as isize - pad;
                            let x0 = (-dx_).max(0) as usize;
                            let x1 = (w as isize - dx_).min(w as isize) as usize;
                            for xx in x0..x1 {
                                dst[sy as usize * w + (xx as isize + dx_) as usize] += src[y * w + xx];
                            }
                        }
                    }
                }
            }
        }
    }

    fn apply(&self, x: &Array4<F>) -> Array4<F> {
        let (n, _, h, w) = x.dim();
        let oc = self.weight.value.shape()[0];
        let wm = self.weight_matrix();
        let bias = self.bias.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let hw = h * w;
        let blocks: Vec<(usize, usize)> = (0..n).step_by(BLOCK).map(|s| (s, BLOCK.min(n - s))).collect();
        let outs: Vec<Array2<F>> = blocks
            .par_iter()
            .map(|&(start, b)| {
                let cols = self.im2col(x, start, b);
                let mut out = wm.dot(&cols);
                for (o, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
                    row.mapv_inplace(|v| v + bias[o]);
                }
                out
            })
            .collect();
        let mut y = Array4::<F>::zeros((n, oc, h, w));
        for ((start, b), out) in blocks.into_iter().zip(outs) {
            for si in 0..b {
                let chunk = out.slice(s![.., si * hw..(si + 1) * hw]);
                y.slice_mut(s![start + si, .., .., ..])
                    .assign(&chunk.to_owned().into_shape_with_order((oc, h, w)).unwrap());
            }
        }
        y
    }
}

fn to4<F: Real>(x: ArrayD<F>) -> Array4<F> {
    x.into_dimensionality::<Ix4>()
        .expect("expected a 4-D [n, c, h, w] tensor")
        .as_standard_layout()
        .into_owned()
}

impl<F: Real> Layer<F> for Conv2d<F> {
    fn name(&self) -> &'static str {
        "conv"
    }

    fn forward(&mut self, x: ArrayD<F>, _rng: &mut dyn RngCore) -> ArrayD<F> {
        let x = to4(x);
        let y = self.apply(&x);
        self.input = Some(x);
        y.into_dyn()
    }

    fn infer(&self, x: ArrayD<F>) -> ArrayD<F> {
        self.apply(&to4(x)).into_dyn()
    }

    fn backward(&mut self, grad: ArrayD<F>) -> ArrayD<F> {
        let x = self.input.take().expect("backward without forward");
        let g = to4(grad);
        let (n, c, h, w) = x.dim();
        let oc = g.dim().1;
        let hw = h * w;
        let wm = self.weight_matrix();
        let blocks: Vec<(usize, usize)> = (0..n).step_by(BLOCK).map(|s| (s, BLOCK.min(n - s))).collect();
        let partials: Vec<(Array2<F>, Vec<F>, Vec<F>)> = blocks
            .par_iter()
            .map(|&(start, b)| {
                let cols = self.im2col(&x, start, b);
                let mut gm = Array2::<F>::zeros((oc, b * hw));
                for si in 0..b {
                    for o in 0..oc {
                        gm.slice_mut(s![o, si * hw..(si + 1) * hw]).assign(
                            &g.slice(s![start + si, o, .., ..])
                                .into_shape_with_order(hw)
                                .unwrap(),
                        );
                    }
                }
                let dw = gm.dot(&cols.t());
                let db: Vec<F> = gm.sum_axis(Axis(1)).to_vec();
                let dcols = wm.t().dot(&gm).as_standard_layout().into_owned();
                let mut dx = vec![F::zero(); b * c * hw];
                self.col2im(&dcols, &mut dx, b, c, h, w);
                (dw, db, dx)
            })
            .collect();

        let mut dx = vec![F::zero(); n * c * hw];
        let wshape = self.weight.value.raw_dim();
        for ((start, b), (dw, db, dxb)) in blocks.into_iter().zip(partials) {
            self.weight.grad += &dw.into_shape_with_order(wshape.clone()).unwrap();
            for (o, v) in db.into_iter().enumerate() {
                self.bias.grad[o] += v;
            }
            dx[start * c * hw..(start + b) * c * hw].copy_from_slice(&dxb);
        }
        ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap()
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

/// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
#[derive(Default)]
pub struct MaxPool2d {
    argmax: Option<(Vec<u8>, [usize; 4])>,
}

impl MaxPool2d {
    pub fn new() -> Self {
        Self::default()
    }
}

fn pool<F: Real>(x: &Array4<F>, mut record: Option<&mut Vec<u8>>) -> Array4<F> {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Array4::<F>::zeros((n, c, oh, ow));
    for ((si, ci, oy, ox), out) in y.indexed_iter_mut() {
        let mut best = F::neg_infinity();
        let mut best_i = 0u8;
        for (i, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
            let v = x[[si, ci, 2 * oy + dy, 2 * ox + dx]];
            if v > best {
                best = v;
                best_i = i as u8;
            }
        }
        *out = best;
        if let Some(r) = record.as_deref_mut() {
            r.push(best_i);
        }
    }
    y
}

impl<F: Real> Layer<F> for MaxPool2d {
    fn name(&self) -> &'static str {
        "maxpool"
    }

    fn forward(&mut self, x: ArrayD<F>, _rng: &mut dyn RngCore) -> ArrayD<F> {
        let x = to4(x);
        let (n, c, h, w) = x.dim();
        let mut idx = Vec::with_capacity(n * c * (h / 2) * (w / 2));
        let y = pool(&x, Some(&mut idx));
        self.argmax = Some((idx, [n, c, h, w]));
        y.into_dyn()
    }

    fn infer(&self, x: ArrayD<F>) -> ArrayD<F> {
        pool(&to4(x), None).into_dyn()
    }

    fn backward(&mut self, grad: ArrayD<F>) -> ArrayD<F> {
        let (idx, [n, c, h, w]) = self.argmax.take().expect("backward without forward");
        let g = to4(grad);
        let mut dx = Array4::<F>::zeros((n, c, h, w));
        for (((si, ci, oy, ox), &gv), &i) in g.indexed_iter().zip(idx.iter()) {
            let (dy, ddx) = [(0, 0), (0, 1), (1, 0), (1, 1)][usize::from(i)];
            dx[[si, ci, 2 * oy + dy, 2 * ox + ddx]] += gv;
        }
        dx.into_dyn()
    }

    fn clear_cache(&mut self) {
        self.argmax = None;
    }
}

/// Symmetric zero padding of the two spatial axes.
pub struct ZeroPad2d {
    pad: usize,
}

impl ZeroPad2d {
    pub fn new(pad: usize) -> Self {
        Self { pad }
    }

    fn apply<F: Real>(&self, x: ArrayD<F>) -> ArrayD<F> {
        let x = to4(x);
        let (n, c, h, w) = x.dim();
        let p = self.pad;
        let mut y = Array4::<F>::zeros((n, c, h + 2 * p, w + 2 * p));
        y.slice_mut(s![.., .., p..p + h, p..p + w]).assign(&x);
        y.into_dyn()
    }
}

impl<F: Real> Layer<F> for ZeroPad2d {
    fn name(&self) -> &'static str {
        "zeropad"
    }

    fn forward(&mut self, x: ArrayD<F>, _rng: &mut dyn RngCore) -> ArrayD<F> {
        self.apply(x)
    }

    fn infer(&self, x: ArrayD<F>) -> ArrayD<F> {
        self.apply(x)
    }

    fn backward(&mut self, grad: ArrayD<F>) -> ArrayD<F> {
        let g = to4(grad);
        let (_, _, h, w) = g.dim();
        let p = self.pad;
        g.slice(s![.., .., p..h - p, p..w - p]).to_owned().into_dyn()
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::max_rel_error;
    use super::super::{BatchNorm, Flatten, Relu, Sequential};
    use super::*;

    #[test]
    fn conv_block_gradients() {
        let mut rng = crate::seed::rng(7);
        let mut seq = Sequential::<f64>::new();
        seq.push(ZeroPad2d::new(1))
            .push(Conv2d::new(2, 3, 3, &mut rng))
            .push(BatchNorm::new(3))
            .push(Relu::new())
            .push(MaxPool2d::new())
            .push(Flatten::new());
        // 10 samples exercise more than one im2col block.
        let x = init_uniform::<f64>(&[10, 2, 4, 6], 1, &mut rng);
        let err = max_rel_error(&mut seq, &x, 8);
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = crate::seed::rng(3);
        let conv = Conv2d::<f64>::new(2, 2, 3, &mut rng);
        let x = init_uniform::<f64>(&[1, 2, 5, 4], 1, &mut rng);
        let y = conv.infer(x.clone());
        let w = &conv.weight.value;
        for o in 0..2 {
            for yy in 0..5i32 {
                for xx in 0..4i32 {
                    let mut acc = conv.bias.value[o];
                    for c in 0..2 {
                        for ky in 0..3i32 {
                            for kx in 0..3i32 {
                                let (sy, sx) = (yy + ky - 1, xx + kx - 1);
                                if (0..5).contains(&sy) && (0..4).contains(&sx) {
                                    acc += w[[o, c, ky as usize, kx as usize]] * x[[0, c, sy as usize, sx as usize]];
                                }
                            }
                        }
                    }
                    assert!((y[[0, o, yy as usize, xx as usize]] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn pooling_halves_and_floors() {
        let x = ArrayD::from_shape_vec(IxDyn(&[1, 1, 3, 5]), (0..15).map(f64::from).collect()).unwrap();
        let y = MaxPool2d::new().infer(x);
        assert_eq!(y.shape(), &[1, 1, 1, 2]);
        assert_eq!(y.as_slice().unwrap(), &[6.0, 8.0]);
    }
}
