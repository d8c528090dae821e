//! Minimal trainable layers with hand-written backward passes.
//!
//! Every layer owns its parameters as contiguous `f64` arrays. A zeroed clone
//! of a layer doubles as its gradient accumulator, so `backward` takes a
//! `&mut Self` for the gradients and the optimiser walks both trees with
//! [`Params::params`] in the same order.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{HceError, Result};

/// Borrowed view of one named parameter array.
pub struct ParamRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct ParamMut<'a> {
    pub name: String,
    pub data: &'a mut [f64],
}

pub trait Params {
    fn params(&self) -> Vec<ParamRef<'_>>;
    fn params_mut(&mut self) -> Vec<ParamMut<'_>>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }

    fn zero_(&mut self) {
        for p in self.params_mut() {
            p.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// `self += other`, element by element. Both trees must have the same layout.
    fn add_assign_from(&mut self, other: &Self) {
        let src = other.params();
        for (dst, s) in self.params_mut().into_iter().zip(src) {
            debug_assert_eq!(dst.name, s.name);
            dst.data.iter_mut().zip(s.data).for_each(|(a, b)| *a += b);
        }
    }
}

pub(crate) fn prefixed<'a>(prefix: &str, inner: Vec<ParamRef<'a>>) -> impl Iterator<Item = ParamRef<'a>> + 'a {
    let prefix = prefix.to_string();
    inner.into_iter().map(move |mut p| {
        p.name = format!("{prefix}.{}", p.name);
        p
    })
}

pub(crate) fn prefixed_mut<'a>(prefix: &str, inner: Vec<ParamMut<'a>>) -> impl Iterator<Item = ParamMut<'a>> + 'a {
    let prefix = prefix.to_string();
    inner.into_iter().map(move |mut p| {
        p.name = format!("{prefix}.{}", p.name);
        p
    })
}

/// Deterministic RNG for initialising the module at `path`.
///
/// Each module draws from its own stream, so two models built from the same
/// seed share every module they have in common regardless of which optional
/// modules are present.
pub fn module_rng(seed: u64, path: &str) -> ChaCha8Rng {
    let digest = Sha256::new().chain_update(seed.to_le_bytes()).chain_update(path.as_bytes()).finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `out x (in * k * k)`, row-major over `(in, ky, kx)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Array2<f64>,
    in_dims: (usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    /// He-normal weights, zero bias.
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let weight = Array2::from_shape_vec((out_ch, fan_in), normal_vec(rng, out_ch * fan_in, std)).expect("shape");
        Conv2d {
            weight,
            bias: Array1::zeros(out_ch),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero_();
        z
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.pad - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn im2col(&self, x: &Array3<f64>) -> (Array2<f64>, (usize, usize)) {
        let (c, h, w) = x.dim();
        let (oh, ow) = self.output_hw(h, w);
        let k = self.kernel;
        let mut cols = Array2::zeros((c * k * k, oh * ow));
        let xs = x.as_slice().expect("contiguous input");
        let cs = cols.as_slice_mut().expect("contiguous");
        let p = oh * ow;
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cs[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &xs[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * ow + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        (cols, (oh, ow))
    }

    fn col2im(&self, cols: &Array2<f64>, dims: (usize, usize, usize), out_hw: (usize, usize)) -> Array3<f64> {
        let (c, h, w) = dims;
        let (oh, ow) = out_hw;
        let k = self.kernel;
        let mut dx = Array3::zeros((c, h, w));
        let ds = dx.as_slice_mut().expect("contiguous");
        let cs = cols.as_slice().expect("contiguous");
        let p = oh * ow;
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cs[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (ci * h + iy as usize) * w;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                ds[base + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &Array3<f64>) -> Result<(Array3<f64>, ConvCache)> {
        let (c, h, w) = x.dim();
        if c != self.in_ch {
            return Err(HceError::shape("conv2d", format!("{} input channels", self.in_ch), c));
        }
        if h + 2 * self.pad < self.kernel || w + 2 * self.pad < self.kernel {
            return Err(HceError::shape("conv2d", "input at least kernel-sized", format!("{h}x{w}")));
        }
        let x = x.as_standard_layout();
        let (cols, (oh, ow)) = self.im2col(&x.to_owned());
        let mut out = Array2::zeros((self.out_ch, oh * ow));
        general_mat_mul(1.0, &self.weight, &cols, 0.0, &mut out);
        out += &self.bias.view().insert_axis(Axis(1));
        let out = out.into_shape_with_order((self.out_ch, oh, ow)).expect("shape");
        Ok((
            out,
            ConvCache {
                cols,
                in_dims: (c, h, w),
                out_hw: (oh, ow),
            },
        ))
    }

    /// Accumulates parameter gradients into `grads` and returns the input gradient.
    pub fn backward(&self, cache: &ConvCache, dout: &Array3<f64>, grads: &mut Conv2d) -> Array3<f64> {
        let (oh, ow) = cache.out_hw;
        let dout = dout.as_standard_layout();
        let d2 = dout.view().into_shape_with_order((self.out_ch, oh * ow)).expect("shape");
        general_mat_mul(1.0, &d2, &cache.cols.t(), 1.0, &mut grads.weight);
        grads.bias += &d2.sum_axis(Axis(1));
        let mut dcols = Array2::zeros(cache.cols.dim());
        general_mat_mul(1.0, &self.weight.t(), &d2, 0.0, &mut dcols);
        self.col2im(&dcols, cache.in_dims, cache.out_hw)
    }

    /// Parameter gradients only, skipping the input gradient.
    pub fn backward_params(&self, cache: &ConvCache, dout: &Array3<f64>, grads: &mut Conv2d) {
        let (oh, ow) = cache.out_hw;
        let dout = dout.as_standard_layout();
        let d2 = dout.view().into_shape_with_order((self.out_ch, oh * ow)).expect("shape");
        general_mat_mul(1.0, &d2, &cache.cols.t(), 1.0, &mut grads.weight);
        grads.bias += &d2.sum_axis(Axis(1));
    }
}

impl Params for Conv2d {
    fn params(&self) -> Vec<ParamRef<'_>> {
        vec![
            ParamRef {
                name: "weight".into(),
                shape: vec![self.out_ch, self.in_ch, self.kernel, self.kernel],
                data: self.weight.as_slice().expect("contiguous"),
            },
            ParamRef {
                name: "bias".into(),
                shape: vec![self.out_ch],
                data: self.bias.as_slice().expect("contiguous"),
            },
        ]
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        vec![
            ParamMut {
                name: "weight".into(),
                data: self.weight.as_slice_mut().expect("contiguous"),
            },
            ParamMut {
                name: "bias".into(),
                data: self.bias.as_slice_mut().expect("contiguous"),
            },
        ]
    }
}

/// Fully connected layer, `y = x W^T + b` over a batch of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `out x in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let weight = Array2::from_shape_vec((outputs, inputs), normal_vec(rng, inputs * outputs, std)).expect("shape");
        Linear {
            weight,
            bias: Array1::zeros(outputs),
        }
    }

    /// He-normal initialisation for layers followed by a ReLU.
    pub fn he(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear::new(inputs, outputs, (2.0 / inputs as f64).sqrt(), rng)
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero_();
        z
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.inputs() {
            return Err(HceError::shape("linear", format!("{} input features", self.inputs()), x.ncols()));
        }
        let mut y = Array2::zeros((x.nrows(), self.outputs()));
        general_mat_mul(1.0, &x, &self.weight.t(), 0.0, &mut y);
        y += &self.bias;
        Ok(y)
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<'_, f64>, dy: ArrayView2<'_, f64>, grads: &mut Linear) -> Array2<f64> {
        self.backward_params(x, dy, grads);
        let mut dx = Array2::zeros((dy.nrows(), self.inputs()));
        general_mat_mul(1.0, &dy, &self.weight, 0.0, &mut dx);
        dx
    }

    pub fn backward_params(&self, x: ArrayView2<'_, f64>, dy: ArrayView2<'_, f64>, grads: &mut Linear) {
        general_mat_mul(1.0, &dy.t(), &x, 1.0, &mut grads.weight);
        grads.bias += &dy.sum_axis(Axis(0));
    }
}

impl Params for Linear {
    fn params(&self) -> Vec<ParamRef<'_>> {
        vec![
            ParamRef {
                name: "weight".into(),
                shape: vec![self.weight.nrows(), self.weight.ncols()],
                data: self.weight.as_slice().expect("contiguous"),
            },
            ParamRef {
                name: "bias".into(),
                shape: vec![self.bias.len()],
                data: self.bias.as_slice().expect("contiguous"),
            },
        ]
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        vec![
            ParamMut {
                name: "weight".into(),
                data: self.weight.as_slice_mut().expect("contiguous"),
            },
            ParamMut {
                name: "bias".into(),
                data: self.bias.as_slice_mut().expect("contiguous"),
            },
        ]
    }
}

pub fn relu_inplace<D: ndarray::Dimension>(x: &mut ndarray::Array<f64, D>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes `grad` wherever the ReLU output was not positive.
pub fn relu_backward_inplace<D: ndarray::Dimension>(grad: &mut ndarray::Array<f64, D>, output: &ndarray::Array<f64, D>) {
    ndarray::Zip::from(grad).and(output).for_each(|g, &o| {
        if o <= 0.0 {
            *g = 0.0;
        }
    });
}

/// Mean softmax cross-entropy over rows; returns the loss and `dL/dlogits`.
pub fn softmax_cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let (n, k) = logits.dim();
    assert_eq!(n, labels.len());
    if n == 0 {
        return (0.0, Array2::zeros((0, k)));
    }
    let probs = softmax_rows(logits);
    let mut loss = 0.0;
    let mut grad = probs.clone();
    for (i, &t) in labels.iter().enumerate() {
        let row = logits.row(i);
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[t];
        grad[[i, t]] -= 1.0;
    }
    grad /= n as f64;
    (loss / n as f64, grad)
}

pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    p
}

/// Smooth-L1 summed over elements; returns the loss and its gradient.
pub fn smooth_l1(pred: &[f64], target: &[f64], beta: f64) -> (f64, Vec<f64>) {
    assert_eq!(pred.len(), target.len());
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            if d.abs() < beta {
                loss += 0.5 * d * d / beta;
                d / beta
            } else {
                loss += d.abs() - 0.5 * beta;
                d.signum()
            }
        })
        .collect();
    (loss, grad)
}

/// Binary cross-entropy on logits, summed over elements, in the stable form
/// `max(x, 0) - x y + ln(1 + e^{-|x|})`.
pub fn bce_with_logits_sum(logits: &[f64], targets: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(logits.len(), targets.len());
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(targets)
        .map(|(&x, &y)| {
            loss += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
            sigmoid(x) - y
        })
        .collect();
    (loss, grad)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
