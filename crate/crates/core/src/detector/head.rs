use ndarray::{Array2, ArrayView2};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{self, Linear, ParamMut, ParamRef, Params};

/// The shared "2fc" head: `fc1 -> ReLU -> fc2 -> ReLU`, then a classifier with
/// `C + 1` logits (last slot is background) and a class-specific box
/// regressor with `4 (C + 1)` outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionHead {
    pub fc1: Linear,
    pub fc2: Linear,
    pub cls: Linear,
    pub reg: Linear,
}

#[derive(Debug, Clone)]
pub struct HeadOutput {
    /// `(n, C + 1)`
    pub cls: Array2<f64>,
    /// `(n, 4 (C + 1))`
    pub reg: Array2<f64>,
    pub cache: HeadCache,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    input: Array2<f64>,
    h1: Array2<f64>,
    h2: Array2<f64>,
}

impl DetectionHead {
    pub fn new(channels: usize, hidden: usize, num_classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let inputs = channels * crate::roi_ops::ROI_OUT * crate::roi_ops::ROI_OUT;
        DetectionHead {
            fc1: Linear::he(inputs, hidden, rng),
            fc2: Linear::he(hidden, hidden, rng),
            cls: Linear::new(hidden, num_classes + 1, 0.01, rng),
            reg: Linear::new(hidden, 4 * (num_classes + 1), 0.001, rng),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.cls.outputs() - 1
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero_();
        z
    }

    /// Runs the head on rows of flattened `d x 7 x 7` features.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<HeadOutput> {
        let mut h1 = self.fc1.forward(x)?;
        nn::relu_inplace(&mut h1);
        let mut h2 = self.fc2.forward(h1.view())?;
        nn::relu_inplace(&mut h2);
        let cls = self.cls.forward(h2.view())?;
        let reg = self.reg.forward(h2.view())?;
        Ok(HeadOutput {
            cls,
            reg,
            cache: HeadCache { input: x.to_owned(), h1, h2 },
        })
    }

    /// Backpropagates whichever output gradients are present, accumulating
    /// into `grads`, and returns the gradient wrt the input rows.
    pub fn backward(&self, cache: &HeadCache, dcls: Option<&Array2<f64>>, dreg: Option<&Array2<f64>>, grads: &mut DetectionHead) -> Array2<f64> {
        let mut dh2 = Array2::zeros(cache.h2.dim());
        if let Some(d) = dcls {
            dh2 += &self.cls.backward(cache.h2.view(), d.view(), &mut grads.cls);
        }
        if let Some(d) = dreg {
            dh2 += &self.reg.backward(cache.h2.view(), d.view(), &mut grads.reg);
        }
        nn::relu_backward_inplace(&mut dh2, &cache.h2);
        let mut dh1 = self.fc2.backward(cache.h1.view(), dh2.view(), &mut grads.fc2);
        nn::relu_backward_inplace(&mut dh1, &cache.h1);
        self.fc1.backward(cache.input.view(), dh1.view(), &mut grads.fc1)
    }
}

impl Params for DetectionHead {
    fn params(&self) -> Vec<ParamRef<'_>> {
        nn::prefixed("fc1", self.fc1.params())
            .chain(nn::prefixed("fc2", self.fc2.params()))
            .chain(nn::prefixed("cls", self.cls.params()))
            .chain(nn::prefixed("reg", self.reg.params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let DetectionHead { fc1, fc2, cls, reg } = self;
        nn::prefixed_mut("fc1", fc1.params_mut())
            .chain(nn::prefixed_mut("fc2", fc2.params_mut()))
            .chain(nn::prefixed_mut("cls", cls.params_mut()))
            .chain(nn::prefixed_mut("reg", reg.params_mut()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::module_rng;
    use ndarray::Array1;
    use rand::Rng;

    #[test]
    fn zero_weights_give_bias() {
        let mut rng = module_rng(0, "head");
        let mut h = DetectionHead::new(2, 6, 3, &mut rng);
        h.zero_();
        h.cls.bias = Array1::from(vec![0.1, 0.2, 0.3, 0.4]);
        let x = Array2::from_shape_fn((5, 98), |_| rng.random_range(-1.0..1.0));
        let out = h.forward(x.view()).unwrap();
        for row in out.cls.rows() {
            assert_eq!(row, h.cls.bias.view());
        }
        assert!(out.reg.iter().all(|&v| v == 0.0));
        assert_eq!(out.reg.ncols(), 16);
    }

    #[test]
    fn deterministic_and_shape_checked() {
        let mut rng = module_rng(1, "head");
        let h = DetectionHead::new(2, 6, 3, &mut rng);
        let x = Array2::from_shape_fn((3, 98), |_| rng.random_range(-1.0..1.0));
        let a = h.forward(x.view()).unwrap();
        let b = h.forward(x.view()).unwrap();
        assert_eq!(a.cls, b.cls);
        assert_eq!(a.reg, b.reg);
        assert!(h.forward(Array2::zeros((1, 97)).view()).is_err());
    }
}
