//! Hierarchical context embedding.
//!
//! * [`ContextEmbedder`]: a 3x3 conv on the deepest backbone stage produces the
//!   context-embedded image feature `X`; global max- plus average-pooling of
//!   `X` feeds a single affine layer giving one logit per category, trained
//!   with a summed binary cross-entropy against the image-level label vector.
//! * [`instance_feature`] / [`global_feature`]: RoIAlign of `X` over the
//!   proposal and over the whole image.
//! * [`ContextualFeatureGenerator`]: ReLU(1x1 conv) over the channel
//!   concatenation `(instance, global)`.
//! * [`feature_fusion`] adds the contextual RoI feature to the FPN RoI feature;
//!   [`confidence_fusion`] adds the classification logits the shared head
//!   produces for each of them.
//! * [`total_loss`] is the unweighted sum of the four loss terms.

use ndarray::{Array1, Array2, Array3, Axis};
use rand_chacha::ChaCha8Rng;

use crate::detector::head::DetectionHead;
use crate::error::{HceError, Result};
use crate::nn::{self, Conv2d, ConvCache, Linear, ParamMut, ParamRef, Params};
use crate::roi_ops::{gap, gap_backward, gmp, gmp_backward, roi_align, Bbox, FeatureMap, GmpOutput, ROI_OUT, SAMPLES_PER_BIN};

#[derive(Debug, Clone, PartialEq)]
pub struct ContextEmbedder {
    /// 3x3, stride 1, padding 1.
    pub conv: Conv2d,
    /// `d -> C`, bias initialised to zero.
    pub cls: Linear,
}

#[derive(Debug, Clone)]
pub struct EmbedCache {
    conv: ConvCache,
}

#[derive(Debug, Clone)]
pub struct PoolCache {
    dims: (usize, usize, usize),
    max: GmpOutput,
    pooled: Array1<f64>,
}

impl ContextEmbedder {
    pub fn new(in_channels: usize, channels: usize, num_classes: usize, rng: &mut ChaCha8Rng) -> Self {
        ContextEmbedder {
            conv: Conv2d::new(in_channels, channels, 3, 1, 1, rng),
            cls: Linear::new(channels, num_classes, 0.01, rng),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.cls.outputs()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero_();
        z
    }

    /// `X = ReLU(conv3x3(top))`, same spatial size and stride as `top`.
    pub fn embed(&self, top: &FeatureMap) -> Result<(FeatureMap, EmbedCache)> {
        let (mut x, conv) = self.conv.forward(&top.data)?;
        nn::relu_inplace(&mut x);
        Ok((FeatureMap { data: x, stride: top.stride }, EmbedCache { conv }))
    }

    /// Gradient wrt the backbone top stage; parameter gradients go into `grads`.
    pub fn embed_backward(&self, cache: &EmbedCache, x: &FeatureMap, mut dx: Array3<f64>, grads: &mut ContextEmbedder) -> Array3<f64> {
        nn::relu_backward_inplace(&mut dx, &x.data);
        self.conv.backward(&cache.conv, &dx, &mut grads.conv)
    }

    /// Raw multi-label logits `f_cls(gmp(X) + gap(X))`.
    pub fn multilabel_logits(&self, x: &FeatureMap) -> Result<(Array1<f64>, PoolCache)> {
        if x.channels() != self.cls.inputs() {
            return Err(HceError::shape("multilabel_logits", self.cls.inputs(), x.channels()));
        }
        let max = gmp(x);
        let pooled = &max.values + &gap(x);
        let logits = self.cls.forward(pooled.view().insert_axis(Axis(0)))?.index_axis_move(Axis(0), 0);
        Ok((
            logits,
            PoolCache {
                dims: x.data.dim(),
                max,
                pooled,
            },
        ))
    }

    /// Gradient of the logits wrt `X`; `f_cls` gradients go into `grads`.
    pub fn multilabel_logits_backward(&self, cache: &PoolCache, dlogits: &Array1<f64>, grads: &mut ContextEmbedder) -> Array3<f64> {
        let xin = cache.pooled.view().insert_axis(Axis(0));
        let dy = dlogits.view().insert_axis(Axis(0));
        let dpooled = self.cls.backward(xin, dy, &mut grads.cls).index_axis_move(Axis(0), 0);
        gmp_backward(&dpooled, &cache.max, cache.dims) + gap_backward(&dpooled, cache.dims)
    }
}

impl Params for ContextEmbedder {
    fn params(&self) -> Vec<ParamRef<'_>> {
        nn::prefixed("conv", self.conv.params()).chain(nn::prefixed("cls", self.cls.params())).collect()
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let ContextEmbedder { conv, cls } = self;
        nn::prefixed_mut("conv", conv.params_mut())
            .chain(nn::prefixed_mut("cls", cls.params_mut()))
            .collect()
    }
}

/// Summed binary cross-entropy between multi-label logits and the binary
/// image-level target. Returns the loss and its gradient wrt the logits.
pub fn multilabel_loss(logits: &Array1<f64>, target: &Array1<f64>) -> Result<(f64, Array1<f64>)> {
    if logits.len() != target.len() {
        return Err(HceError::shape("multilabel_loss", logits.len(), target.len()));
    }
    if let Some((index, &value)) = target.iter().enumerate().find(|(_, &v)| v != 0.0 && v != 1.0) {
        return Err(HceError::NonBinaryTarget { index, value });
    }
    let (loss, grad) = nn::bce_with_logits_sum(logits.as_slice().expect("contiguous"), target.as_slice().expect("contiguous"));
    Ok((loss, Array1::from(grad)))
}

/// Context-embedded instance feature: RoIAlign of `X` over the proposal.
pub fn instance_feature(x: &FeatureMap, bbox: &Bbox) -> Result<Array3<f64>> {
    roi_align(x, bbox, (ROI_OUT, ROI_OUT), SAMPLES_PER_BIN)
}

/// Context-aggregated global feature: RoIAlign of `X` over `(0, 0, W, H)`.
pub fn global_feature(x: &FeatureMap, image_size: (usize, usize)) -> Result<Array3<f64>> {
    roi_align(x, &full_image_box(image_size), (ROI_OUT, ROI_OUT), SAMPLES_PER_BIN)
}

pub fn full_image_box((height, width): (usize, usize)) -> Bbox {
    Bbox {
        x1: 0.0,
        y1: 0.0,
        x2: width as f64,
        y2: height as f64,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextualFeatureGenerator {
    /// 1x1 conv, `2d -> d`. Input channels are `(instance, global)`.
    pub conv: Conv2d,
}

#[derive(Debug, Clone)]
pub struct ContextCache {
    conv: ConvCache,
    output: Array3<f64>,
}

impl ContextualFeatureGenerator {
    pub fn new(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        ContextualFeatureGenerator {
            conv: Conv2d::new(2 * channels, channels, 1, 1, 0, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.conv.out_ch
    }

    pub fn zeros_like(&self) -> Self {
        ContextualFeatureGenerator { conv: self.conv.zeros_like() }
    }

    /// `ReLU(conv1x1([instance : global]))`.
    pub fn forward(&self, instance: &Array3<f64>, global: &Array3<f64>) -> Result<(Array3<f64>, ContextCache)> {
        let d = self.channels();
        let want = (d, ROI_OUT, ROI_OUT);
        if instance.dim() != want {
            return Err(HceError::shape("contextual_roi_feature", format!("{want:?}"), format!("{:?}", instance.dim())));
        }
        if global.dim() != want {
            return Err(HceError::shape("contextual_roi_feature", format!("{want:?}"), format!("{:?}", global.dim())));
        }
        let cat = ndarray::concatenate(Axis(0), &[instance.view(), global.view()]).expect("matching shapes");
        let (mut out, conv) = self.conv.forward(&cat)?;
        nn::relu_inplace(&mut out);
        Ok((out.clone(), ContextCache { conv, output: out }))
    }

    /// Returns `(d instance, d global)`; parameter gradients go into `grads`.
    pub fn backward(&self, cache: &ContextCache, mut dout: Array3<f64>, grads: &mut ContextualFeatureGenerator) -> (Array3<f64>, Array3<f64>) {
        nn::relu_backward_inplace(&mut dout, &cache.output);
        let dcat = self.conv.backward(&cache.conv, &dout, &mut grads.conv);
        let d = self.channels();
        let di = dcat.slice(ndarray::s![..d, .., ..]).to_owned();
        let dg = dcat.slice(ndarray::s![d.., .., ..]).to_owned();
        (di, dg)
    }
}

impl Params for ContextualFeatureGenerator {
    fn params(&self) -> Vec<ParamRef<'_>> {
        nn::prefixed("conv", self.conv.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        nn::prefixed_mut("conv", self.conv.params_mut()).collect()
    }
}

/// Contextual RoI feature for one proposal.
pub fn contextual_roi_feature(instance: &Array3<f64>, global: &Array3<f64>, generator: &ContextualFeatureGenerator) -> Result<Array3<f64>> {
    generator.forward(instance, global).map(|(out, _)| out)
}

/// Elementwise `x_context + x_fpn`.
pub fn feature_fusion(x_context: &Array3<f64>, x_fpn: &Array3<f64>) -> Result<Array3<f64>> {
    if x_context.dim() != x_fpn.dim() {
        return Err(HceError::shape(
            "feature_fusion",
            format!("{:?}", x_fpn.dim()),
            format!("{:?}", x_context.dim()),
        ));
    }
    Ok(x_context + x_fpn)
}

/// `head_cls(x_context) + head_cls(x_fpn)` on raw logits, using one head for both.
pub fn confidence_fusion(x_context: &Array3<f64>, x_fpn: &Array3<f64>, head: &DetectionHead) -> Result<Array1<f64>> {
    if x_context.dim() != x_fpn.dim() {
        return Err(HceError::shape(
            "confidence_fusion",
            format!("{:?}", x_fpn.dim()),
            format!("{:?}", x_context.dim()),
        ));
    }
    let rows = flatten_rows(&[x_context, x_fpn]);
    let out = head.forward(rows.view())?;
    Ok(&out.cls.row(0) + &out.cls.row(1))
}

/// Stacks `d x 7 x 7` features as rows of a `(n, d*49)` matrix.
pub fn flatten_rows(features: &[&Array3<f64>]) -> Array2<f64> {
    let width = features.first().map_or(0, |f| f.len());
    let mut m = Array2::zeros((features.len(), width));
    for (mut row, f) in m.rows_mut().into_iter().zip(features) {
        row.assign(&ndarray::ArrayView1::from(f.as_standard_layout().as_slice().expect("contiguous")));
    }
    m
}

/// The four training loss terms and their unweighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct LossBundle {
    pub l_feat: f64,
    pub l_conf: f64,
    pub l_mll: f64,
    pub l_rpn: f64,
    pub l_total: f64,
}

pub fn total_loss(l_feat: f64, l_conf: f64, l_mll: f64, l_rpn: f64) -> Result<LossBundle> {
    for (term, value) in [("L_feat", l_feat), ("L_conf", l_conf), ("L_mll", l_mll), ("L_rpn", l_rpn)] {
        if !value.is_finite() {
            return Err(HceError::NonFiniteLoss { term, value });
        }
    }
    Ok(LossBundle {
        l_feat,
        l_conf,
        l_mll,
        l_rpn,
        l_total: l_feat + l_conf + l_mll + l_rpn,
    })
}
