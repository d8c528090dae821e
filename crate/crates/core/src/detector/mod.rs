//! The two-stage detector: backbone with FPN, proposal provider, shared 2fc
//! head and the optional context modules.

pub mod backbone;
pub mod checkpoint;
pub mod head;
pub mod infer;
pub mod optim;
pub mod rpn;
pub mod targets;
pub mod train;

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::context::{full_image_box, ContextCache, ContextEmbedder, ContextualFeatureGenerator, EmbedCache};
use crate::error::{HceError, Result};
use crate::nn::{self, module_rng, ParamMut, ParamRef, Params};
use crate::roi_ops::{AlignPlan, Bbox, FeatureMap, ROI_OUT};

pub use backbone::{Backbone, BackboneConfig};
pub use head::DetectionHead;
pub use infer::{Branch, Detection, TestConfig, TestFlags};
pub use rpn::{JitterConfig, ProposalSet, ProposalSource, RpnConfig, RpnHead};
pub use targets::{assign_targets, decode_boxes, AssignConfig, RoiTargets};
pub use train::{Sample, Trainer, TrainerConfig};

/// Which context operations are enabled, and which fusion losses train them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HceFlags {
    /// Image-level multi-label embedding and its loss.
    pub mll: bool,
    /// Contextual RoI feature from the instance RoIAlign of `X`.
    pub instance: bool,
    /// Adds the whole-image RoIAlign of `X` to the contextual feature.
    pub global: bool,
    /// Feature fusion feeds the head during training.
    pub ff_train: bool,
    /// Confidence fusion contributes its own loss.
    pub cf_train: bool,
}

impl HceFlags {
    pub const BASELINE: HceFlags = HceFlags {
        mll: false,
        instance: false,
        global: false,
        ff_train: false,
        cf_train: false,
    };

    pub const FULL: HceFlags = HceFlags {
        mll: true,
        instance: true,
        global: true,
        ff_train: true,
        cf_train: true,
    };

    pub fn validate(&self) -> Result<()> {
        if self.instance && !self.mll {
            return Err(HceError::Config("instance=true requires mll=true (context operations are cumulative)".into()));
        }
        if self.global && !self.instance {
            return Err(HceError::Config(
                "global=true requires instance=true (context operations are cumulative)".into(),
            ));
        }
        if (self.ff_train || self.cf_train) && !self.instance {
            return Err(HceError::Config(
                "ff_train/cf_train need a contextual RoI feature: set instance=true or disable both fusion flags".into(),
            ));
        }
        if self.instance && !self.ff_train && !self.cf_train {
            return Err(HceError::Config(
                "instance=true needs ff_train or cf_train, otherwise the contextual feature is never trained".into(),
            ));
        }
        Ok(())
    }

    pub fn has_context(&self) -> bool {
        self.instance
    }
}

/// Where confidence-fusion detections take their boxes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CfBoxSource {
    /// Regression of the feature-branch head pass.
    Fusion,
    /// Regression of the head pass on the FPN RoI feature alone.
    Fpn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_classes: usize,
    /// `(height, width)` of every input image.
    pub image_size: (usize, usize),
    pub backbone: BackboneConfig,
    pub head_hidden: usize,
    pub flags: HceFlags,
    pub proposals: ProposalSource,
    pub rpn: RpnConfig,
    pub jitter: JitterConfig,
    pub assign: AssignConfig,
    /// Boxes with `sqrt(area) < 2 * finest_scale` go to the finest level.
    pub finest_scale: f64,
    pub cf_box_source: CfBoxSource,
    pub test: TestConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 10,
            image_size: (64, 64),
            backbone: BackboneConfig::default(),
            head_hidden: 128,
            flags: HceFlags::FULL,
            proposals: ProposalSource::RpnLite,
            rpn: RpnConfig::default(),
            jitter: JitterConfig::default(),
            assign: AssignConfig::default(),
            finest_scale: 16.0,
            cf_box_source: CfBoxSource::Fusion,
            test: TestConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.flags.validate()?;
        if self.num_classes == 0 || self.head_hidden == 0 {
            return Err(HceError::Config("num_classes and head_hidden must be positive".into()));
        }
        let fs = self.backbone.final_stride();
        let (h, w) = self.image_size;
        if h == 0 || w == 0 || h % fs != 0 || w % fs != 0 {
            return Err(HceError::Config(format!(
                "image size {h}x{w} must be a positive multiple of the final stride {fs}"
            )));
        }
        Ok(())
    }

    /// Pyramid level for a RoI: `floor(log2(scale / finest_scale))`, clamped.
    pub fn roi_level(&self, b: &Bbox) -> usize {
        let n = self.backbone.level_strides().len();
        let scale = b.area().sqrt();
        let lvl = (scale / self.finest_scale + 1e-6).log2().floor();
        if lvl.is_nan() || lvl < 0.0 {
            0
        } else {
            (lvl as usize).min(n - 1)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub rpn: RpnHead,
    /// One parameter set, applied to every RoI feature.
    pub head: DetectionHead,
    pub embedder: Option<ContextEmbedder>,
    pub generator: Option<ContextualFeatureGenerator>,
}

impl Detector {
    /// Each module is initialised from its own seeded stream, so models that
    /// differ only in their context flags share backbone, RPN and head weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.backbone.fpn_channels;
        let backbone = Backbone::new(&config.backbone, seed)?;
        let rpn = RpnHead::new(d, seed);
        let head = DetectionHead::new(d, config.head_hidden, config.num_classes, &mut module_rng(seed, "head"));
        let embedder = (config.flags.mll || config.flags.instance)
            .then(|| ContextEmbedder::new(config.backbone.top_channels(), d, config.num_classes, &mut module_rng(seed, "context.embedder")));
        let generator = config
            .flags
            .instance
            .then(|| ContextualFeatureGenerator::new(d, &mut module_rng(seed, "context.generator")));
        Ok(Detector {
            config,
            backbone,
            rpn,
            head,
            embedder,
            generator,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero_();
        z
    }

    /// Zeroes the embedder and contextual-feature parameters, which makes the
    /// contextual RoI feature identically zero.
    pub fn zero_context(&mut self) {
        if let Some(e) = self.embedder.as_mut() {
            e.zero_();
        }
        if let Some(g) = self.generator.as_mut() {
            g.zero_();
        }
    }

    pub fn channels(&self) -> usize {
        self.config.backbone.fpn_channels
    }

    pub(crate) fn anchors(&self, levels: &[FeatureMap]) -> Vec<Vec<Bbox>> {
        levels
            .iter()
            .map(|l| rpn::level_anchors(l.height(), l.width(), l.stride, self.config.rpn.anchor_scale))
            .collect()
    }

    /// FPN RoI features, the first half of every head input.
    pub(crate) fn fpn_features(&self, levels: &[FeatureMap], rois: &[Bbox]) -> Result<FpnRois> {
        let d = self.channels();
        let width = d * ROI_OUT * ROI_OUT;
        let mut feats = Array2::zeros((rois.len(), width));
        let mut plans = Vec::with_capacity(rois.len());
        let mut level_of = Vec::with_capacity(rois.len());
        let level_data: Vec<_> = levels.iter().map(|l| l.data.as_standard_layout()).collect();
        for (r, b) in rois.iter().enumerate() {
            let lvl = self.config.roi_level(b);
            let map = &levels[lvl];
            let plan = AlignPlan::for_map(map, b)?;
            let mut row = feats.row_mut(r);
            plan.forward_into(level_data[lvl].as_slice().expect("contiguous"), d, row.as_slice_mut().expect("contiguous row"));
            plans.push(plan);
            level_of.push(lvl);
        }
        Ok(FpnRois { feats, plans, level_of })
    }

    /// Contextual RoI features from the context-embedded feature `x`.
    pub(crate) fn context_features(&self, x: &FeatureMap, rois: &[Bbox]) -> Result<ContextRois> {
        let generator = self.generator.as_ref().expect("context features need the generator");
        let d = self.channels();
        let width = d * ROI_OUT * ROI_OUT;
        let xdata = x.data.as_standard_layout();
        let xs = xdata.as_slice().expect("contiguous");
        let global_plan = if self.config.flags.global {
            Some(AlignPlan::for_map(x, &full_image_box(self.config.image_size))?)
        } else {
            None
        };
        let mut global = Array1::zeros(width);
        if let Some(plan) = &global_plan {
            plan.forward_into(xs, d, global.as_slice_mut().expect("contiguous"));
        }
        let global3 = global.clone().into_shape_with_order((d, ROI_OUT, ROI_OUT)).expect("shape");
        let mut feats = Array2::zeros((rois.len(), width));
        let mut plans = Vec::with_capacity(rois.len());
        let mut caches = Vec::with_capacity(rois.len());
        let mut inst = vec![0.0; width];
        for (r, b) in rois.iter().enumerate() {
            let plan = AlignPlan::for_map(x, b)?;
            plan.forward_into(xs, d, &mut inst);
            let inst3 = Array3::from_shape_vec((d, ROI_OUT, ROI_OUT), inst.clone()).expect("shape");
            let (ctx, cache) = generator.forward(&inst3, &global3)?;
            feats.row_mut(r).assign(&ndarray::ArrayView1::from(ctx.as_slice().expect("contiguous")));
            plans.push(plan);
            caches.push(cache);
        }
        Ok(ContextRois {
            feats,
            global,
            plans,
            global_plan,
            caches,
        })
    }

    /// The flattened global context slot produced while computing contextual
    /// features for `rois` on `image`; `None` without the instance context.
    pub fn global_context(&self, image: &Array3<f64>, rois: &[Bbox]) -> Result<Option<Array1<f64>>> {
        if !self.config.flags.instance {
            return Ok(None);
        }
        let bb = self.backbone.forward(image)?;
        let (x, _) = self.embed(&bb.top)?.expect("embedder present with instance");
        Ok(Some(self.context_features(&x, rois)?.global))
    }

    /// Scatters contextual-feature gradients back onto `X`.
    pub(crate) fn context_backward(&self, ctx: &ContextRois, dfeats: &Array2<f64>, x_dims: (usize, usize, usize), grads: &mut Detector) -> Array3<f64> {
        let generator = self.generator.as_ref().expect("generator");
        let ggen = grads.generator.as_mut().expect("generator grads");
        let d = self.channels();
        let mut dx = Array3::zeros(x_dims);
        let mut dglobal = Array3::<f64>::zeros((d, ROI_OUT, ROI_OUT));
        {
            let dxs = dx.as_slice_mut().expect("contiguous");
            for (r, (plan, cache)) in ctx.plans.iter().zip(&ctx.caches).enumerate() {
                let drow = dfeats.row(r);
                if drow.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let dout = Array3::from_shape_vec((d, ROI_OUT, ROI_OUT), drow.to_vec()).expect("shape");
                let (dinst, dglob) = generator.backward(cache, dout, ggen);
                plan.backward_into(dinst.as_slice().expect("contiguous"), d, dxs);
                dglobal += &dglob;
            }
            if let Some(plan) = &ctx.global_plan {
                plan.backward_into(dglobal.as_slice().expect("contiguous"), d, dxs);
            }
        }
        dx
    }

    /// Runs the context embedder on the top stage when present.
    pub(crate) fn embed(&self, top: &FeatureMap) -> Result<Option<(FeatureMap, EmbedCache)>> {
        self.embedder.as_ref().map(|e| e.embed(top)).transpose()
    }
}

/// FPN RoI features plus what the backward pass needs.
pub(crate) struct FpnRois {
    /// `(R, d * 49)`
    pub feats: Array2<f64>,
    pub plans: Vec<AlignPlan>,
    pub level_of: Vec<usize>,
}

pub(crate) struct ContextRois {
    /// `(R, d * 49)`, post-ReLU contextual features.
    pub feats: Array2<f64>,
    /// Flattened global feature, zero when the global branch is off.
    pub global: Array1<f64>,
    pub plans: Vec<AlignPlan>,
    pub global_plan: Option<AlignPlan>,
    pub caches: Vec<ContextCache>,
}

impl Params for Detector {
    fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out: Vec<ParamRef<'_>> = nn::prefixed("backbone", self.backbone.params())
            .chain(nn::prefixed("rpn", self.rpn.params()))
            .chain(nn::prefixed("head", self.head.params()))
            .collect();
        if let Some(e) = &self.embedder {
            out.extend(nn::prefixed("context.embedder", e.params()));
        }
        if let Some(g) = &self.generator {
            out.extend(nn::prefixed("context.generator", g.params()));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let Detector {
            backbone,
            rpn,
            head,
            embedder,
            generator,
            ..
        } = self;
        let mut out: Vec<ParamMut<'_>> = nn::prefixed_mut("backbone", backbone.params_mut())
            .chain(nn::prefixed_mut("rpn", rpn.params_mut()))
            .chain(nn::prefixed_mut("head", head.params_mut()))
            .collect();
        if let Some(e) = embedder {
            out.extend(nn::prefixed_mut("context.embedder", e.params_mut()));
        }
        if let Some(g) = generator {
            out.extend(nn::prefixed_mut("context.generator", g.params_mut()));
        }
        out
    }
}

/// Parameters the context modules add on top of the baseline detector:
/// the 3x3 conv, the `d -> C` classifier and the `2d -> d` 1x1 conv.
pub fn context_parameter_count(config: &ModelConfig) -> usize {
    let d = config.backbone.fpn_channels;
    let top = config.backbone.top_channels();
    let c = config.num_classes;
    let mut n = 0;
    if config.flags.mll || config.flags.instance {
        n += d * top * 9 + d + c * d + c;
    }
    if config.flags.instance {
        n += d * 2 * d + d;
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_invariants() {
        assert!(HceFlags::BASELINE.validate().is_ok());
        assert!(HceFlags::FULL.validate().is_ok());
        let bad = HceFlags {
            mll: false,
            instance: true,
            ..HceFlags::FULL
        };
        assert!(bad.validate().is_err());
        let bad = HceFlags {
            instance: false,
            global: true,
            ..HceFlags::FULL
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn level_assignment_grows_with_scale() {
        let cfg = ModelConfig::default();
        let lvl = |s: f64| cfg.roi_level(&Bbox::new(0.0, 0.0, s, s).unwrap());
        assert_eq!(lvl(8.0), 0);
        assert_eq!(lvl(31.0), 0);
        assert_eq!(lvl(32.0), 1);
        assert_eq!(lvl(64.0), 2);
        assert_eq!(lvl(640.0), 2);
    }

    #[test]
    fn shared_modules_match_across_flag_sets() {
        let mut full = ModelConfig::default();
        full.backbone.fpn_channels = 8;
        let base = ModelConfig {
            flags: HceFlags::BASELINE,
            ..full.clone()
        };
        let a = Detector::new(full.clone(), 4).unwrap();
        let b = Detector::new(base, 4).unwrap();
        assert_eq!(a.backbone, b.backbone);
        assert_eq!(a.head, b.head);
        assert_eq!(a.rpn, b.rpn);
        assert!(b.embedder.is_none() && b.generator.is_none());
        assert_eq!(a.num_params() - b.num_params(), context_parameter_count(&full));
    }
}
