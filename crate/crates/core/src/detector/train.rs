use ndarray::{Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use super::optim::{LrSchedule, Sgd};
use super::rpn::{jitter_proposals, rpn_loss, rpn_proposals, ProposalSource};
use super::targets::assign_targets;
use super::{Detector, HceFlags};
use crate::context::{multilabel_loss, total_loss, LossBundle};
use crate::error::Result;
use crate::nn::{self, module_rng, Params};
use crate::par::Exec;
use crate::roi_ops::Bbox;

/// One training image with its annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `3 x H x W` in `[0, 1]`.
    pub pixels: Array3<f64>,
    pub boxes: Vec<Bbox>,
    pub labels: Vec<usize>,
    /// Binary image-level label vector of length `C`.
    pub image_labels: Array1<f64>,
}

/// Loss terms of one image before averaging over the batch.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct ImageLosses {
    l_feat: f64,
    l_conf: f64,
    l_mll: f64,
    l_rpn: f64,
}

impl Detector {
    /// Forward and backward pass for one image. Every loss gradient is scaled
    /// by `scale` before accumulating into a fresh gradient tree.
    pub(crate) fn image_gradients(&self, sample: &Sample, seed_path: &str, seed: u64, scale: f64) -> Result<(ImageLosses, Detector)> {
        self.image_gradients_with(sample, seed_path, seed, scale, None)
    }

    /// As [`Detector::image_gradients`], optionally with RPN proposals held
    /// fixed. Proposals are constants of the backward pass either way.
    pub(crate) fn image_gradients_with(
        &self,
        sample: &Sample,
        seed_path: &str,
        seed: u64,
        scale: f64,
        fixed_proposals: Option<&[Bbox]>,
    ) -> Result<(ImageLosses, Detector)> {
        let cfg = &self.config;
        let flags: HceFlags = cfg.flags;
        let mut rng = module_rng(seed, seed_path);
        let mut grads = self.zeros_like();
        let mut losses = ImageLosses::default();

        let bb = self.backbone.forward(&sample.pixels)?;
        let d = self.channels();

        // proposals
        let mut dlevels: Vec<Array3<f64>> = bb.levels.iter().map(|l| Array3::zeros(l.data.dim())).collect();
        let proposals = match cfg.proposals {
            ProposalSource::RpnLite => {
                let outs = bb.levels.iter().map(|l| self.rpn.forward_level(l)).collect::<Result<Vec<_>>>()?;
                let anchors = self.anchors(&bb.levels);
                let rl = rpn_loss(&anchors, &outs, &sample.boxes, &cfg.rpn, &mut rng);
                losses.l_rpn = rl.loss;
                for (k, out) in outs.iter().enumerate() {
                    let dobj: Vec<f64> = rl.dobj[k].iter().map(|v| v * scale).collect();
                    let ddel: Vec<[f64; 4]> = rl.ddeltas[k].iter().map(|v| v.map(|x| x * scale)).collect();
                    dlevels[k] += &self.rpn.backward_level(out, &dobj, &ddel, &mut grads.rpn);
                }
                match fixed_proposals {
                    Some(p) => p.to_vec(),
                    None => {
                        let mut p = rpn_proposals(&anchors, &outs, cfg.image_size, &cfg.rpn).boxes;
                        p.extend(sample.boxes.iter().copied());
                        p
                    }
                }
            }
            ProposalSource::GtJitter => jitter_proposals(&sample.boxes, cfg.image_size, &cfg.jitter, usize::MAX, &mut rng).boxes,
        };

        let targets = assign_targets(&proposals, &sample.boxes, &sample.labels, cfg.num_classes, &cfg.assign, &mut rng);
        let idx = targets.sampled_indices();
        let rois: Vec<Bbox> = idx.iter().map(|&i| proposals[i]).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| targets.labels[i]).collect();
        let n_rois = rois.len();

        // context-embedded image feature
        let embedded = self.embed(&bb.top)?;
        let mut dx_embed: Option<Array3<f64>> = None;
        if let (true, Some((x, _))) = (flags.mll, &embedded) {
            let embedder = self.embedder.as_ref().expect("embedder");
            let (logits, pcache) = embedder.multilabel_logits(x)?;
            let (l, dl) = multilabel_loss(&logits, &sample.image_labels)?;
            losses.l_mll = l;
            let dx = embedder.multilabel_logits_backward(&pcache, &(dl * scale), grads.embedder.as_mut().expect("grads"));
            dx_embed = Some(dx);
        }

        let fpn = self.fpn_features(&bb.levels, &rois)?;
        let ctx = match (&embedded, flags.instance) {
            (Some((x, _)), true) => Some(self.context_features(x, &rois)?),
            _ => None,
        };
        let use_ff = flags.ff_train && ctx.is_some();
        let use_cf = flags.cf_train && ctx.is_some();

        let feat_in: Array2<f64> = match (&ctx, use_ff) {
            (Some(c), true) => &fpn.feats + &c.feats,
            _ => fpn.feats.clone(),
        };
        let head_feat = self.head.forward(feat_in.view())?;
        let (l_cls, mut dcls_feat) = nn::softmax_cross_entropy(&head_feat.cls, &labels);
        let mut dreg_feat = Array2::zeros(head_feat.reg.dim());
        let mut l_box = 0.0;
        for (r, &i) in idx.iter().enumerate() {
            let c = labels[r];
            if c == cfg.num_classes {
                continue;
            }
            let pred = head_feat.reg.slice(ndarray::s![r, 4 * c..4 * c + 4]).to_vec();
            let (l, g) = nn::smooth_l1(&pred, &targets.box_targets[i], 1.0);
            l_box += l / n_rois as f64;
            for k in 0..4 {
                dreg_feat[[r, 4 * c + k]] = g[k] / n_rois as f64;
            }
        }
        losses.l_feat = l_cls + l_box;
        dcls_feat *= scale;
        dreg_feat *= scale;

        let mut dfpn = Array2::<f64>::zeros(fpn.feats.dim());
        let mut dctx: Option<Array2<f64>> = ctx.as_ref().map(|c| Array2::zeros(c.feats.dim()));

        if use_cf {
            let c = ctx.as_ref().expect("context");
            let head_ctx = self.head.forward(c.feats.view())?;
            let head_fpn = if use_ff { Some(self.head.forward(fpn.feats.view())?) } else { None };
            let fpn_cls = head_fpn.as_ref().map_or(&head_feat.cls, |h| &h.cls);
            let fused = &head_ctx.cls + fpn_cls;
            let (l_conf, dfused) = nn::softmax_cross_entropy(&fused, &labels);
            losses.l_conf = l_conf;
            let dfused = dfused * scale;
            let dc = self.head.backward(&head_ctx.cache, Some(&dfused), None, &mut grads.head);
            *dctx.as_mut().expect("context grads") += &dc;
            match &head_fpn {
                Some(h) => dfpn += &self.head.backward(&h.cache, Some(&dfused), None, &mut grads.head),
                None => dcls_feat += &dfused,
            }
        }

        let dfeat_in = self.head.backward(&head_feat.cache, Some(&dcls_feat), Some(&dreg_feat), &mut grads.head);
        dfpn += &dfeat_in;
        if use_ff {
            *dctx.as_mut().expect("context grads") += &dfeat_in;
        }

        // back onto X and the top stage
        let mut dtop = None;
        if let Some((x, ecache)) = &embedded {
            let mut dx = dx_embed.take().unwrap_or_else(|| Array3::zeros(x.data.dim()));
            if let (Some(c), Some(dc)) = (&ctx, &dctx) {
                dx += &self.context_backward(c, dc, x.data.dim(), &mut grads);
            }
            let embedder = self.embedder.as_ref().expect("embedder");
            dtop = Some(embedder.embed_backward(ecache, x, dx, grads.embedder.as_mut().expect("grads")));
        }

        // back onto the pyramid
        {
            let mut slices: Vec<&mut [f64]> = dlevels.iter_mut().map(|l| l.as_slice_mut().expect("contiguous")).collect();
            for (r, plan) in fpn.plans.iter().enumerate() {
                let row = dfpn.row(r);
                plan.backward_into(row.as_slice().expect("contiguous row"), d, slices[fpn.level_of[r]]);
            }
        }
        self.backbone.backward(&bb.cache, dlevels, dtop, &mut grads.backbone);
        Ok((losses, grads))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap; `0` disables clipping.
    pub clip_norm: f64,
    pub schedule: LrSchedule,
}

/// Owns a detector and its optimiser state and applies one update per batch.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Detector,
    pub optimizer: Sgd,
    pub config: TrainerConfig,
    pub step: usize,
    pub exec: Exec,
}

impl Trainer {
    pub fn new(model: Detector, config: TrainerConfig) -> Self {
        Trainer {
            model,
            optimizer: Sgd::new(config.momentum, config.weight_decay),
            config,
            step: 0,
            exec: Exec::default(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.config.schedule.lr_at(self.step)
    }

    /// Losses and summed gradients of a batch without updating anything.
    pub fn batch_gradients(&self, batch: &[Sample]) -> Result<(LossBundle, Detector)> {
        let scale = 1.0 / batch.len().max(1) as f64;
        let step = self.step;
        let seed = self.config.seed;
        let model = &self.model;
        let results = self.exec.map_range(0..batch.len(), |i| {
            model.image_gradients(&batch[i], &format!("train.step{step}.image{i}"), seed, scale)
        });
        let mut grads = model.zeros_like();
        let mut sum = ImageLosses::default();
        for r in results {
            let (l, g) = r?;
            grads.add_assign_from(&g);
            sum.l_feat += l.l_feat * scale;
            sum.l_conf += l.l_conf * scale;
            sum.l_mll += l.l_mll * scale;
            sum.l_rpn += l.l_rpn * scale;
        }
        let bundle = total_loss(sum.l_feat, sum.l_conf, sum.l_mll, sum.l_rpn)?;
        Ok((bundle, grads))
    }

    /// One optimiser update on the unweighted sum of the four losses.
    pub fn train_step(&mut self, batch: &[Sample]) -> Result<LossBundle> {
        let (bundle, mut grads) = self.batch_gradients(batch)?;
        if self.config.clip_norm > 0.0 {
            let norm = grads.params().iter().flat_map(|p| p.data.iter()).map(|v| v * v).sum::<f64>().sqrt();
            if norm > self.config.clip_norm {
                let k = self.config.clip_norm / norm;
                for p in grads.params_mut() {
                    p.data.iter_mut().for_each(|v| *v *= k);
                }
            }
        }
        let lr = self.lr();
        self.optimizer.step(&mut self.model, &grads, lr);
        self.step += 1;
        Ok(bundle)
    }
}

/// Summed image-level labels of a batch, handy for logging.
pub fn label_histogram(batch: &[Sample]) -> Array1<f64> {
    let views: Vec<_> = batch.iter().map(|s| s.image_labels.view()).collect();
    if views.is_empty() {
        return Array1::zeros(0);
    }
    ndarray::stack(Axis(0), &views).expect("equal lengths").sum_axis(Axis(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{BackboneConfig, ModelConfig};
    use rand::Rng;

    fn tiny_config(proposals: ProposalSource, flags: HceFlags) -> ModelConfig {
        let mut cfg = ModelConfig {
            num_classes: 3,
            image_size: (32, 32),
            backbone: BackboneConfig {
                stage_channels: vec![4, 4, 4, 4],
                convs_per_stage: 1,
                fpn_channels: 4,
                pyramid_start: 1,
            },
            head_hidden: 8,
            flags,
            proposals,
            ..ModelConfig::default()
        };
        cfg.assign.rois_per_image = 12;
        cfg.rpn.batch_per_image = 16;
        cfg.jitter.per_gt = 3;
        cfg.jitter.negatives = 4;
        cfg
    }

    fn sample(seed: u64) -> Sample {
        let mut rng = module_rng(seed, "sample");
        let pixels = Array3::from_shape_fn((3, 32, 32), |_| rng.random::<f64>());
        let boxes = vec![Bbox::new(3.0, 4.0, 17.0, 20.0).unwrap(), Bbox::new(12.0, 10.0, 30.0, 29.0).unwrap()];
        let labels = vec![0, 2];
        let image_labels = Array1::from(vec![1.0, 0.0, 1.0]);
        Sample {
            pixels,
            boxes,
            labels,
            image_labels,
        }
    }

    fn total(model: &Detector, s: &Sample, fixed: Option<&[Bbox]>) -> f64 {
        let (l, _) = model.image_gradients_with(s, "fd", 3, 1.0, fixed).unwrap();
        l.l_feat + l.l_conf + l.l_mll + l.l_rpn
    }

    fn check(cfg: ModelConfig) {
        let mut model = Detector::new(cfg, 11).unwrap();
        // zero biases put ReLU inputs exactly on the kink
        let mut rng = module_rng(2, "bias");
        for p in model.params_mut().into_iter().filter(|p| p.name.ends_with("bias")) {
            p.data.iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05));
        }
        let s = sample(1);
        let fixed = (model.config.proposals == ProposalSource::RpnLite).then(|| {
            let bb = model.backbone.forward(&s.pixels).unwrap();
            let mut p = model.proposals(&bb.levels).unwrap();
            p.extend(s.boxes.iter().copied());
            p
        });
        let fixed = fixed.as_deref();
        let (_, grads) = model.image_gradients_with(&s, "fd", 3, 1.0, fixed).unwrap();
        let gparams = grads.params();
        let mut rng = module_rng(5, "pick");
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for (pi, p) in model.params().iter().enumerate() {
            for _ in 0..3 {
                let k = rng.random_range(0..p.data.len());
                let mut plus = model.clone();
                plus.params_mut()[pi].data[k] += eps;
                let mut minus = model.clone();
                minus.params_mut()[pi].data[k] -= eps;
                let fd = (total(&plus, &s, fixed) - total(&minus, &s, fixed)) / (2.0 * eps);
                let an = gparams[pi].data[k];
                let err = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-4);
                assert!(err < 1e-3, "{}[{k}]: fd {fd} analytic {an}", p.name);
                worst = worst.max(err);
            }
        }
        assert!(worst.is_finite());
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        check(tiny_config(ProposalSource::GtJitter, HceFlags::FULL));
    }

    #[test]
    fn rpn_gradients_match_finite_differences() {
        check(tiny_config(ProposalSource::RpnLite, HceFlags::FULL));
    }

    #[test]
    fn single_fusion_variants_match_finite_differences() {
        for (ff, cf) in [(true, false), (false, true)] {
            let flags = HceFlags {
                ff_train: ff,
                cf_train: cf,
                ..HceFlags::FULL
            };
            check(tiny_config(ProposalSource::GtJitter, flags));
        }
        let mll_only = HceFlags {
            mll: true,
            ..HceFlags::BASELINE
        };
        check(tiny_config(ProposalSource::GtJitter, mll_only));
    }

    #[test]
    fn jitter_mode_has_no_rpn_loss() {
        let model = Detector::new(tiny_config(ProposalSource::GtJitter, HceFlags::FULL), 1).unwrap();
        let (l, _) = model.image_gradients(&sample(2), "x", 0, 1.0).unwrap();
        assert_eq!(l.l_rpn, 0.0);
        assert!(l.l_mll > 0.0 && l.l_conf > 0.0 && l.l_feat > 0.0);
    }

    #[test]
    fn baseline_has_only_feature_and_rpn_losses() {
        let model = Detector::new(tiny_config(ProposalSource::RpnLite, HceFlags::BASELINE), 1).unwrap();
        let (l, _) = model.image_gradients(&sample(2), "x", 0, 1.0).unwrap();
        assert_eq!((l.l_mll, l.l_conf), (0.0, 0.0));
        assert!(l.l_rpn > 0.0);
    }

    #[test]
    fn sequential_and_parallel_steps_agree() {
        let model = Detector::new(tiny_config(ProposalSource::RpnLite, HceFlags::FULL), 1).unwrap();
        let cfg = TrainerConfig {
            seed: 9,
            batch_size: 3,
            momentum: 0.9,
            weight_decay: 1e-4,
            clip_norm: 0.0,
            schedule: LrSchedule {
                base_lr: 0.01,
                warmup_steps: 0,
                warmup_ratio: 1.0,
                steps_per_epoch: 1,
                epochs: 12,
            },
        };
        let batch: Vec<Sample> = (0..3).map(sample).collect();
        let mut a = Trainer::new(model.clone(), cfg);
        a.exec = Exec::Sequential;
        let mut b = Trainer::new(model, cfg);
        b.exec = Exec::Parallel;
        for _ in 0..2 {
            assert_eq!(a.train_step(&batch).unwrap(), b.train_step(&batch).unwrap());
        }
        assert_eq!(a.model, b.model);
    }
}
