use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::targets::{best_match, clip_valid, decode, encode, RPN_STDS};
use crate::error::Result;
use crate::nn::{self, module_rng, Conv2d, ConvCache, ParamMut, ParamRef, Params};
use crate::roi_ops::{iou, nms, Bbox, FeatureMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalSource {
    RpnLite,
    GtJitter,
}

/// Candidate boxes for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSet {
    pub boxes: Vec<Bbox>,
    pub objectness: Vec<f64>,
    pub source: ProposalSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RpnConfig {
    /// Anchor side length as a multiple of the level stride.
    pub anchor_scale: f64,
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub batch_per_image: usize,
    pub pos_fraction: f64,
    pub nms_iou: f64,
    pub max_proposals: usize,
    pub min_size: f64,
}

impl Default for RpnConfig {
    fn default() -> Self {
        RpnConfig {
            anchor_scale: 3.0,
            pos_iou: 0.5,
            neg_iou: 0.3,
            batch_per_image: 64,
            pos_fraction: 0.5,
            nms_iou: 0.7,
            max_proposals: 300,
            min_size: 1.0,
        }
    }
}

/// Ground-truth jitter settings for the `gt_jitter` proposal mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterConfig {
    /// Maximum perturbation of each coordinate as a fraction of box size.
    pub noise: f64,
    pub per_gt: usize,
    pub negatives: usize,
}

impl Default for JitterConfig {
    fn default() -> Self {
        JitterConfig {
            noise: 0.2,
            per_gt: 8,
            negatives: 32,
        }
    }
}

/// One square anchor per cell, centred on the cell, side `scale * stride`.
pub fn level_anchors(height: usize, width: usize, stride: f64, scale: f64) -> Vec<Bbox> {
    let half = 0.5 * scale * stride;
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let cx = (x as f64 + 0.5) * stride;
            let cy = (y as f64 + 0.5) * stride;
            out.push(Bbox {
                x1: cx - half,
                y1: cy - half,
                x2: cx + half,
                y2: cy + half,
            });
        }
    }
    out
}

/// Shared 3x3 conv, then 1x1 objectness and 1x1 box deltas on every level.
#[derive(Debug, Clone, PartialEq)]
pub struct RpnHead {
    pub conv: Conv2d,
    pub obj: Conv2d,
    pub reg: Conv2d,
}

#[derive(Debug, Clone)]
pub struct RpnLevelOutput {
    /// One logit per cell, row-major.
    pub objectness: Vec<f64>,
    /// Deltas per cell.
    pub deltas: Vec<[f64; 4]>,
    conv_cache: ConvCache,
    hidden: Array3<f64>,
    obj_cache: ConvCache,
    reg_cache: ConvCache,
}

impl RpnHead {
    pub fn new(channels: usize, seed: u64) -> Self {
        let mut conv = Conv2d::new(channels, channels, 3, 1, 1, &mut module_rng(seed, "rpn.conv"));
        let scale_down = |c: &mut Conv2d, f: f64| c.weight.mapv_inplace(|v| v * f);
        scale_down(&mut conv, 0.5);
        let mut obj = Conv2d::new(channels, 1, 1, 1, 0, &mut module_rng(seed, "rpn.obj"));
        let mut reg = Conv2d::new(channels, 4, 1, 1, 0, &mut module_rng(seed, "rpn.reg"));
        scale_down(&mut obj, 0.05);
        scale_down(&mut reg, 0.05);
        RpnHead { conv, obj, reg }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero_();
        z
    }

    pub fn forward_level(&self, level: &FeatureMap) -> Result<RpnLevelOutput> {
        let (mut hidden, conv_cache) = self.conv.forward(&level.data)?;
        nn::relu_inplace(&mut hidden);
        let (obj, obj_cache) = self.obj.forward(&hidden)?;
        let (reg, reg_cache) = self.reg.forward(&hidden)?;
        let (_, h, w) = reg.dim();
        let objectness = obj.iter().copied().collect();
        let deltas = (0..h * w).map(|i| [0, 1, 2, 3].map(|k| reg[[k, i / w, i % w]])).collect();
        Ok(RpnLevelOutput {
            objectness,
            deltas,
            conv_cache,
            hidden,
            obj_cache,
            reg_cache,
        })
    }

    /// Gradient wrt the level given gradients on the per-cell logits and deltas.
    pub fn backward_level(&self, out: &RpnLevelOutput, dobj: &[f64], ddeltas: &[[f64; 4]], grads: &mut RpnHead) -> Array3<f64> {
        let (_, h, w) = out.hidden.dim();
        let dobj = Array3::from_shape_vec((1, h, w), dobj.to_vec()).expect("shape");
        let dreg = Array3::from_shape_fn((4, h, w), |(k, y, x)| ddeltas[y * w + x][k]);
        let mut dh = self.obj.backward(&out.obj_cache, &dobj, &mut grads.obj);
        dh += &self.reg.backward(&out.reg_cache, &dreg, &mut grads.reg);
        nn::relu_backward_inplace(&mut dh, &out.hidden);
        self.conv.backward(&out.conv_cache, &dh, &mut grads.conv)
    }
}

impl Params for RpnHead {
    fn params(&self) -> Vec<ParamRef<'_>> {
        nn::prefixed("conv", self.conv.params())
            .chain(nn::prefixed("obj", self.obj.params()))
            .chain(nn::prefixed("reg", self.reg.params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let RpnHead { conv, obj, reg } = self;
        nn::prefixed_mut("conv", conv.params_mut())
            .chain(nn::prefixed_mut("obj", obj.params_mut()))
            .chain(nn::prefixed_mut("reg", reg.params_mut()))
            .collect()
    }
}

/// Objectness + box loss over sampled anchors, with gradients per level.
pub struct RpnLoss {
    pub loss: f64,
    pub dobj: Vec<Vec<f64>>,
    pub ddeltas: Vec<Vec<[f64; 4]>>,
}

/// Anchor labelling: positive at IoU >= `pos_iou` or as the best anchor of
/// some ground truth, negative below `neg_iou`, ignored in between. Returns
/// `1`, `0` or `-1` per anchor and the matched ground truth index.
pub fn label_anchors(anchors: &[Bbox], gt: &[Bbox], cfg: &RpnConfig) -> (Vec<i8>, Vec<usize>) {
    let mut labels = vec![-1i8; anchors.len()];
    let mut matched = vec![0usize; anchors.len()];
    if gt.is_empty() {
        labels.iter_mut().for_each(|l| *l = 0);
        return (labels, matched);
    }
    for (i, a) in anchors.iter().enumerate() {
        let (j, v) = best_match(a, gt).expect("non-empty");
        matched[i] = j;
        if v >= cfg.pos_iou {
            labels[i] = 1;
        } else if v < cfg.neg_iou {
            labels[i] = 0;
        }
    }
    for (j, g) in gt.iter().enumerate() {
        let mut best = 0.0;
        let mut best_i = None;
        for (i, a) in anchors.iter().enumerate() {
            let v = iou(a, g);
            if v > best {
                best = v;
                best_i = Some(i);
            }
        }
        if let Some(i) = best_i {
            labels[i] = 1;
            matched[i] = j;
        }
    }
    (labels, matched)
}

pub fn rpn_loss(anchors: &[Vec<Bbox>], outputs: &[RpnLevelOutput], gt: &[Bbox], cfg: &RpnConfig, rng: &mut ChaCha8Rng) -> RpnLoss {
    let flat: Vec<Bbox> = anchors.iter().flatten().copied().collect();
    let (labels, matched) = label_anchors(&flat, gt, cfg);
    let mut pos: Vec<usize> = (0..flat.len()).filter(|&i| labels[i] == 1).collect();
    let mut neg: Vec<usize> = (0..flat.len()).filter(|&i| labels[i] == 0).collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    pos.truncate((cfg.batch_per_image as f64 * cfg.pos_fraction) as usize);
    neg.truncate(cfg.batch_per_image - pos.len());
    let n = (pos.len() + neg.len()).max(1) as f64;

    let offsets: Vec<usize> = anchors
        .iter()
        .scan(0, |acc, a| {
            let o = *acc;
            *acc += a.len();
            Some(o)
        })
        .collect();
    let locate = |i: usize| {
        let lvl = offsets.iter().rposition(|&o| o <= i).expect("offset 0");
        (lvl, i - offsets[lvl])
    };
    let mut dobj: Vec<Vec<f64>> = anchors.iter().map(|a| vec![0.0; a.len()]).collect();
    let mut ddeltas: Vec<Vec<[f64; 4]>> = anchors.iter().map(|a| vec![[0.0; 4]; a.len()]).collect();
    let mut loss = 0.0;
    for (&i, target) in pos.iter().map(|i| (i, 1.0)).chain(neg.iter().map(|i| (i, 0.0))) {
        let (l, k) = locate(i);
        let x = outputs[l].objectness[k];
        let (li, g) = nn::bce_with_logits_sum(&[x], &[target]);
        loss += li / n;
        dobj[l][k] = g[0] / n;
    }
    for &i in &pos {
        let (l, k) = locate(i);
        let t = encode(&flat[i], &gt[matched[i]], RPN_STDS);
        let (li, g) = nn::smooth_l1(&outputs[l].deltas[k], &t, 1.0 / 9.0);
        loss += li / n;
        ddeltas[l][k] = [g[0] / n, g[1] / n, g[2] / n, g[3] / n];
    }
    RpnLoss { loss, dobj, ddeltas }
}

/// Decodes, clips, suppresses and keeps the top `max_proposals` boxes.
pub fn rpn_proposals(anchors: &[Vec<Bbox>], outputs: &[RpnLevelOutput], image_size: (usize, usize), cfg: &RpnConfig) -> ProposalSet {
    let mut boxes = Vec::new();
    let mut scores = Vec::new();
    for (lvl_anchors, out) in anchors.iter().zip(outputs) {
        for ((a, d), &o) in lvl_anchors.iter().zip(&out.deltas).zip(&out.objectness) {
            let b = decode(a, *d, RPN_STDS, image_size);
            if b.width() >= cfg.min_size && b.height() >= cfg.min_size {
                boxes.push(b);
                scores.push(nn::sigmoid(o));
            }
        }
    }
    let keep = nms(&boxes, &scores, cfg.nms_iou);
    let keep = &keep[..keep.len().min(cfg.max_proposals)];
    ProposalSet {
        boxes: keep.iter().map(|&i| boxes[i]).collect(),
        objectness: keep.iter().map(|&i| scores[i]).collect(),
        source: ProposalSource::RpnLite,
    }
}

/// Ground-truth boxes, jittered copies of them, and random negatives.
pub fn jitter_proposals(gt: &[Bbox], image_size: (usize, usize), cfg: &JitterConfig, max_proposals: usize, rng: &mut ChaCha8Rng) -> ProposalSet {
    let (height, width) = image_size;
    let mut boxes = Vec::new();
    let mut objectness = Vec::new();
    for g in gt {
        boxes.push(clip_valid(g.x1, g.y1, g.x2, g.y2, image_size));
        objectness.push(1.0);
        for _ in 0..cfg.per_gt {
            let (w, h) = (g.width(), g.height());
            let mut u = || if cfg.noise > 0.0 { rng.random_range(-cfg.noise..=cfg.noise) } else { 0.0 };
            let (dx1, dy1, dx2, dy2) = (u() * w, u() * h, u() * w, u() * h);
            boxes.push(clip_valid(g.x1 + dx1, g.y1 + dy1, g.x2 + dx2, g.y2 + dy2, image_size));
            objectness.push(1.0);
        }
    }
    for _ in 0..cfg.negatives {
        let side = rng.random_range(4.0..(width.min(height) as f64 / 2.0).max(5.0));
        let x = rng.random_range(0.0..(width as f64 - side).max(1.0));
        let y = rng.random_range(0.0..(height as f64 - side).max(1.0));
        boxes.push(clip_valid(x, y, x + side, y + side, image_size));
        objectness.push(0.0);
    }
    boxes.truncate(max_proposals);
    objectness.truncate(max_proposals);
    ProposalSet {
        boxes,
        objectness,
        source: ProposalSource::GtJitter,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> Bbox {
        Bbox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn anchors_are_centred_on_cells() {
        let a = level_anchors(2, 3, 4.0, 3.0);
        assert_eq!(a.len(), 6);
        assert_eq!(a[0], b(-4.0, -4.0, 8.0, 8.0));
        assert_eq!(a[5].center(), (10.0, 6.0));
    }

    #[test]
    fn zero_noise_jitter_reproduces_gt() {
        let gt = vec![b(3.0, 4.0, 20.0, 18.0), b(30.0, 30.0, 50.0, 44.0)];
        let cfg = JitterConfig {
            noise: 0.0,
            per_gt: 3,
            negatives: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = jitter_proposals(&gt, (64, 64), &cfg, 300, &mut rng);
        assert_eq!(p.boxes.len(), 8);
        assert!(p.boxes.iter().all(|x| gt.contains(x)));
    }

    #[test]
    fn jitter_is_seeded_and_in_bounds() {
        let gt = vec![b(0.0, 0.0, 20.0, 18.0), b(50.0, 50.0, 64.0, 64.0)];
        let cfg = JitterConfig::default();
        let p1 = jitter_proposals(&gt, (64, 64), &cfg, 300, &mut ChaCha8Rng::seed_from_u64(5));
        let p2 = jitter_proposals(&gt, (64, 64), &cfg, 300, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(p1, p2);
        assert!(p1.boxes.iter().all(|x| x.within(64.0, 64.0)));
        let none = jitter_proposals(&[], (64, 64), &cfg, 300, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(none.boxes.len(), cfg.negatives);
    }

    #[test]
    fn every_gt_gets_a_positive_anchor() {
        let anchors = level_anchors(16, 16, 4.0, 3.0);
        let gt = vec![b(5.0, 5.0, 7.0, 30.0), b(33.0, 40.0, 55.0, 62.0)];
        let (labels, matched) = label_anchors(&anchors, &gt, &RpnConfig::default());
        for j in 0..2 {
            assert!(labels.iter().zip(&matched).any(|(&l, &m)| l == 1 && m == j));
        }
    }
}
