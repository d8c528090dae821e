use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::roi_ops::{iou, Bbox};

/// Normalising deltas used by the detection head.
pub const HEAD_STDS: [f64; 4] = [0.1, 0.1, 0.2, 0.2];
/// The proposal network predicts unnormalised deltas.
pub const RPN_STDS: [f64; 4] = [1.0, 1.0, 1.0, 1.0];

/// `|ln(16 / 1000)|`, the usual cap on log-size deltas.
const MAX_LOG_RATIO: f64 = 4.135_166_556_742_356;
const MIN_SIZE: f64 = 1e-3;

/// `(dx, dy, dw, dh)` taking `proposal` to `gt`, divided by `stds`.
pub fn encode(proposal: &Bbox, gt: &Bbox, stds: [f64; 4]) -> [f64; 4] {
    let (px, py) = proposal.center();
    let (gx, gy) = gt.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    [
        (gx - px) / pw / stds[0],
        (gy - py) / ph / stds[1],
        (gt.width() / pw).ln() / stds[2],
        (gt.height() / ph).ln() / stds[3],
    ]
}

/// Inverse of [`encode`], clipped to the `(height, width)` image.
pub fn decode(proposal: &Bbox, deltas: [f64; 4], stds: [f64; 4], image_size: (usize, usize)) -> Bbox {
    let (px, py) = proposal.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    let dx = deltas[0] * stds[0];
    let dy = deltas[1] * stds[1];
    let dw = (deltas[2] * stds[2]).clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO);
    let dh = (deltas[3] * stds[3]).clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO);
    let cx = px + pw * dx;
    let cy = py + ph * dy;
    let w = pw * dw.exp();
    let h = ph * dh.exp();
    clip_valid(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h, image_size)
}

pub fn decode_boxes(proposals: &[Bbox], deltas: &[[f64; 4]], stds: [f64; 4], image_size: (usize, usize)) -> Vec<Bbox> {
    proposals.iter().zip(deltas).map(|(p, d)| decode(p, *d, stds, image_size)).collect()
}

/// Clips to the image and keeps at least `MIN_SIZE` of extent on each axis.
pub(crate) fn clip_valid(x1: f64, y1: f64, x2: f64, y2: f64, (height, width): (usize, usize)) -> Bbox {
    let (w, h) = (width as f64, height as f64);
    let fix = |a: f64, b: f64, hi: f64| {
        let a = if a.is_finite() { a.clamp(0.0, hi) } else { 0.0 };
        let b = if b.is_finite() { b.clamp(0.0, hi) } else { hi };
        if b - a >= MIN_SIZE {
            (a, b)
        } else {
            let b = (a + MIN_SIZE).min(hi);
            (b - MIN_SIZE, b)
        }
    };
    let (x1, x2) = fix(x1, x2, w);
    let (y1, y2) = fix(y1, y2, h);
    Bbox { x1, y1, x2, y2 }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssignConfig {
    pub fg_iou: f64,
    pub rois_per_image: usize,
    pub fg_fraction: f64,
}

impl Default for AssignConfig {
    fn default() -> Self {
        AssignConfig {
            fg_iou: 0.5,
            rois_per_image: 128,
            fg_fraction: 0.25,
        }
    }
}

/// Per-proposal classification and regression targets for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiTargets {
    /// Class in `0..C`, or `C` for background.
    pub labels: Vec<usize>,
    /// Normalised deltas to the matched ground truth; zero for background.
    pub box_targets: Vec<[f64; 4]>,
    /// Proposals selected for the loss.
    pub sampled: Vec<bool>,
}

impl RoiTargets {
    pub fn sampled_indices(&self) -> Vec<usize> {
        self.sampled.iter().enumerate().filter_map(|(i, &s)| s.then_some(i)).collect()
    }
}

/// Index of the best-overlapping ground truth and its IoU (first index wins ties).
pub(crate) fn best_match(b: &Bbox, gt: &[Bbox]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (j, g) in gt.iter().enumerate() {
        let v = iou(b, g);
        if best.is_none_or(|(_, bv)| v > bv) {
            best = Some((j, v));
        }
    }
    best
}

/// Labels proposals against ground truth and samples a fixed-size minibatch.
///
/// IoU at or above `fg_iou` with the best-matching ground truth makes a
/// foreground RoI of that class; anything else is background. At most
/// `rois_per_image` RoIs are sampled with at most `fg_fraction` foreground.
pub fn assign_targets(proposals: &[Bbox], gt_boxes: &[Bbox], gt_labels: &[usize], num_classes: usize, cfg: &AssignConfig, rng: &mut ChaCha8Rng) -> RoiTargets {
    assert_eq!(gt_boxes.len(), gt_labels.len());
    let mut labels = vec![num_classes; proposals.len()];
    let mut box_targets = vec![[0.0; 4]; proposals.len()];
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for (i, p) in proposals.iter().enumerate() {
        match best_match(p, gt_boxes) {
            Some((j, v)) if v >= cfg.fg_iou => {
                labels[i] = gt_labels[j];
                box_targets[i] = encode(p, &gt_boxes[j], HEAD_STDS);
                fg.push(i);
            }
            _ => bg.push(i),
        }
    }
    let max_fg = (cfg.rois_per_image as f64 * cfg.fg_fraction).round() as usize;
    fg.shuffle(rng);
    bg.shuffle(rng);
    fg.truncate(max_fg);
    bg.truncate(cfg.rois_per_image - fg.len());
    let mut sampled = vec![false; proposals.len()];
    for &i in fg.iter().chain(&bg) {
        sampled[i] = true;
    }
    RoiTargets { labels, box_targets, sampled }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> Bbox {
        Bbox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn zero_deltas_decode_to_proposal() {
        let p = b(4.0, 6.0, 20.0, 30.0);
        assert_eq!(decode(&p, [0.0; 4], HEAD_STDS, (64, 64)), p);
    }

    #[test]
    fn log_two_doubles_about_center() {
        let p = b(20.0, 20.0, 30.0, 40.0);
        let l2 = 2.0f64.ln();
        let d = decode(&p, [0.0, 0.0, l2, l2], RPN_STDS, (100, 100));
        assert!((d.x1 - 15.0).abs() < 1e-12 && (d.x2 - 35.0).abs() < 1e-12);
        assert!((d.y1 - 10.0).abs() < 1e-12 && (d.y2 - 50.0).abs() < 1e-12);
    }

    #[test]
    fn encode_decode_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let x = rng.random_range(0.0..40.0);
            let y = rng.random_range(0.0..40.0);
            let p = b(x, y, x + rng.random_range(2.0..20.0), y + rng.random_range(2.0..20.0));
            let gx = rng.random_range(0.0..40.0);
            let gy = rng.random_range(0.0..40.0);
            let g = b(gx, gy, gx + rng.random_range(2.0..20.0), gy + rng.random_range(2.0..20.0));
            let r = decode(&p, encode(&p, &g, HEAD_STDS), HEAD_STDS, (64, 64));
            for (u, v) in [(r.x1, g.x1), (r.y1, g.y1), (r.x2, g.x2), (r.y2, g.y2)] {
                assert!((u - v).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn decode_clips_to_image() {
        let p = b(50.0, 50.0, 63.0, 63.0);
        let d = decode(&p, [5.0, 5.0, 3.0, 3.0], HEAD_STDS, (64, 64));
        assert!(d.within(64.0, 64.0) && d.x2 > d.x1 && d.y2 > d.y1);
        let far = decode(&p, [300.0, 300.0, 0.0, 0.0], RPN_STDS, (64, 64));
        assert!(far.within(64.0, 64.0) && far.x2 > far.x1);
    }

    #[test]
    fn identical_proposal_is_foreground_with_zero_target() {
        let gt = vec![b(10.0, 10.0, 30.0, 30.0)];
        let props = vec![gt[0], b(40.0, 40.0, 60.0, 60.0)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = assign_targets(&props, &gt, &[3], 5, &AssignConfig::default(), &mut rng);
        assert_eq!(t.labels, vec![3, 5]);
        assert_eq!(t.box_targets[0], [0.0; 4]);
        assert_eq!(t.sampled, vec![true, true]);
    }

    #[test]
    fn empty_gt_gives_background() {
        let props = vec![b(0.0, 0.0, 5.0, 5.0)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = assign_targets(&props, &[], &[], 4, &AssignConfig::default(), &mut rng);
        assert_eq!(t.labels, vec![4]);
    }

    #[test]
    fn sampling_respects_budget_and_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = vec![b(10.0, 10.0, 30.0, 30.0)];
        let mut props = vec![gt[0]; 100];
        for i in 0..300 {
            let x = (i % 30) as f64 + 32.0;
            props.push(b(x, 0.0, x + 5.0, 5.0));
        }
        let cfg = AssignConfig::default();
        let t = assign_targets(&props, &gt, &[0], 2, &cfg, &mut rng);
        let idx = t.sampled_indices();
        assert_eq!(idx.len(), 128);
        assert_eq!(idx.iter().filter(|&&i| t.labels[i] == 0).count(), 32);
    }
}
