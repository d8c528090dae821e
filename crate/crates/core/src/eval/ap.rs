use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{EvalDetection, EvalGt};
use crate::error::{HceError, Result};
use crate::roi_ops::iou;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    /// Multiplies the COCO band edges 32 and 96.
    pub area_factor: f64,
    pub max_detections: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresholds: (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
            area_factor: 0.25,
            max_detections: 100,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.iou_thresholds;
        if t.is_empty() || t.iter().any(|&v| !(v > 0.0 && v < 1.0)) || t.windows(2).any(|w| w[0] >= w[1]) {
            return Err(HceError::Config("iou_thresholds must be strictly increasing inside (0, 1)".into()));
        }
        if !(self.area_factor > 0.0) || self.max_detections == 0 {
            return Err(HceError::Config("area_factor and max_detections must be positive".into()));
        }
        Ok(())
    }

    /// `[all, small, medium, large]` as half-open area ranges.
    pub fn area_ranges(&self) -> [(f64, f64); 4] {
        let s = (32.0 * self.area_factor).powi(2);
        let m = (96.0 * self.area_factor).powi(2);
        [(0.0, f64::INFINITY), (0.0, s), (s, m), (m, f64::INFINITY)]
    }
}

/// AP values in `[0, 1]`; `-1` when a band has no ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApMetrics {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub aps: f64,
    pub apm: f64,
    pub apl: f64,
}

struct ImageEval {
    /// Scores of the kept detections, best first.
    scores: Vec<f64>,
    /// `[threshold][det]`
    matched: Vec<Vec<bool>>,
    ignored: Vec<Vec<bool>>,
    n_gt: usize,
}

fn in_range(area: f64, (lo, hi): (f64, f64)) -> bool {
    area >= lo && area < hi
}

fn evaluate_image(dets: &[&EvalDetection], gts: &[&EvalGt], range: (f64, f64), cfg: &EvalConfig) -> ImageEval {
    let mut gts: Vec<(&EvalGt, bool)> = gts.iter().map(|g| (*g, !in_range(g.bbox.area(), range))).collect();
    gts.sort_by_key(|&(_, ign)| ign);
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order.truncate(cfg.max_detections);
    let nt = cfg.iou_thresholds.len();
    let mut matched = vec![vec![false; order.len()]; nt];
    let mut ignored = vec![vec![false; order.len()]; nt];
    for (ti, &t) in cfg.iou_thresholds.iter().enumerate() {
        let mut gt_used = vec![false; gts.len()];
        for (di, &d) in order.iter().enumerate() {
            let mut best = t.min(1.0 - 1e-10);
            let mut m: Option<usize> = None;
            for (gi, (g, ign)) in gts.iter().enumerate() {
                if gt_used[gi] {
                    continue;
                }
                // once a real match exists, ignored ground truth cannot replace it
                if let Some(mi) = m {
                    if !gts[mi].1 && *ign {
                        break;
                    }
                }
                let v = iou(&dets[d].bbox, &g.bbox);
                if v < best {
                    continue;
                }
                best = v;
                m = Some(gi);
            }
            match m {
                Some(gi) => {
                    gt_used[gi] = true;
                    matched[ti][di] = true;
                    ignored[ti][di] = gts[gi].1;
                }
                None => ignored[ti][di] = !in_range(dets[d].bbox.area(), range),
            }
        }
    }
    ImageEval {
        scores: order.iter().map(|&d| dets[d].score).collect(),
        matched,
        ignored,
        n_gt: gts.iter().filter(|(_, ign)| !ign).count(),
    }
}

/// Mean 101-point interpolated precision, or `None` without ground truth.
fn category_ap(evals: &[ImageEval], ti: usize) -> Option<f64> {
    let n_gt: usize = evals.iter().map(|e| e.n_gt).sum();
    if n_gt == 0 {
        return None;
    }
    let mut rows: Vec<(f64, bool, bool)> = Vec::new();
    for e in evals {
        for i in 0..e.scores.len() {
            rows.push((e.scores[i], e.matched[ti][i], e.ignored[ti][i]));
        }
    }
    // stable, so equal scores keep image order
    rows.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut recall = Vec::new();
    let mut precision = Vec::new();
    for &(_, m, ign) in &rows {
        if ign {
            continue;
        }
        if m {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        recall.push(tp / n_gt as f64);
        precision.push(tp / (tp + fp));
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for k in 0..101 {
        let r = k as f64 / 100.0;
        let idx = recall.partition_point(|&v| v < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    Some(sum / 101.0)
}

fn mean_or_missing(v: &[f64]) -> f64 {
    if v.is_empty() {
        -1.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// COCO-style AP over `images`. Detections on an image outside `images`
/// are an error.
pub fn compute_ap(detections: &[EvalDetection], ground_truth: &[EvalGt], images: &[u64], cfg: &EvalConfig) -> Result<ApMetrics> {
    cfg.validate()?;
    let known: BTreeSet<u64> = images.iter().copied().collect();
    if let Some(d) = detections.iter().find(|d| !known.contains(&d.image_id)) {
        return Err(HceError::UnknownImage(d.image_id));
    }
    if let Some(g) = ground_truth.iter().find(|g| !known.contains(&g.image_id)) {
        return Err(HceError::UnknownImage(g.image_id));
    }
    let mut cats: BTreeSet<usize> = ground_truth.iter().map(|g| g.category).collect();
    cats.extend(detections.iter().map(|d| d.category));
    let mut dets_by: BTreeMap<(usize, u64), Vec<&EvalDetection>> = BTreeMap::new();
    for d in detections {
        dets_by.entry((d.category, d.image_id)).or_default().push(d);
    }
    let mut gts_by: BTreeMap<(usize, u64), Vec<&EvalGt>> = BTreeMap::new();
    for g in ground_truth {
        gts_by.entry((g.category, g.image_id)).or_default().push(g);
    }
    let nt = cfg.iou_thresholds.len();
    let t_index = |t: f64| cfg.iou_thresholds.iter().position(|&v| (v - t).abs() < 1e-9);
    let mut band_values: Vec<Vec<f64>> = Vec::new();
    let mut ap50 = Vec::new();
    let mut ap75 = Vec::new();
    for (band, range) in cfg.area_ranges().into_iter().enumerate() {
        let mut values = Vec::new();
        for &c in &cats {
            let evals: Vec<ImageEval> = known
                .iter()
                .map(|&im| {
                    let d = dets_by.get(&(c, im)).map(Vec::as_slice).unwrap_or(&[]);
                    let g = gts_by.get(&(c, im)).map(Vec::as_slice).unwrap_or(&[]);
                    evaluate_image(d, g, range, cfg)
                })
                .collect();
            for ti in 0..nt {
                if let Some(v) = category_ap(&evals, ti) {
                    values.push(v);
                    if band == 0 && Some(ti) == t_index(0.5) {
                        ap50.push(v);
                    }
                    if band == 0 && Some(ti) == t_index(0.75) {
                        ap75.push(v);
                    }
                }
            }
        }
        band_values.push(values);
    }
    Ok(ApMetrics {
        ap: mean_or_missing(&band_values[0]),
        ap50: mean_or_missing(&ap50),
        ap75: mean_or_missing(&ap75),
        aps: mean_or_missing(&band_values[1]),
        apm: mean_or_missing(&band_values[2]),
        apl: mean_or_missing(&band_values[3]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::roi_ops::Bbox;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> Bbox {
        Bbox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn perfect_single_detection() {
        let gt = [EvalGt {
            image_id: 1,
            category: 0,
            bbox: b(0.0, 0.0, 20.0, 20.0),
        }];
        let det = [EvalDetection {
            image_id: 1,
            category: 0,
            bbox: b(0.0, 0.0, 20.0, 20.0),
            score: 0.9,
        }];
        let m = compute_ap(&det, &gt, &[1], &EvalConfig::default()).unwrap();
        assert_eq!((m.ap, m.ap50, m.ap75), (1.0, 1.0, 1.0));
        let none = compute_ap(&[], &gt, &[1], &EvalConfig::default()).unwrap();
        assert_eq!(none.ap, 0.0);
        assert!(compute_ap(&det, &gt, &[2], &EvalConfig::default()).is_err());
    }

    #[test]
    fn rejects_bad_thresholds() {
        let cfg = EvalConfig {
            iou_thresholds: vec![0.5, 0.5],
            ..EvalConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
