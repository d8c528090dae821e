//! Independent reference implementations shared by the integration tests and
//! the acceptance target.
#![allow(dead_code)]

use std::collections::BTreeMap;

use hce::eval::{ErrorType, EvalConfig, EvalDetection, EvalGt};
use hce::{Bbox, FeatureMap};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> Bbox {
    Bbox::new(x1, y1, x2, y2).unwrap()
}

/// Intersection over union written out per coordinate.
pub fn iou_ref(a: &Bbox, b: &Bbox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

// RoIAlign

fn pixel(map: &Array3<f64>, c: usize, y: isize, x: isize) -> f64 {
    let (_, h, w) = map.dim();
    let y = y.clamp(0, h as isize - 1) as usize;
    let x = x.clamp(0, w as isize - 1) as usize;
    map[[c, y, x]]
}

/// Bilinear value at a point, from the four surrounding pixel centres with
/// the point clamped into the grid.
fn interp(map: &Array3<f64>, c: usize, x: f64, y: f64) -> f64 {
    let (_, h, w) = map.dim();
    let x = x.max(0.0).min((w - 1) as f64);
    let y = y.max(0.0).min((h - 1) as f64);
    let (xf, yf) = (x.floor(), y.floor());
    let (tx, ty) = (x - xf, y - yf);
    let (xi, yi) = (xf as isize, yf as isize);
    let top = pixel(map, c, yi, xi) * (1.0 - tx) + pixel(map, c, yi, xi + 1) * tx;
    let bottom = pixel(map, c, yi + 1, xi) * (1.0 - tx) + pixel(map, c, yi + 1, xi + 1) * tx;
    top * (1.0 - ty) + bottom * ty
}

/// Sample-loop RoIAlign: every output bin is the mean of an `s x s` grid of
/// bilinear samples, with feature pixel `i` centred at image coordinate
/// `(i + 0.5) * stride`.
pub fn roi_align_oracle(map: &FeatureMap, b: &Bbox, out: (usize, usize), s: usize) -> Array3<f64> {
    let d = map.data.dim().0;
    let mut res = Array3::zeros((d, out.0, out.1));
    let bin_w = (b.x2 - b.x1) / out.1 as f64;
    let bin_h = (b.y2 - b.y1) / out.0 as f64;
    for c in 0..d {
        for i in 0..out.0 {
            for j in 0..out.1 {
                let mut acc = 0.0;
                for sy in 0..s {
                    for sx in 0..s {
                        let iy = b.y1 + bin_h * (i as f64 + (sy as f64 + 0.5) / s as f64);
                        let ix = b.x1 + bin_w * (j as f64 + (sx as f64 + 0.5) / s as f64);
                        acc += interp(&map.data, c, ix / map.stride - 0.5, iy / map.stride - 0.5);
                    }
                }
                res[[c, i, j]] = acc / (s * s) as f64;
            }
        }
    }
    res
}

// NMS

/// Quadratic greedy suppression: a box survives when no surviving box of
/// higher rank overlaps it beyond the threshold.
pub fn nms_reference(boxes: &[Bbox], scores: &[f64], thresh: f64) -> Vec<usize> {
    let mut rank: Vec<usize> = (0..boxes.len()).collect();
    rank.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for &i in &rank {
        if kept.iter().all(|&k| iou_ref(&boxes[k], &boxes[i]) <= thresh) {
            kept.push(i);
        }
    }
    kept
}

pub fn random_box(r: &mut ChaCha8Rng, size: f64) -> Bbox {
    let x1 = r.random_range(0.0..size * 0.8);
    let y1 = r.random_range(0.0..size * 0.8);
    let w = r.random_range(1.0..(size * 0.4).max(1.5));
    let h = r.random_range(1.0..(size * 0.4).max(1.5));
    bx(x1, y1, x1 + w, y1 + h)
}

// COCO AP

struct Matched {
    score: f64,
    tp: bool,
    ignore: bool,
}

/// Per-image greedy matching at one threshold for one category and one
/// area band. Returns the kept detections and the number of non-ignored
/// ground-truth boxes.
fn match_image(dets: &[&EvalDetection], gts: &[&EvalGt], t: f64, band: (f64, f64), max_det: usize) -> (Vec<Matched>, usize) {
    let inside = |a: f64| a >= band.0 && a < band.1;
    // non-ignored ground truth first
    let mut g: Vec<(&EvalGt, bool)> = gts.iter().filter(|g| inside(g.bbox.area())).map(|g| (*g, false)).collect();
    g.extend(gts.iter().filter(|g| !inside(g.bbox.area())).map(|g| (*g, true)));
    let mut d: Vec<&EvalDetection> = dets.to_vec();
    d.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    d.truncate(max_det);
    let mut taken = vec![false; g.len()];
    let mut out = Vec::new();
    for det in d {
        let mut best: Option<usize> = None;
        let mut best_iou = t.min(1.0 - 1e-10);
        for (k, (gt, ign)) in g.iter().enumerate() {
            if taken[k] {
                continue;
            }
            if let Some(b) = best {
                if !g[b].1 && *ign {
                    break;
                }
            }
            let v = iou_ref(&det.bbox, &gt.bbox);
            if v >= best_iou {
                best_iou = v;
                best = Some(k);
            }
        }
        match best {
            Some(k) => {
                taken[k] = true;
                out.push(Matched {
                    score: det.score,
                    tp: true,
                    ignore: g[k].1,
                });
            }
            None => out.push(Matched {
                score: det.score,
                tp: false,
                ignore: !inside(det.bbox.area()),
            }),
        }
    }
    (out, g.iter().filter(|(_, i)| !i).count())
}

/// Interpolated precision at 101 recall points, taking for each point the
/// best precision at any recall at or beyond it.
fn interpolated_ap(rows: &mut [Matched], n_gt: usize) -> f64 {
    rows.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let mut pr: Vec<(f64, f64)> = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for r in rows.iter().filter(|r| !r.ignore) {
        if r.tp {
            tp += 1;
        } else {
            fp += 1;
        }
        pr.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    (0..=100)
        .map(|k| {
            let r = k as f64 / 100.0;
            pr.iter().filter(|(rec, _)| *rec >= r).map(|(_, p)| *p).fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 101.0
}

/// `[AP, AP50, AP75, APs, APm, APl]`, `-1` for a band without ground truth.
pub fn reference_ap(dets: &[EvalDetection], gts: &[EvalGt], images: &[u64], cfg: &EvalConfig) -> [f64; 6] {
    let s = (32.0 * cfg.area_factor).powi(2);
    let m = (96.0 * cfg.area_factor).powi(2);
    let bands = [(0.0, f64::INFINITY), (0.0, s), (s, m), (m, f64::INFINITY)];
    let mut cats: Vec<usize> = gts.iter().map(|g| g.category).chain(dets.iter().map(|d| d.category)).collect();
    cats.sort_unstable();
    cats.dedup();
    // ap[band][threshold] -> per-category values
    let mut table: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for (bi, band) in bands.iter().enumerate() {
        for (ti, &t) in cfg.iou_thresholds.iter().enumerate() {
            for &c in &cats {
                let mut rows = Vec::new();
                let mut n_gt = 0;
                for &im in images {
                    let d: Vec<&EvalDetection> = dets.iter().filter(|x| x.image_id == im && x.category == c).collect();
                    let g: Vec<&EvalGt> = gts.iter().filter(|x| x.image_id == im && x.category == c).collect();
                    let (m, n) = match_image(&d, &g, t, *band, cfg.max_detections);
                    rows.extend(m);
                    n_gt += n;
                }
                if n_gt > 0 {
                    table.entry((bi, ti)).or_default().push(interpolated_ap(&mut rows, n_gt));
                }
            }
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { -1.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let nt = cfg.iou_thresholds.len();
    let band_ap = |bi: usize| {
        let per_t: Vec<f64> = (0..nt).filter_map(|ti| table.get(&(bi, ti)).map(|v| mean(v))).collect();
        mean(&per_t)
    };
    let at = |t: f64| {
        let ti = cfg.iou_thresholds.iter().position(|&v| (v - t).abs() < 1e-9).unwrap();
        table.get(&(0, ti)).map_or(-1.0, |v| mean(v))
    };
    [band_ap(0), at(0.5), at(0.75), band_ap(1), band_ap(2), band_ap(3)]
}

/// A random evaluation problem: a few images, noisy copies of the ground
/// truth plus spurious boxes, distinct scores.
pub fn random_eval_instance(seed: u64) -> (Vec<EvalDetection>, Vec<EvalGt>, Vec<u64>) {
    let mut r = rng(seed);
    let n_img = r.random_range(1..5u64);
    let n_cat = r.random_range(1..4usize);
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    for im in 0..n_img {
        for _ in 0..r.random_range(0..5) {
            let g = random_box(&mut r, 64.0);
            let c = r.random_range(0..n_cat);
            gts.push(EvalGt {
                image_id: im,
                category: c,
                bbox: g,
            });
            for _ in 0..r.random_range(0..3) {
                let j = |r: &mut ChaCha8Rng, s: f64| r.random_range(-0.3..0.3) * s;
                let (w, h) = (g.width(), g.height());
                let x1 = (g.x1 + j(&mut r, w)).max(0.0);
                let y1 = (g.y1 + j(&mut r, h)).max(0.0);
                let x2 = (g.x2 + j(&mut r, w)).max(x1 + 0.5);
                let y2 = (g.y2 + j(&mut r, h)).max(y1 + 0.5);
                let cat = if r.random_bool(0.8) { c } else { r.random_range(0..n_cat) };
                dets.push(EvalDetection {
                    image_id: im,
                    category: cat,
                    bbox: bx(x1, y1, x2, y2),
                    score: r.random_range(0.0..1.0),
                });
            }
        }
        for _ in 0..r.random_range(0..4) {
            dets.push(EvalDetection {
                image_id: im,
                category: r.random_range(0..n_cat),
                bbox: random_box(&mut r, 64.0),
                score: r.random_range(0.0..1.0),
            });
        }
    }
    (dets, gts, (0..n_img).collect())
}

// Error taxonomy

/// Twenty predictions over three ground-truth objects on two images, with
/// the bucket of each worked out by hand from the listed IoUs.
pub fn twenty_case() -> (Vec<EvalGt>, Vec<(EvalDetection, ErrorType)>) {
    use ErrorType::*;
    let gts = vec![
        EvalGt {
            image_id: 0,
            category: 0,
            bbox: bx(0.0, 0.0, 10.0, 10.0),
        },
        EvalGt {
            image_id: 0,
            category: 1,
            bbox: bx(20.0, 0.0, 30.0, 10.0),
        },
        EvalGt {
            image_id: 1,
            category: 2,
            bbox: bx(0.0, 20.0, 10.0, 30.0),
        },
    ];
    let p = |im: u64, c: usize, b: Bbox, e: ErrorType| (im, c, b, e);
    let raw = vec![
        p(0, 0, bx(0.0, 0.0, 10.0, 10.0), Correct),         // 1.0 with its gt
        p(0, 0, bx(0.0, 0.0, 6.0, 10.0), Correct),          // 0.6
        p(0, 0, bx(0.0, 0.0, 5.0, 10.0), Correct),          // 0.5
        p(0, 0, bx(0.0, 0.0, 4.0, 10.0), Location),         // 0.4
        p(0, 0, bx(0.0, 0.0, 1.0, 10.0), Location),         // 0.1
        p(0, 0, bx(0.0, 0.0, 0.5, 10.0), Background),       // 0.05
        p(0, 1, bx(0.0, 0.0, 10.0, 10.0), Classification),  // 1.0 with the class-0 gt
        p(0, 1, bx(20.0, 0.0, 30.0, 10.0), Correct),        // 1.0
        p(0, 1, bx(20.0, 0.0, 23.0, 10.0), Location),       // 0.3
        p(0, 1, bx(0.0, 0.0, 3.0, 10.0), Other),            // 0.3 with the class-0 gt
        p(0, 2, bx(0.0, 0.0, 7.0, 10.0), Classification),   // no class-2 gt here, 0.7 with class 0
        p(1, 2, bx(0.0, 20.0, 10.0, 30.0), Correct),        // 1.0
        p(1, 0, bx(0.0, 20.0, 10.0, 30.0), Classification), // 1.0 with the class-2 gt
        p(1, 0, bx(0.0, 20.0, 2.0, 30.0), Other),           // 0.2 with the class-2 gt
        p(1, 0, bx(50.0, 50.0, 60.0, 60.0), Background),    // disjoint
        p(0, 2, bx(0.0, 20.0, 10.0, 30.0), Background),     // right box, wrong image
        p(0, 0, bx(5.0, 0.0, 15.0, 10.0), Location),        // 50 / 150
        p(0, 1, bx(15.0, 0.0, 25.0, 10.0), Location),       // 50 / 150
        p(0, 0, bx(10.0, 0.0, 20.0, 10.0), Background),     // touches both, overlaps neither
        p(1, 2, bx(0.0, 20.0, 10.0, 25.0), Correct),        // 50 / 100
    ];
    let preds = raw
        .into_iter()
        .enumerate()
        .map(|(i, (im, c, b, e))| {
            (
                EvalDetection {
                    image_id: im,
                    category: c,
                    bbox: b,
                    score: 1.0 - i as f64 / 100.0,
                },
                e,
            )
        })
        .collect();
    (gts, preds)
}

/// Extra ground truth on a third image, raising the per-category budgets to
/// 6, 4 and 3 without changing any bucket of [`twenty_case`].
pub fn twenty_case_padding() -> Vec<EvalGt> {
    let mut out = Vec::new();
    for (c, n) in [(0usize, 5usize), (1, 3), (2, 2)] {
        for k in 0..n {
            let x = (10 * k) as f64;
            let y = (15 * c) as f64;
            out.push(EvalGt {
                image_id: 2,
                category: c,
                bbox: bx(x, y, x + 8.0, y + 8.0),
            });
        }
    }
    out
}
