//! Central finite-difference checks of every learnable operation.
//!
//! Each operation is reduced to a scalar: losses are checked as they are,
//! other operations through a random linear functional `sum(w * out)`. The
//! reported error is the largest norm-relative error over the operation's
//! argument groups (inputs and each parameter tensor).

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::context::{multilabel_loss, ContextEmbedder, ContextualFeatureGenerator};
use crate::detector::head::DetectionHead;
use crate::error::{HceError, Result};
use crate::nn::{self, module_rng, Params};
use crate::roi_ops::{gap, gap_backward, gmp, gmp_backward, AlignPlan, Bbox, FeatureMap, ROI_OUT};

pub const TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-6;

pub const OPS: [&str; 11] = [
    "roi_align",
    "gap",
    "gmp",
    "context_embedder_conv3x3",
    "multilabel_classifier",
    "contextual_generator_conv1x1",
    "detection_head",
    "confidence_fusion",
    "multilabel_loss",
    "softmax_cross_entropy",
    "smooth_l1",
];

#[derive(Debug, Clone, Serialize)]
pub struct OpReport {
    pub op: String,
    pub max_rel_error: f64,
    pub arguments: usize,
    pub passed: bool,
}

/// `(loss, gradient)` at a flat argument vector.
type Objective = Box<dyn Fn(&[f64]) -> (f64, Vec<f64>)>;

struct Problem {
    theta: Vec<f64>,
    /// `(name, length)` of consecutive argument groups.
    groups: Vec<(String, usize)>,
    f: Objective,
}

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn flat<P: Params>(m: &P) -> Vec<f64> {
    m.params().iter().flat_map(|p| p.data.iter().copied()).collect()
}

fn groups<P: Params>(m: &P, prefix: &str) -> Vec<(String, usize)> {
    m.params().iter().map(|p| (format!("{prefix}.{}", p.name), p.data.len())).collect()
}

fn load<P: Params>(m: &mut P, theta: &[f64]) -> usize {
    let mut k = 0;
    for p in m.params_mut() {
        let n = p.data.len();
        p.data.copy_from_slice(&theta[k..k + n]);
        k += n;
    }
    k
}

/// Every bias shifted off zero so no ReLU input sits exactly on its kink.
fn jitter_biases<P: Params>(m: &mut P, rng: &mut ChaCha8Rng) {
    for p in m.params_mut().into_iter().filter(|p| p.name.ends_with("bias")) {
        p.data.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn problem(op: &str, seed: u64) -> Problem {
    let mut rng = module_rng(seed, &format!("gradcheck.{op}"));
    match op {
        "roi_align" => {
            let (d, h, w, stride) = (3, 9, 9, 2.0);
            let x1 = rng.random_range(0.0..8.0);
            let y1 = rng.random_range(0.0..8.0);
            let bbox = Bbox::new(x1, y1, x1 + rng.random_range(3.0..10.0), y1 + rng.random_range(3.0..10.0)).expect("box");
            let plan = AlignPlan::new(h, w, stride, &bbox, (ROI_OUT, ROI_OUT), 2).expect("plan");
            let wts = randn(&mut rng, d * ROI_OUT * ROI_OUT);
            Problem {
                theta: randn(&mut rng, d * h * w),
                groups: vec![("map".into(), d * h * w)],
                f: Box::new(move |t| {
                    let mut out = vec![0.0; wts.len()];
                    plan.forward_into(t, d, &mut out);
                    let mut g = vec![0.0; t.len()];
                    plan.backward_into(&wts, d, &mut g);
                    (dot(&out, &wts), g)
                }),
            }
        }
        "gap" | "gmp" => {
            let dims = (4, 5, 6);
            let n = 4 * 5 * 6;
            let wts = Array1::from(randn(&mut rng, 4));
            let is_max = op == "gmp";
            Problem {
                theta: randn(&mut rng, n),
                groups: vec![("map".into(), n)],
                f: Box::new(move |t| {
                    let map = FeatureMap::new(Array3::from_shape_vec(dims, t.to_vec()).expect("shape"), 1.0).expect("map");
                    if is_max {
                        let out = gmp(&map);
                        (out.values.dot(&wts), gmp_backward(&wts, &out, dims).into_raw_vec_and_offset().0)
                    } else {
                        (gap(&map).dot(&wts), gap_backward(&wts, dims).into_raw_vec_and_offset().0)
                    }
                }),
            }
        }
        "context_embedder_conv3x3" => {
            let (cin, d, h, w) = (3, 4, 4, 5);
            let mut m = ContextEmbedder::new(cin, d, 3, &mut rng);
            jitter_biases(&mut m, &mut rng);
            let n_in = cin * h * w;
            let wts = Array3::from_shape_vec((d, h, w), randn(&mut rng, d * h * w)).expect("shape");
            let mut theta = randn(&mut rng, n_in);
            theta.extend(flat(&m));
            let mut gs = vec![("top".into(), n_in)];
            gs.extend(groups(&m, "embedder"));
            Problem {
                theta,
                groups: gs,
                f: Box::new(move |t| {
                    let mut m = m.clone();
                    load(&mut m, &t[n_in..]);
                    let top = FeatureMap::new(Array3::from_shape_vec((cin, h, w), t[..n_in].to_vec()).expect("shape"), 16.0).expect("map");
                    let (x, cache) = m.embed(&top).expect("embed");
                    let loss = (&x.data * &wts).sum();
                    let mut grads = m.zeros_like();
                    let dtop = m.embed_backward(&cache, &x, wts.clone(), &mut grads);
                    let mut g = dtop.into_raw_vec_and_offset().0;
                    g.extend(flat(&grads));
                    (loss, g)
                }),
            }
        }
        "multilabel_classifier" => {
            let (d, h, w, c) = (4, 3, 5, 6);
            let mut m = ContextEmbedder::new(2, d, c, &mut rng);
            jitter_biases(&mut m, &mut rng);
            m.cls.weight.mapv_inplace(|v| v * 50.0);
            let n_in = d * h * w;
            let wts = Array1::from(randn(&mut rng, c));
            let mut theta = randn(&mut rng, n_in);
            theta.extend(flat(&m));
            let mut gs = vec![("x".into(), n_in)];
            gs.extend(groups(&m, "embedder"));
            Problem {
                theta,
                groups: gs,
                f: Box::new(move |t| {
                    let mut m = m.clone();
                    load(&mut m, &t[n_in..]);
                    let x = FeatureMap::new(Array3::from_shape_vec((d, h, w), t[..n_in].to_vec()).expect("shape"), 16.0).expect("map");
                    let (logits, cache) = m.multilabel_logits(&x).expect("logits");
                    let mut grads = m.zeros_like();
                    let dx = m.multilabel_logits_backward(&cache, &wts, &mut grads);
                    let mut g = dx.into_raw_vec_and_offset().0;
                    g.extend(flat(&grads));
                    (logits.dot(&wts), g)
                }),
            }
        }
        "contextual_generator_conv1x1" => {
            let d = 3;
            let mut m = ContextualFeatureGenerator::new(d, &mut rng);
            jitter_biases(&mut m, &mut rng);
            let n = d * ROI_OUT * ROI_OUT;
            let shape = (d, ROI_OUT, ROI_OUT);
            let wts = Array3::from_shape_vec(shape, randn(&mut rng, n)).expect("shape");
            let mut theta = randn(&mut rng, 2 * n);
            theta.extend(flat(&m));
            let mut gs = vec![("instance".into(), n), ("global".into(), n)];
            gs.extend(groups(&m, "generator"));
            Problem {
                theta,
                groups: gs,
                f: Box::new(move |t| {
                    let mut m = m.clone();
                    load(&mut m, &t[2 * n..]);
                    let inst = Array3::from_shape_vec(shape, t[..n].to_vec()).expect("shape");
                    let glob = Array3::from_shape_vec(shape, t[n..2 * n].to_vec()).expect("shape");
                    let (out, cache) = m.forward(&inst, &glob).expect("forward");
                    let mut grads = m.zeros_like();
                    let (di, dg) = m.backward(&cache, wts.clone(), &mut grads);
                    let mut g = di.into_raw_vec_and_offset().0;
                    g.extend(dg.into_raw_vec_and_offset().0);
                    g.extend(flat(&grads));
                    ((&out * &wts).sum(), g)
                }),
            }
        }
        "detection_head" | "confidence_fusion" => {
            let (d, hidden, c, r) = (1, 6, 3, 2);
            let mut m = DetectionHead::new(d, hidden, c, &mut rng);
            jitter_biases(&mut m, &mut rng);
            m.cls.weight.mapv_inplace(|v| v * 50.0);
            m.reg.weight.mapv_inplace(|v| v * 500.0);
            let width = d * ROI_OUT * ROI_OUT;
            let fusion = op == "confidence_fusion";
            let inputs = if fusion { 2 } else { 1 };
            let n_in = inputs * r * width;
            let wc = Array2::from_shape_vec((r, c + 1), randn(&mut rng, r * (c + 1))).expect("shape");
            let wr = Array2::from_shape_vec((r, 4 * (c + 1)), randn(&mut rng, r * 4 * (c + 1))).expect("shape");
            let mut theta = randn(&mut rng, n_in);
            theta.extend(flat(&m));
            let mut gs: Vec<(String, usize)> = if fusion {
                vec![("x_context".into(), r * width), ("x_fpn".into(), r * width)]
            } else {
                vec![("x".into(), r * width)]
            };
            gs.extend(groups(&m, "head"));
            Problem {
                theta,
                groups: gs,
                f: Box::new(move |t| {
                    let mut m = m.clone();
                    load(&mut m, &t[n_in..]);
                    let mut grads = m.zeros_like();
                    let mut g = Vec::with_capacity(t.len());
                    let loss = if fusion {
                        let xc = Array2::from_shape_vec((r, width), t[..r * width].to_vec()).expect("shape");
                        let xf = Array2::from_shape_vec((r, width), t[r * width..n_in].to_vec()).expect("shape");
                        let oc = m.forward(xc.view()).expect("head");
                        let of = m.forward(xf.view()).expect("head");
                        let fused = &oc.cls + &of.cls;
                        g.extend(m.backward(&oc.cache, Some(&wc), None, &mut grads).into_raw_vec_and_offset().0);
                        g.extend(m.backward(&of.cache, Some(&wc), None, &mut grads).into_raw_vec_and_offset().0);
                        (&fused * &wc).sum()
                    } else {
                        let x = Array2::from_shape_vec((r, width), t[..n_in].to_vec()).expect("shape");
                        let o = m.forward(x.view()).expect("head");
                        g.extend(m.backward(&o.cache, Some(&wc), Some(&wr), &mut grads).into_raw_vec_and_offset().0);
                        (&o.cls * &wc).sum() + (&o.reg * &wr).sum()
                    };
                    g.extend(flat(&grads));
                    (loss, g)
                }),
            }
        }
        "multilabel_loss" => {
            let c = 7;
            let target = Array1::from_shape_fn(c, |_| if rng.random_bool(0.4) { 1.0 } else { 0.0 });
            Problem {
                theta: randn(&mut rng, c).into_iter().map(|v| 4.0 * v).collect(),
                groups: vec![("logits".into(), c)],
                f: Box::new(move |t| {
                    let (l, g) = multilabel_loss(&Array1::from(t.to_vec()), &target).expect("binary target");
                    (l, g.to_vec())
                }),
            }
        }
        "softmax_cross_entropy" => {
            let (r, k) = (5, 4);
            let labels: Vec<usize> = (0..r).map(|_| rng.random_range(0..k)).collect();
            Problem {
                theta: randn(&mut rng, r * k).into_iter().map(|v| 3.0 * v).collect(),
                groups: vec![("logits".into(), r * k)],
                f: Box::new(move |t| {
                    let (l, g) = nn::softmax_cross_entropy(&Array2::from_shape_vec((r, k), t.to_vec()).expect("shape"), &labels);
                    (l, g.into_raw_vec_and_offset().0)
                }),
            }
        }
        "smooth_l1" => {
            let n = 12;
            let beta = 1.0 / 9.0;
            let target = randn(&mut rng, n);
            // keep every difference away from the |x| = beta seam
            let theta: Vec<f64> = target
                .iter()
                .map(|t| {
                    let mag = if rng.random_bool(0.5) {
                        rng.random_range(0.01..0.09)
                    } else {
                        rng.random_range(0.15..1.0)
                    };
                    t + if rng.random_bool(0.5) { mag } else { -mag }
                })
                .collect();
            Problem {
                theta,
                groups: vec![("pred".into(), n)],
                f: Box::new(move |t| nn::smooth_l1(t, &target, beta)),
            }
        }
        _ => unreachable!("unknown op {op}"),
    }
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

fn run_problem(op: &str, p: &Problem, fault: bool) -> OpReport {
    let (_, mut analytic) = (p.f)(&p.theta);
    if fault {
        analytic[0] += 1.0;
        analytic.iter_mut().for_each(|g| *g *= 1.1);
    }
    let mut numeric = vec![0.0; p.theta.len()];
    let mut t = p.theta.clone();
    for i in 0..t.len() {
        let orig = t[i];
        t[i] = orig + EPS;
        let lp = (p.f)(&t).0;
        t[i] = orig - EPS;
        let lm = (p.f)(&t).0;
        t[i] = orig;
        numeric[i] = (lp - lm) / (2.0 * EPS);
    }
    let mut worst: f64 = 0.0;
    let mut k = 0;
    for (_, n) in &p.groups {
        let a = &analytic[k..k + n];
        let b = &numeric[k..k + n];
        let diff = norm(a.iter().zip(b).map(|(x, y)| x - y));
        let scale = norm(a.iter().copied()) + norm(b.iter().copied());
        if scale > 0.0 {
            worst = worst.max(diff / scale);
        }
        k += n;
    }
    OpReport {
        op: op.to_string(),
        max_rel_error: worst,
        arguments: p.theta.len(),
        passed: worst <= TOLERANCE,
    }
}

/// Checks every operation in [`OPS`]. `fault` corrupts the analytic gradient
/// of the named operation.
pub fn run_gradcheck(seed: u64, fault: Option<&str>) -> Result<Vec<OpReport>> {
    if let Some(f) = fault {
        if !OPS.contains(&f) {
            return Err(HceError::Config(format!("unknown op `{f}` for fault injection; known: {}", OPS.join(", "))));
        }
    }
    Ok(OPS.iter().map(|op| run_problem(op, &problem(op, seed), fault == Some(*op))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_ops_pass_for_several_seeds() {
        for seed in 0..3 {
            for r in run_gradcheck(seed, None).unwrap() {
                assert!(r.passed, "seed {seed}: {} error {}", r.op, r.max_rel_error);
            }
        }
    }

    #[test]
    fn fault_hits_exactly_one_op() {
        for op in OPS {
            let reports = run_gradcheck(1, Some(op)).unwrap();
            let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.op.as_str()).collect();
            assert_eq!(failed, vec![op]);
        }
        assert!(run_gradcheck(0, Some("nope")).is_err());
    }
}
