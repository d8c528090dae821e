use ndarray::Array3;

use super::geometry::Bbox;
use crate::error::{HceError, Result};

/// Output grid of every RoI feature.
pub const ROI_OUT: usize = 7;
/// Bilinear samples per bin along each axis.
pub const SAMPLES_PER_BIN: usize = 2;

/// A `d x h x w` activation grid together with its stride in image pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub data: Array3<f64>,
    pub stride: f64,
}

impl FeatureMap {
    pub fn new(data: Array3<f64>, stride: f64) -> Result<Self> {
        let (d, h, w) = data.dim();
        if d == 0 || h == 0 || w == 0 {
            return Err(HceError::shape("FeatureMap::new", "d, h, w >= 1", format!("{d}x{h}x{w}")));
        }
        if !(stride > 0.0) {
            return Err(HceError::Config(format!("feature stride must be positive, got {stride}")));
        }
        Ok(FeatureMap { data, stride })
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }
}

/// Bilinear interpolation at feature-grid coordinates `(x, y)`, clamped to
/// the border.
pub fn bilinear_sample(map: &FeatureMap, x: f64, y: f64) -> Vec<f64> {
    let (d, h, w) = map.data.dim();
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let lx = x - x0 as f64;
    let ly = y - y0 as f64;
    (0..d)
        .map(|c| {
            let v00 = map.data[[c, y0, x0]];
            let v01 = map.data[[c, y0, x1]];
            let v10 = map.data[[c, y1, x0]];
            let v11 = map.data[[c, y1, x1]];
            (1.0 - ly) * ((1.0 - lx) * v00 + lx * v01) + ly * ((1.0 - lx) * v10 + lx * v11)
        })
        .collect()
}

/// Precomputed RoIAlign sampling taps for one box on one map geometry.
///
/// Each entry is `(bin, cell, weight)` where `cell` indexes the flattened
/// `h x w` plane and the weights of a bin already include the `1 / s^2`
/// averaging factor. The same plan drives the forward and backward pass, so
/// the gradient is the exact adjoint of the forward map.
#[derive(Debug, Clone)]
pub struct AlignPlan {
    pub out_h: usize,
    pub out_w: usize,
    map_h: usize,
    map_w: usize,
    taps: Vec<(u32, u32, f64)>,
}

impl AlignPlan {
    pub fn new(map_h: usize, map_w: usize, stride: f64, bbox: &Bbox, out: (usize, usize), samples_per_bin: usize) -> Result<Self> {
        let (out_h, out_w) = out;
        assert!(out_h > 0 && out_w > 0 && samples_per_bin > 0);
        // image coordinate u maps to u / stride - 0.5 on the feature grid
        let fx1 = bbox.x1 / stride - 0.5;
        let fy1 = bbox.y1 / stride - 0.5;
        let span_x = (bbox.x2 - bbox.x1) / stride;
        let span_y = (bbox.y2 - bbox.y1) / stride;
        let span = span_x.min(span_y);
        if !(span >= 1e-6) {
            return Err(HceError::DegenerateRoi { span });
        }
        let bin_w = span_x / out_w as f64;
        let bin_h = span_y / out_h as f64;
        let s = samples_per_bin as f64;
        let norm = 1.0 / (s * s);
        let mut taps = Vec::with_capacity(out_h * out_w * samples_per_bin * samples_per_bin * 4);
        let wmax = (map_w - 1) as f64;
        let hmax = (map_h - 1) as f64;
        for by in 0..out_h {
            for bx in 0..out_w {
                let bin = (by * out_w + bx) as u32;
                for sy in 0..samples_per_bin {
                    let y = (fy1 + bin_h * (by as f64 + (sy as f64 + 0.5) / s)).clamp(0.0, hmax);
                    let y0 = y.floor() as usize;
                    let y1 = (y0 + 1).min(map_h - 1);
                    let ly = y - y0 as f64;
                    for sx in 0..samples_per_bin {
                        let x = (fx1 + bin_w * (bx as f64 + (sx as f64 + 0.5) / s)).clamp(0.0, wmax);
                        let x0 = x.floor() as usize;
                        let x1 = (x0 + 1).min(map_w - 1);
                        let lx = x - x0 as f64;
                        for (cy, wy) in [(y0, 1.0 - ly), (y1, ly)] {
                            for (cx, wx) in [(x0, 1.0 - lx), (x1, lx)] {
                                let wgt = wy * wx * norm;
                                if wgt != 0.0 {
                                    taps.push((bin, (cy * map_w + cx) as u32, wgt));
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(AlignPlan {
            out_h,
            out_w,
            map_h,
            map_w,
            taps,
        })
    }

    pub fn for_map(map: &FeatureMap, bbox: &Bbox) -> Result<Self> {
        AlignPlan::new(map.height(), map.width(), map.stride, bbox, (ROI_OUT, ROI_OUT), SAMPLES_PER_BIN)
    }

    pub fn bins(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Flattened `h x w` cells the output depends on.
    pub fn support(&self) -> Vec<usize> {
        let mut cells: Vec<usize> = self.taps.iter().map(|t| t.1 as usize).collect();
        cells.sort_unstable();
        cells.dedup();
        cells
    }

    /// Pools `data` (`d x map_h x map_w`, row-major) into `out`
    /// (`d x out_h x out_w`), overwriting it.
    pub fn forward_into(&self, data: &[f64], channels: usize, out: &mut [f64]) {
        let plane = self.map_h * self.map_w;
        let bins = self.bins();
        debug_assert_eq!(data.len(), channels * plane);
        debug_assert_eq!(out.len(), channels * bins);
        out.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..channels {
            let src = &data[c * plane..(c + 1) * plane];
            let dst = &mut out[c * bins..(c + 1) * bins];
            for &(bin, cell, w) in &self.taps {
                dst[bin as usize] += w * src[cell as usize];
            }
        }
    }

    /// Adjoint of [`forward_into`](Self::forward_into): accumulates
    /// `grad_out` into `grad_map`.
    pub fn backward_into(&self, grad_out: &[f64], channels: usize, grad_map: &mut [f64]) {
        let plane = self.map_h * self.map_w;
        let bins = self.bins();
        for c in 0..channels {
            let g = &grad_out[c * bins..(c + 1) * bins];
            let dst = &mut grad_map[c * plane..(c + 1) * plane];
            for &(bin, cell, w) in &self.taps {
                dst[cell as usize] += w * g[bin as usize];
            }
        }
    }
}

/// RoIAlign of `bbox` (image coordinates) on `map`.
pub fn roi_align(map: &FeatureMap, bbox: &Bbox, out: (usize, usize), samples_per_bin: usize) -> Result<Array3<f64>> {
    let plan = AlignPlan::new(map.height(), map.width(), map.stride, bbox, out, samples_per_bin)?;
    let d = map.channels();
    let mut result = Array3::zeros((d, out.0, out.1));
    let data = map.data.as_standard_layout();
    plan.forward_into(
        data.as_slice().expect("standard layout"),
        d,
        result.as_slice_mut().expect("fresh array is contiguous"),
    );
    Ok(result)
}
