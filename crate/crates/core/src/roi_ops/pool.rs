use ndarray::Array1;

use super::align::FeatureMap;

/// Per-channel spatial mean.
pub fn gap(map: &FeatureMap) -> Array1<f64> {
    let (d, h, w) = map.data.dim();
    let n = (h * w) as f64;
    Array1::from_shape_fn(d, |c| map.data.index_axis(ndarray::Axis(0), c).sum() / n)
}

/// Spreads the gradient of a GAP output uniformly over the plane.
pub fn gap_backward(grad: &Array1<f64>, dims: (usize, usize, usize)) -> ndarray::Array3<f64> {
    let (d, h, w) = dims;
    let n = (h * w) as f64;
    ndarray::Array3::from_shape_fn((d, h, w), |(c, _, _)| grad[c] / n)
}

#[derive(Debug, Clone)]
pub struct GmpOutput {
    pub values: Array1<f64>,
    /// Flattened `h x w` index of the first maximum in row-major order.
    pub argmax: Vec<usize>,
}

/// Per-channel spatial max.
pub fn gmp(map: &FeatureMap) -> GmpOutput {
    let (d, h, w) = map.data.dim();
    let mut values = Array1::zeros(d);
    let mut argmax = vec![0; d];
    for c in 0..d {
        let mut best = f64::NEG_INFINITY;
        let mut best_i = 0;
        for y in 0..h {
            for x in 0..w {
                let v = map.data[[c, y, x]];
                if v > best {
                    best = v;
                    best_i = y * w + x;
                }
            }
        }
        values[c] = best;
        argmax[c] = best_i;
    }
    GmpOutput { values, argmax }
}

/// Routes each channel's gradient to its argmax cell.
pub fn gmp_backward(grad: &Array1<f64>, out: &GmpOutput, dims: (usize, usize, usize)) -> ndarray::Array3<f64> {
    let (d, h, w) = dims;
    let mut g = ndarray::Array3::zeros((d, h, w));
    for c in 0..d {
        let i = out.argmax[c];
        g[[c, i / w, i % w]] = grad[c];
    }
    g
}
