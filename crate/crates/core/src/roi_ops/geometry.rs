use serde::{Deserialize, Serialize};

use crate::error::{HceError, Result};

/// Axis-aligned box in image pixels, corner form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bbox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Bbox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        // `!(a > b)` also rejects NaN coordinates.
        if !(x2 > x1) || !(y2 > y1) {
            return Err(HceError::InvalidBox { x1, y1, x2, y2 });
        }
        Ok(Bbox { x1, y1, x2, y2 })
    }

    /// COCO `[x, y, w, h]` to corner form.
    pub fn from_xywh(xywh: [f64; 4]) -> Result<Self> {
        let [x, y, w, h] = xywh;
        Bbox::new(x, y, x + w, y + h)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x1, self.y1, self.width(), self.height()]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Bbox {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    /// Clip to `[0, width] x [0, height]`. Returns `None` when nothing of
    /// positive area is left.
    pub fn clip(&self, width: f64, height: f64) -> Option<Self> {
        let x1 = self.x1.clamp(0.0, width);
        let y1 = self.y1.clamp(0.0, height);
        let x2 = self.x2.clamp(0.0, width);
        let y2 = self.y2.clamp(0.0, height);
        Bbox::new(x1, y1, x2, y2).ok()
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }
}

/// Intersection over union. Zero for disjoint or touching boxes.
pub fn iou(a: &Bbox, b: &Bbox) -> f64 {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> Bbox {
        Bbox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_reference_values() {
        let a = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert_abs_diff_eq!(iou(&a, &b(1.0, 1.0, 3.0, 3.0)), 1.0 / 7.0, epsilon = 1e-12);
    }

    #[test]
    fn rejects_degenerate_and_nan() {
        assert!(Bbox::new(1.0, 0.0, 1.0, 2.0).is_err());
        assert!(Bbox::new(0.0, 3.0, 1.0, 2.0).is_err());
        assert!(Bbox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn xywh_round_trip() {
        let a = b(3.0, 4.5, 10.25, 20.0);
        assert_eq!(Bbox::from_xywh(a.to_xywh()).unwrap(), a);
    }

    #[test]
    fn clip_to_image() {
        let a = b(-5.0, 2.0, 70.0, 10.0).clip(64.0, 64.0).unwrap();
        assert_eq!(a, b(0.0, 2.0, 64.0, 10.0));
        assert!(b(70.0, 0.0, 80.0, 5.0).clip(64.0, 64.0).is_none());
    }

    fn arb_box() -> impl Strategy<Value = Bbox> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.5..40.0f64, 0.5..40.0f64).prop_map(|(x, y, w, h)| b(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_bounded_translation_invariant(
            a in arb_box(), c in arb_box(), dx in -20.0..20.0f64, dy in -20.0..20.0f64
        ) {
            let v = iou(&a, &c);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(&c, &a));
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
            let moved = iou(&a.translate(dx, dy), &c.translate(dx, dy));
            prop_assert!((moved - v).abs() < 1e-9);
        }
    }
}
