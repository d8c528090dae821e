//! COCO-style average precision and the five-way error breakdown.

mod ap;
mod errors;
mod render;

pub use ap::{compute_ap, ApMetrics, EvalConfig};
pub use errors::{classify_error, error_breakdown, CategoryBreakdown, ErrorBreakdown, ErrorType};
pub use render::{render_breakdown, render_csv, render_svg};

use serde::{Deserialize, Serialize};

use crate::roi_ops::Bbox;

/// A scored prediction attached to an image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalDetection {
    pub image_id: u64,
    pub category: usize,
    pub bbox: Bbox,
    pub score: f64,
}

/// A ground-truth instance attached to an image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalGt {
    pub image_id: u64,
    pub category: usize,
    pub bbox: Bbox,
}
