//! Geometric and pooling kernels shared by the detector and the evaluator.

mod align;
mod geometry;
mod nms;
mod pool;

pub use align::{bilinear_sample, roi_align, AlignPlan, FeatureMap, ROI_OUT, SAMPLES_PER_BIN};
pub use geometry::{iou, Bbox};
pub use nms::{batched_nms, nms};
pub use pool::{gap, gap_backward, gmp, gmp_backward, GmpOutput};
