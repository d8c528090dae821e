use super::geometry::{iou, Bbox};

/// Greedy non-maximum suppression.
///
/// Keeps the highest-scoring remaining box and drops every box whose IoU
/// with it exceeds `iou_thresh`. The result is ordered by descending score,
/// ties going to the lower input index.
pub fn nms(boxes: &[Bbox], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "nms: boxes and scores differ in length");
    let order = score_order(scores);
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&boxes[i], &boxes[j]) > iou_thresh {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// Per-class NMS: boxes only suppress boxes of the same class. Output is
/// ordered by descending score over all classes.
pub fn batched_nms(boxes: &[Bbox], scores: &[f64], classes: &[usize], iou_thresh: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), classes.len(), "batched_nms: boxes and classes differ in length");
    let order = score_order(scores);
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && classes[j] == classes[i] && iou(&boxes[i], &boxes[j]) > iou_thresh {
                suppressed[j] = true;
            }
        }
    }
    keep
}

pub(crate) fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}
