use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{EvalDetection, EvalGt};
use crate::roi_ops::{iou, Bbox};

/// Error buckets in evaluation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ErrorType {
    Correct,
    Location,
    Classification,
    Other,
    Background,
}

impl ErrorType {
    pub const ALL: [ErrorType; 5] = [
        ErrorType::Correct,
        ErrorType::Location,
        ErrorType::Classification,
        ErrorType::Other,
        ErrorType::Background,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorType::Correct => "Correct",
            ErrorType::Location => "Location",
            ErrorType::Classification => "Classification",
            ErrorType::Other => "Other",
            ErrorType::Background => "Background",
        }
    }
}

/// Buckets one prediction against the ground truth of its image.
///
/// IoU thresholds are inclusive on the upper bucket: `0.5` counts as a hit and
/// `0.1` as a near miss. Same-class ground truth decides `Correct` and
/// `Location`, any ground truth decides the rest.
pub fn classify_error(bbox: &Bbox, category: usize, ground_truth: &[(Bbox, usize)]) -> ErrorType {
    let mut same: f64 = 0.0;
    let mut any: f64 = 0.0;
    for (g, c) in ground_truth {
        let v = iou(bbox, g);
        any = any.max(v);
        if *c == category {
            same = same.max(v);
        }
    }
    if same >= 0.5 {
        ErrorType::Correct
    } else if same >= 0.1 {
        ErrorType::Location
    } else if any >= 0.5 {
        ErrorType::Classification
    } else if any >= 0.1 {
        ErrorType::Other
    } else {
        ErrorType::Background
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryBreakdown {
    pub category: usize,
    /// Ground-truth objects of this category across the split.
    pub n: usize,
    /// Predictions actually bucketed, `min(n, available)`.
    pub used: usize,
    /// Indexed by [`ErrorType::index`].
    pub counts: [usize; 5],
}

impl CategoryBreakdown {
    /// Percentages over the bucketed predictions, `None` when there are none.
    pub fn percentages(&self) -> Option<[f64; 5]> {
        if self.used == 0 {
            return None;
        }
        let n = self.used as f64;
        Some(self.counts.map(|c| 100.0 * c as f64 / n))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    pub categories: Vec<CategoryBreakdown>,
}

impl ErrorBreakdown {
    /// Mean of per-category percentages over `categories` that have ground
    /// truth and at least one bucketed prediction.
    pub fn macro_over(&self, categories: &[usize]) -> Option<[f64; 5]> {
        let rows: Vec<[f64; 5]> = self
            .categories
            .iter()
            .filter(|c| categories.contains(&c.category) && c.n > 0)
            .filter_map(CategoryBreakdown::percentages)
            .collect();
        if rows.is_empty() {
            return None;
        }
        let mut out = [0.0; 5];
        for r in &rows {
            for k in 0..5 {
                out[k] += r[k] / rows.len() as f64;
            }
        }
        Some(out)
    }

    pub fn macro_average(&self) -> Option<[f64; 5]> {
        let all: Vec<usize> = self.categories.iter().map(|c| c.category).collect();
        self.macro_over(&all)
    }

    pub fn get(&self, category: usize) -> Option<&CategoryBreakdown> {
        self.categories.iter().find(|c| c.category == category)
    }
}

/// Buckets the top-`N` predictions of every category, `N` being its number of
/// ground-truth objects.
pub fn error_breakdown(detections: &[EvalDetection], ground_truth: &[EvalGt], num_classes: usize) -> ErrorBreakdown {
    let mut gt_by_image: BTreeMap<u64, Vec<(Bbox, usize)>> = BTreeMap::new();
    let mut n = vec![0usize; num_classes];
    for g in ground_truth {
        gt_by_image.entry(g.image_id).or_default().push((g.bbox, g.category));
        if g.category < num_classes {
            n[g.category] += 1;
        }
    }
    let categories = (0..num_classes)
        .map(|c| {
            let mut dets: Vec<&EvalDetection> = detections.iter().filter(|d| d.category == c).collect();
            dets.sort_by(|a, b| b.score.total_cmp(&a.score));
            dets.truncate(n[c]);
            let mut counts = [0usize; 5];
            for d in &dets {
                let gts = gt_by_image.get(&d.image_id).map(Vec::as_slice).unwrap_or(&[]);
                counts[classify_error(&d.bbox, c, gts).index()] += 1;
            }
            CategoryBreakdown {
                category: c,
                n: n[c],
                used: dets.len(),
                counts,
            }
        })
        .collect();
    ErrorBreakdown { categories }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> Bbox {
        Bbox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn taxonomy_examples() {
        let gt = [(b(0.0, 0.0, 10.0, 10.0), 1)];
        assert_eq!(classify_error(&b(0.0, 0.0, 10.0, 10.0), 1, &gt), ErrorType::Correct);
        assert_eq!(classify_error(&b(0.0, 0.0, 10.0, 10.0), 2, &gt), ErrorType::Classification);
        // IoU 0.3 with same class, then with another class
        assert_eq!(classify_error(&b(0.0, 0.0, 3.0, 10.0), 1, &gt), ErrorType::Location);
        assert_eq!(classify_error(&b(0.0, 0.0, 3.0, 10.0), 0, &gt), ErrorType::Other);
        assert_eq!(classify_error(&b(50.0, 50.0, 60.0, 60.0), 1, &gt), ErrorType::Background);
        assert_eq!(classify_error(&b(50.0, 50.0, 60.0, 60.0), 1, &[]), ErrorType::Background);
    }

    #[test]
    fn boundaries_go_to_the_higher_bucket() {
        let gt = [(b(0.0, 0.0, 10.0, 10.0), 0)];
        // IoU exactly 0.5 and 0.1
        assert_eq!(classify_error(&b(0.0, 0.0, 5.0, 10.0), 0, &gt), ErrorType::Correct);
        assert_eq!(classify_error(&b(0.0, 0.0, 1.0, 10.0), 0, &gt), ErrorType::Location);
        assert_eq!(classify_error(&b(0.0, 0.0, 5.0, 10.0), 3, &gt), ErrorType::Classification);
        assert_eq!(classify_error(&b(0.0, 0.0, 1.0, 10.0), 3, &gt), ErrorType::Other);
    }
}
