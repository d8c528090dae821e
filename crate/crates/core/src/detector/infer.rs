use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::rpn::{rpn_proposals, ProposalSource};
use super::targets::{clip_valid, decode, HEAD_STDS};
use super::{CfBoxSource, Detector};
use crate::error::{HceError, Result};
use crate::nn;
use crate::par::Exec;
use crate::roi_ops::{batched_nms, Bbox};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestConfig {
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for TestConfig {
    fn default() -> Self {
        TestConfig {
            score_thresh: 0.05,
            nms_iou: 0.5,
            max_detections: 100,
        }
    }
}

/// Which prediction branches contribute detections at test time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestFlags {
    pub use_ff: bool,
    pub use_cf: bool,
}

impl TestFlags {
    pub const BOTH: TestFlags = TestFlags { use_ff: true, use_cf: true };
    pub const FF: TestFlags = TestFlags { use_ff: true, use_cf: false };
    pub const CF: TestFlags = TestFlags { use_ff: false, use_cf: true };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    FeatureFusion,
    ConfidenceFusion,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Detection {
    pub bbox: Bbox,
    pub category: usize,
    pub score: f64,
    pub branch: Branch,
}

/// Per-proposal outputs of both branches before thresholding.
#[derive(Debug, Clone)]
pub struct BranchOutputs {
    pub proposals: Vec<Bbox>,
    /// `(R, C + 1)` softmax of the feature branch.
    pub ff_scores: Option<Array2<f64>>,
    /// `(R, C + 1)` softmax of the fused logits.
    pub cf_scores: Option<Array2<f64>>,
    /// Decoded boxes of the feature branch, `[r][c]`.
    pub ff_boxes: Vec<Vec<Bbox>>,
    /// Boxes paired with confidence-fusion scores.
    pub cf_boxes: Vec<Vec<Bbox>>,
}

fn decode_rows(proposals: &[Bbox], reg: &Array2<f64>, num_classes: usize, image_size: (usize, usize)) -> Vec<Vec<Bbox>> {
    proposals
        .iter()
        .enumerate()
        .map(|(r, p)| {
            (0..num_classes)
                .map(|c| {
                    let d = [reg[[r, 4 * c]], reg[[r, 4 * c + 1]], reg[[r, 4 * c + 2]], reg[[r, 4 * c + 3]]];
                    decode(p, d, HEAD_STDS, image_size)
                })
                .collect()
        })
        .collect()
}

impl Detector {
    /// Test-time proposals. Without a trained RPN every anchor is a proposal.
    pub fn proposals(&self, levels: &[crate::roi_ops::FeatureMap]) -> Result<Vec<Bbox>> {
        let anchors = self.anchors(levels);
        Ok(match self.config.proposals {
            ProposalSource::RpnLite => {
                let outs = levels.iter().map(|l| self.rpn.forward_level(l)).collect::<Result<Vec<_>>>()?;
                rpn_proposals(&anchors, &outs, self.config.image_size, &self.config.rpn).boxes
            }
            ProposalSource::GtJitter => anchors
                .iter()
                .flatten()
                .map(|a| clip_valid(a.x1, a.y1, a.x2, a.y2, self.config.image_size))
                .collect(),
        })
    }

    pub fn branch_outputs(&self, image: &Array3<f64>, flags: TestFlags) -> Result<BranchOutputs> {
        if !flags.use_ff && !flags.use_cf {
            return Err(HceError::NoBranchEnabled);
        }
        let has_ctx = self.config.flags.instance;
        if flags.use_cf && !has_ctx {
            return Err(HceError::Config("confidence fusion needs a model with the instance context enabled".into()));
        }
        let c = self.config.num_classes;
        let size = self.config.image_size;
        let bb = self.backbone.forward(image)?;
        let proposals = self.proposals(&bb.levels)?;
        let mut out = BranchOutputs {
            proposals: proposals.clone(),
            ff_scores: None,
            cf_scores: None,
            ff_boxes: Vec::new(),
            cf_boxes: Vec::new(),
        };
        if proposals.is_empty() {
            return Ok(out);
        }
        let fpn = self.fpn_features(&bb.levels, &proposals)?;
        let ctx = if has_ctx {
            let (x, _) = self.embed(&bb.top)?.expect("embedder present with instance");
            Some(self.context_features(&x, &proposals)?.feats)
        } else {
            None
        };
        let fuse = self.config.flags.ff_train && ctx.is_some();
        let feat_in = match (&ctx, fuse) {
            (Some(cf), true) => &fpn.feats + cf,
            _ => fpn.feats.clone(),
        };
        let head_feat = self.head.forward(feat_in.view())?;
        let ff_boxes = decode_rows(&proposals, &head_feat.reg, c, size);
        if flags.use_ff {
            out.ff_scores = Some(nn::softmax_rows(&head_feat.cls));
        }
        if flags.use_cf {
            let ctx = ctx.as_ref().expect("context");
            let head_ctx = self.head.forward(ctx.view())?;
            let head_fpn = if fuse { Some(self.head.forward(fpn.feats.view())?) } else { None };
            let fpn_out = head_fpn.as_ref().unwrap_or(&head_feat);
            out.cf_scores = Some(nn::softmax_rows(&(&head_ctx.cls + &fpn_out.cls)));
            out.cf_boxes = match self.config.cf_box_source {
                CfBoxSource::Fusion => ff_boxes.clone(),
                CfBoxSource::Fpn => decode_rows(&proposals, &fpn_out.reg, c, size),
            };
        }
        out.ff_boxes = ff_boxes;
        Ok(out)
    }

    /// Pooled candidates of the enabled branches after the score threshold,
    /// feature-branch candidates first.
    pub fn detect_candidates(&self, image: &Array3<f64>, flags: TestFlags) -> Result<Vec<Detection>> {
        let out = self.branch_outputs(image, flags)?;
        let thresh = self.config.test.score_thresh;
        let mut cands = Vec::new();
        let branches = [
            (Branch::FeatureFusion, &out.ff_scores, &out.ff_boxes),
            (Branch::ConfidenceFusion, &out.cf_scores, &out.cf_boxes),
        ];
        for (branch, scores, boxes) in branches {
            let Some(scores) = scores else { continue };
            for (r, row) in boxes.iter().enumerate() {
                for (c, b) in row.iter().enumerate() {
                    let s = scores[[r, c]];
                    if s >= thresh {
                        cands.push(Detection {
                            bbox: *b,
                            category: c,
                            score: s,
                            branch,
                        });
                    }
                }
            }
        }
        Ok(cands)
    }

    /// Pools both branches, applies per-class NMS and keeps the top detections.
    pub fn detect(&self, image: &Array3<f64>, flags: TestFlags) -> Result<Vec<Detection>> {
        let cands = self.detect_candidates(image, flags)?;
        let boxes: Vec<Bbox> = cands.iter().map(|d| d.bbox).collect();
        let scores: Vec<f64> = cands.iter().map(|d| d.score).collect();
        let classes: Vec<usize> = cands.iter().map(|d| d.category).collect();
        let keep = batched_nms(&boxes, &scores, &classes, self.config.test.nms_iou);
        Ok(keep.into_iter().take(self.config.test.max_detections).map(|i| cands[i]).collect())
    }

    pub fn detect_batch(&self, images: &[Array3<f64>], flags: TestFlags, exec: Exec) -> Result<Vec<Vec<Detection>>> {
        exec.map(images, |im| self.detect(im, flags)).into_iter().collect()
    }
}
