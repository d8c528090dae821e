//! Training and evaluation loops over a loaded dataset.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::context::LossBundle;
use crate::detector::{Detection, Detector, Sample, TestFlags, Trainer};
use crate::error::Result;
use crate::eval::{compute_ap, error_breakdown, ApMetrics, ErrorBreakdown, EvalConfig, EvalDetection, EvalGt};
use crate::nn::module_rng;
use crate::synth::Dataset;

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    #[serde(rename = "L_feat")]
    pub l_feat: f64,
    #[serde(rename = "L_conf")]
    pub l_conf: f64,
    #[serde(rename = "L_mll")]
    pub l_mll: f64,
    #[serde(rename = "L_rpn")]
    pub l_rpn: f64,
    pub lr: f64,
}

impl LogRecord {
    pub fn new(step: usize, l: &LossBundle, lr: f64) -> Self {
        LogRecord {
            step,
            l_feat: l.l_feat,
            l_conf: l.l_conf,
            l_mll: l.l_mll,
            l_rpn: l.l_rpn,
            lr,
        }
    }
}

/// Samples of an epoch in a seeded shuffled order, chunked into batches.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut module_rng(seed, &format!("epoch.{epoch}")));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Runs one epoch, calling `on_step` after every update.
pub fn train_epoch(trainer: &mut Trainer, samples: &[Sample], epoch: usize, on_step: &mut dyn FnMut(&Trainer, &LogRecord)) -> Result<()> {
    let cfg = trainer.config;
    for idx in epoch_batches(samples.len(), cfg.batch_size, cfg.seed, epoch) {
        let batch: Vec<Sample> = idx.iter().map(|&i| samples[i].clone()).collect();
        let lr = trainer.lr();
        let losses = trainer.train_step(&batch)?;
        let rec = LogRecord::new(trainer.step - 1, &losses, lr);
        on_step(trainer, &rec);
    }
    Ok(())
}

/// Ground truth of a dataset in evaluator form.
pub fn ground_truth(data: &Dataset) -> Vec<EvalGt> {
    data.images
        .iter()
        .enumerate()
        .flat_map(|(i, im)| {
            im.instances.iter().map(move |inst| EvalGt {
                image_id: i as u64,
                category: inst.category,
                bbox: inst.bbox,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub metrics: ApMetrics,
    pub detections: Vec<Vec<Detection>>,
    pub breakdown: ErrorBreakdown,
    /// Mean wall-clock inference time per image.
    pub time_per_image: Duration,
}

impl EvalReport {
    pub fn flat_detections(&self) -> Vec<EvalDetection> {
        flatten(&self.detections)
    }
}

pub fn flatten(detections: &[Vec<Detection>]) -> Vec<EvalDetection> {
    detections
        .iter()
        .enumerate()
        .flat_map(|(i, dets)| {
            dets.iter().map(move |d| EvalDetection {
                image_id: i as u64,
                category: d.category,
                bbox: d.bbox,
                score: d.score,
            })
        })
        .collect()
}

/// Detects on every image of `data` and scores the result.
pub fn evaluate(model: &Detector, data: &Dataset, flags: TestFlags, cfg: &EvalConfig, exec: crate::par::Exec) -> Result<EvalReport> {
    let images: Vec<_> = data.images.iter().map(|im| im.to_sample().pixels).collect();
    let start = Instant::now();
    let detections = model.detect_batch(&images, flags, exec)?;
    let elapsed = start.elapsed();
    let gt = ground_truth(data);
    let flat = flatten(&detections);
    let ids: Vec<u64> = (0..data.images.len() as u64).collect();
    let metrics = compute_ap(&flat, &gt, &ids, cfg)?;
    let breakdown = error_breakdown(&flat, &gt, model.config.num_classes);
    Ok(EvalReport {
        metrics,
        detections,
        breakdown,
        time_per_image: elapsed / data.images.len().max(1) as u32,
    })
}
