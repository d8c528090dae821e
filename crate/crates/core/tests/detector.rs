mod common;

use common::*;
use hce::context::LossBundle;
use hce::detector::checkpoint::Checkpoint;
use hce::detector::optim::LrSchedule;
use hce::detector::{BackboneConfig, Detector, HceFlags, ModelConfig, Sample, TestFlags, Trainer, TrainerConfig};
use hce::nn::Params;
use hce::par::Exec;
use hce::synth::{Dataset, SceneConfig};
use ndarray::Array2;

fn tiny(flags: HceFlags) -> ModelConfig {
    let mut cfg = ModelConfig {
        backbone: BackboneConfig {
            stage_channels: vec![4, 8, 8],
            convs_per_stage: 1,
            fpn_channels: 8,
            pyramid_start: 1,
        },
        head_hidden: 16,
        flags,
        ..ModelConfig::default()
    };
    cfg.assign.rois_per_image = 32;
    cfg
}

fn samples(n: usize, split: &str) -> Vec<Sample> {
    Dataset::in_memory(&SceneConfig::default(), n, split, Exec::default())
        .unwrap()
        .images
        .iter()
        .map(|i| i.to_sample())
        .collect()
}

fn trainer_config(lr: f64, steps: usize) -> TrainerConfig {
    TrainerConfig {
        seed: 3,
        batch_size: 4,
        momentum: 0.9,
        weight_decay: 1e-4,
        clip_norm: 0.0,
        schedule: LrSchedule {
            base_lr: lr,
            warmup_steps: 0,
            warmup_ratio: 1.0,
            steps_per_epoch: steps,
            epochs: 1,
        },
    }
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let data = samples(4, "train");
    let mut t = Trainer::new(Detector::new(tiny(HceFlags::FULL), 1).unwrap(), trainer_config(0.01, 10));
    t.train_step(&data).unwrap();
    t.train_step(&data).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("a.ckpt");
    Checkpoint {
        trainer: t.clone(),
        epoch: 1,
        config_hash: "abc".into(),
    }
    .save(&path)
    .unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.epoch, 1);
    assert_eq!(back.config_hash, "abc");
    assert_eq!(back.trainer.step, 2);
    assert_eq!(back.trainer.optimizer.velocity, t.optimizer.velocity);
    for (a, b) in t.model.params().iter().zip(back.trainer.model.params().iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.data, b.data);
    }
    for s in &data {
        let a = t.model.branch_outputs(&s.pixels, TestFlags::BOTH).unwrap();
        let b = back.trainer.model.branch_outputs(&s.pixels, TestFlags::BOTH).unwrap();
        assert_eq!(a.ff_scores, b.ff_scores);
        assert_eq!(a.cf_scores, b.cf_scores);
        assert_eq!(a.ff_boxes, b.ff_boxes);
    }
    // the next update continues identically
    let mut resumed = back.trainer;
    assert_eq!(t.train_step(&data).unwrap(), resumed.train_step(&data).unwrap());

    std::fs::write(&path, b"HCECKPT1garbage").unwrap();
    assert!(Checkpoint::load(&path).is_err());
}

#[test]
fn zeroed_context_reduces_to_baseline_detections() {
    let images = samples(6, "val");
    let mut full = Detector::new(tiny(HceFlags::FULL), 9).unwrap();
    // make the head produce confident outputs so detections are not empty
    full.head
        .cls
        .bias
        .iter_mut()
        .enumerate()
        .for_each(|(i, b)| *b = if i == 0 { -2.0 } else { 1.0 });
    let mut base = Detector::new(tiny(HceFlags::BASELINE), 9).unwrap();
    base.head = full.head.clone();
    full.zero_context();
    let mut total = 0;
    for s in &images {
        let a = full.detect(&s.pixels, TestFlags::FF).unwrap();
        let b = base.detect(&s.pixels, TestFlags::FF).unwrap();
        assert_eq!(a, b);
        total += a.len();
    }
    assert!(total > 0);
}

#[test]
fn baseline_and_full_share_non_context_weights() {
    let full = Detector::new(tiny(HceFlags::FULL), 4).unwrap();
    let base = Detector::new(tiny(HceFlags::BASELINE), 4).unwrap();
    let bp: Vec<_> = base.params().iter().map(|p| (p.name.clone(), p.data.to_vec())).collect();
    for (name, data) in &bp {
        let p = full.params().into_iter().find(|p| &p.name == name).unwrap();
        assert_eq!(p.data, &data[..], "{name}");
    }
}

#[test]
fn global_context_ignores_the_proposals() {
    let model = Detector::new(tiny(HceFlags::FULL), 2).unwrap();
    let s = &samples(1, "val")[0];
    let a = model.global_context(&s.pixels, &[bx(0.0, 0.0, 10.0, 10.0)]).unwrap().unwrap();
    let b = model
        .global_context(&s.pixels, &[bx(30.0, 5.0, 60.0, 50.0), bx(1.0, 1.0, 3.0, 3.0), bx(10.0, 20.0, 40.0, 30.0)])
        .unwrap()
        .unwrap();
    assert_eq!(a, b);
    assert!(a.iter().any(|v| *v != 0.0));
    let inst_only = Detector::new(
        tiny(HceFlags {
            global: false,
            ..HceFlags::FULL
        }),
        2,
    )
    .unwrap();
    let z = inst_only.global_context(&s.pixels, &[bx(0.0, 0.0, 10.0, 10.0)]).unwrap().unwrap();
    assert!(z.iter().all(|v| *v == 0.0));
    assert!(Detector::new(tiny(HceFlags::BASELINE), 2)
        .unwrap()
        .global_context(&s.pixels, &[])
        .unwrap()
        .is_none());
}

#[test]
fn one_head_parameter_set() {
    let model = Detector::new(tiny(HceFlags::FULL), 2).unwrap();
    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
    let mut unique = names.clone();
    unique.sort();
    unique.dedup();
    assert_eq!(unique.len(), names.len());
    let head: Vec<&String> = names.iter().filter(|n| n.starts_with("head.")).collect();
    assert_eq!(head.len(), model.head.params().len());

    // a head perturbation moves head(x) the same way whichever feature x is
    let mut r = rng(1);
    let width = 8 * 49;
    let xc = Array2::from_shape_fn((3, width), |_| rand::Rng::random_range(&mut r, -1.0..1.0));
    let xf = Array2::from_shape_fn((3, width), |_| rand::Rng::random_range(&mut r, -1.0..1.0));
    let mut moved = model.head.clone();
    moved.cls.bias[2] += 0.5;
    for x in [&xc, &xf] {
        let d = &moved.forward(x.view()).unwrap().cls - &model.head.forward(x.view()).unwrap().cls;
        assert!(d.column(2).iter().all(|v| (v - 0.5).abs() < 1e-12));
    }
}

#[test]
fn identical_seeds_give_identical_losses() {
    let data = samples(8, "train");
    let run = || -> Vec<LossBundle> {
        let mut t = Trainer::new(Detector::new(tiny(HceFlags::FULL), 5).unwrap(), trainer_config(0.01, 10));
        (0..3).map(|k| t.train_step(&data[4 * (k % 2)..4 * (k % 2) + 4]).unwrap()).collect()
    };
    assert_eq!(run(), run());
}

#[test]
fn overfits_a_single_batch() {
    let data = samples(4, "train");
    let mut t = Trainer::new(Detector::new(tiny(HceFlags::FULL), 0).unwrap(), trainer_config(0.01, 200));
    let first = t.train_step(&data).unwrap().l_total;
    let mut last = first;
    for _ in 1..200 {
        last = t.train_step(&data).unwrap().l_total;
    }
    assert!(last <= 0.5 * first, "{first} -> {last}");
}

#[test]
fn inference_output_contract() {
    let images = samples(4, "val");
    let model = Detector::new(tiny(HceFlags::FULL), 8).unwrap();
    for s in &images {
        let both = model.branch_outputs(&s.pixels, TestFlags::BOTH).unwrap();
        // confidence fusion reuses the feature-branch boxes
        assert_eq!(both.cf_boxes, both.ff_boxes);
        let dets = model.detect(&s.pixels, TestFlags::BOTH).unwrap();
        assert!(dets.len() <= 100);
        assert!(dets.iter().all(|d| d.score >= 0.05));
        let pooled = model.detect_candidates(&s.pixels, TestFlags::BOTH).unwrap();
        for d in model.detect(&s.pixels, TestFlags::FF).unwrap() {
            assert!(pooled.contains(&d));
        }
    }
    assert!(model.detect(&images[0].pixels, TestFlags { use_ff: false, use_cf: false }).is_err());
}

#[test]
fn sequential_and_parallel_detection_agree() {
    let images: Vec<_> = samples(5, "val").into_iter().map(|s| s.pixels).collect();
    let model = Detector::new(tiny(HceFlags::FULL), 8).unwrap();
    assert_eq!(
        model.detect_batch(&images, TestFlags::BOTH, Exec::Sequential).unwrap(),
        model.detect_batch(&images, TestFlags::BOTH, Exec::default()).unwrap()
    );
}
