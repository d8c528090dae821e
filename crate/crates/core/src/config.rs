//! Flat `key = value` run configuration with includes and named presets.
//!
//! ```text
//! # comment
//! include = base.cfg          # relative to the including file
//! include = preset:table2_row4
//! epochs = 12
//! stage_channels = 8,16,16,16
//! ```
//!
//! Later assignments override earlier ones, so an include followed by a few
//! keys acts as a patch.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::optim::LrSchedule;
use crate::detector::{BackboneConfig, CfBoxSource, HceFlags, ModelConfig, ProposalSource, TestFlags, TrainerConfig};
use crate::error::{HceError, Result};
use crate::eval::EvalConfig;
use crate::synth::SceneConfig;

/// Everything one command needs, resolved from a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub train_split: String,
    pub val_split: String,
    pub n_train: usize,
    pub n_val: usize,
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub test: TestFlags,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub warmup_ratio: f64,
    pub clip_norm: f64,
    pub checkpoint_every: usize,
    pub eval: EvalConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut model = ModelConfig {
            num_classes: 10,
            image_size: (64, 64),
            backbone: BackboneConfig {
                stage_channels: vec![8, 16, 16, 16],
                convs_per_stage: 1,
                fpn_channels: 16,
                pyramid_start: 1,
            },
            head_hidden: 128,
            ..ModelConfig::default()
        };
        model.flags = HceFlags::FULL;
        model.assign.rois_per_image = 64;
        RunConfig {
            data_dir: PathBuf::from("data"),
            train_split: "train".into(),
            val_split: "val".into(),
            n_train: 2000,
            n_val: 500,
            scene: SceneConfig::default(),
            model,
            test: TestFlags::BOTH,
            epochs: 12,
            batch_size: 8,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_steps: 100,
            warmup_ratio: 0.1,
            clip_norm: 5.0,
            checkpoint_every: 1,
            eval: EvalConfig::default(),
            seed: 0,
        }
    }
}

const PRESET_NAMES: [&str; 12] = [
    "table2_row1",
    "table2_row2",
    "table2_row3",
    "table2_row4",
    "table3_row1",
    "table3_row2",
    "table3_row3",
    "table3_row4",
    "table4_row1",
    "table4_row2",
    "table4_row3",
    "table4_row4",
];

const BASELINE: &str = "mll = false\ninstance = false\nglobal = false\nff_train = false\ncf_train = false\nff_test = true\ncf_test = false\n";
const MLL: &str = "mll = true\ninstance = false\nglobal = false\nff_train = false\ncf_train = false\nff_test = true\ncf_test = false\n";
const FULL: &str = "mll = true\ninstance = true\nglobal = true\nff_train = true\ncf_train = true\nff_test = true\ncf_test = true\n";

/// Built-in ablation grid. Table 2 adds context operations cumulatively,
/// table 3 varies the training fusion on top of the full context and table 4
/// varies the test branches of a model trained with both fusions.
pub fn preset_text(name: &str) -> Option<String> {
    let text = match name {
        "table2_row1" | "table4_row1" => BASELINE.to_string(),
        "table2_row2" | "table3_row1" => MLL.to_string(),
        "table2_row3" => format!("{FULL}global = false\n"),
        "table2_row4" | "table3_row4" | "table4_row4" => FULL.to_string(),
        "table3_row2" => format!("{FULL}cf_train = false\ncf_test = false\n"),
        "table3_row3" => format!("{FULL}ff_train = false\nff_test = false\n"),
        "table4_row2" => format!("{FULL}cf_test = false\n"),
        "table4_row3" => format!("{FULL}ff_test = false\n"),
        _ => return None,
    };
    Some(text)
}

pub fn preset_names() -> &'static [&'static str] {
    &PRESET_NAMES
}

fn perr(origin: &str, line: usize, msg: impl std::fmt::Display) -> HceError {
    HceError::Config(format!("{origin}:{line}: {msg}"))
}

/// Reads `text` into `out`, following includes. `base` resolves relative
/// include paths and `stack` catches include cycles.
fn collect(text: &str, origin: &str, base: Option<&Path>, stack: &mut Vec<String>, out: &mut BTreeMap<String, String>) -> Result<()> {
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| perr(origin, i + 1, format!("expected `key = value`, got `{line}`")))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(perr(origin, i + 1, "empty key"));
        }
        if key != "include" {
            out.insert(key.to_string(), value.to_string());
            continue;
        }
        if stack.iter().any(|s| s == value) {
            return Err(perr(origin, i + 1, format!("include cycle through `{value}`")));
        }
        stack.push(value.to_string());
        if let Some(name) = value.strip_prefix("preset:") {
            let t = preset_text(name).ok_or_else(|| perr(origin, i + 1, format!("unknown preset `{name}`; known: {}", PRESET_NAMES.join(", "))))?;
            collect(&t, value, None, stack, out)?;
        } else {
            let path = match base {
                Some(b) => b.join(value),
                None => PathBuf::from(value),
            };
            let t = fs::read_to_string(&path).map_err(|e| HceError::io(&path, e))?;
            collect(&t, &path.display().to_string(), path.parent(), stack, out)?;
        }
        stack.pop();
    }
    Ok(())
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| HceError::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(HceError::Config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse_value(key, s.trim())).collect()
}

impl RunConfig {
    /// Parses config text; includes resolve against `base`.
    pub fn from_text(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut kv = BTreeMap::new();
        collect(text, "<config>", base, &mut Vec::new(), &mut kv)?;
        let mut cfg = RunConfig::default();
        cfg.apply(&kv)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file, or a preset when `path` names one.
    pub fn load(path: &Path) -> Result<Self> {
        let s = path.to_string_lossy();
        if let Some(name) = s.strip_prefix("preset:").or_else(|| (!path.exists()).then_some(&*s)) {
            if preset_text(name).is_some() {
                return Self::from_text(&format!("include = preset:{name}\n"), None);
            }
        }
        let text = fs::read_to_string(path).map_err(|e| HceError::io(path, e))?;
        Self::from_text(&text, path.parent())
    }

    pub fn preset(name: &str) -> Result<Self> {
        if preset_text(name).is_none() {
            return Err(HceError::Config(format!("unknown preset `{name}`; known: {}", PRESET_NAMES.join(", "))));
        }
        Self::from_text(&format!("include = preset:{name}\n"), None)
    }

    fn apply(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        let mut unknown = BTreeSet::new();
        for (k, v) in kv {
            let k = k.as_str();
            let v = v.as_str();
            let m = &mut self.model;
            let s = &mut self.scene;
            match k {
                "data_dir" => self.data_dir = PathBuf::from(v),
                "train_split" => self.train_split = v.to_string(),
                "val_split" => self.val_split = v.to_string(),
                "n_train" => self.n_train = parse_value(k, v)?,
                "n_val" => self.n_val = parse_value(k, v)?,
                "image_height" => s.image_size.0 = parse_value(k, v)?,
                "image_width" => s.image_size.1 = parse_value(k, v)?,
                "num_classes" => s.num_classes = parse_value(k, v)?,
                "num_context_pairs" => s.num_context_pairs = parse_value(k, v)?,
                "objects_min" => s.objects_per_image.0 = parse_value(k, v)?,
                "objects_max" => s.objects_per_image.1 = parse_value(k, v)?,
                "glyph_min" => s.glyph_size.0 = parse_value(k, v)?,
                "glyph_max" => s.glyph_size.1 = parse_value(k, v)?,
                "noise_level" => s.noise_level = parse_value(k, v)?,
                "context_contrast" => s.context_contrast = parse_value(k, v)?,
                "context_period" => s.context_period = parse_value(k, v)?,
                "context_margin" => s.context_margin = parse_value(k, v)?,
                "data_seed" => s.seed = parse_value(k, v)?,
                "stage_channels" => m.backbone.stage_channels = parse_list(k, v)?,
                "convs_per_stage" => m.backbone.convs_per_stage = parse_value(k, v)?,
                "fpn_channels" => m.backbone.fpn_channels = parse_value(k, v)?,
                "pyramid_start" => m.backbone.pyramid_start = parse_value(k, v)?,
                "head_hidden" => m.head_hidden = parse_value(k, v)?,
                "proposals" => {
                    m.proposals = match v {
                        "rpn_lite" => ProposalSource::RpnLite,
                        "gt_jitter" => ProposalSource::GtJitter,
                        _ => return Err(HceError::Config(format!("`proposals`: expected rpn_lite or gt_jitter, got `{v}`"))),
                    }
                }
                "cf_box_source" => {
                    m.cf_box_source = match v {
                        "fusion" => CfBoxSource::Fusion,
                        "fpn" => CfBoxSource::Fpn,
                        _ => return Err(HceError::Config(format!("`cf_box_source`: expected fusion or fpn, got `{v}`"))),
                    }
                }
                "rois_per_image" => m.assign.rois_per_image = parse_value(k, v)?,
                "fg_fraction" => m.assign.fg_fraction = parse_value(k, v)?,
                "rpn_max_proposals" => m.rpn.max_proposals = parse_value(k, v)?,
                "finest_scale" => m.finest_scale = parse_value(k, v)?,
                "mll" => m.flags.mll = parse_bool(k, v)?,
                "instance" => m.flags.instance = parse_bool(k, v)?,
                "global" => m.flags.global = parse_bool(k, v)?,
                "ff_train" => m.flags.ff_train = parse_bool(k, v)?,
                "cf_train" => m.flags.cf_train = parse_bool(k, v)?,
                "ff_test" => self.test.use_ff = parse_bool(k, v)?,
                "cf_test" => self.test.use_cf = parse_bool(k, v)?,
                "score_thresh" => m.test.score_thresh = parse_value(k, v)?,
                "nms_iou" => m.test.nms_iou = parse_value(k, v)?,
                "max_detections" => {
                    m.test.max_detections = parse_value(k, v)?;
                    self.eval.max_detections = m.test.max_detections;
                }
                "epochs" => self.epochs = parse_value(k, v)?,
                "batch_size" => self.batch_size = parse_value(k, v)?,
                "lr" => self.lr = parse_value(k, v)?,
                "momentum" => self.momentum = parse_value(k, v)?,
                "weight_decay" => self.weight_decay = parse_value(k, v)?,
                "warmup_steps" => self.warmup_steps = parse_value(k, v)?,
                "warmup_ratio" => self.warmup_ratio = parse_value(k, v)?,
                "clip_norm" => self.clip_norm = parse_value(k, v)?,
                "checkpoint_every" => self.checkpoint_every = parse_value(k, v)?,
                "area_factor" => self.eval.area_factor = parse_value(k, v)?,
                "seed" => self.seed = parse_value(k, v)?,
                _ => {
                    unknown.insert(k.to_string());
                }
            }
        }
        if !unknown.is_empty() {
            return Err(HceError::Config(format!(
                "unknown keys: {}",
                unknown.into_iter().collect::<Vec<_>>().join(", ")
            )));
        }
        self.model.num_classes = self.scene.num_classes;
        self.model.image_size = self.scene.image_size;
        Ok(())
    }

    /// Checks every cross-field invariant with a message naming the fix.
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.model.validate()?;
        self.eval.validate()?;
        if !self.test.use_ff && !self.test.use_cf {
            return Err(HceError::Config("ff_test and cf_test are both false: enable at least one test branch".into()));
        }
        if self.test.use_cf && !self.model.flags.instance {
            return Err(HceError::Config(
                "cf_test=true needs instance=true (confidence fusion uses the contextual feature)".into(),
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.n_train == 0 || self.n_val == 0 {
            return Err(HceError::Config("epochs, batch_size, n_train and n_val must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(HceError::Config("lr must be positive, momentum in [0, 1) and weight_decay non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) || self.clip_norm < 0.0 {
            return Err(HceError::Config("warmup_ratio must lie in [0, 1] and clip_norm be non-negative".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.n_train.div_ceil(self.batch_size)
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        TrainerConfig {
            seed: self.seed,
            batch_size: self.batch_size,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
            schedule: LrSchedule {
                base_lr: self.lr,
                warmup_steps: self.warmup_steps,
                warmup_ratio: self.warmup_ratio,
                steps_per_epoch: self.steps_per_epoch(),
                epochs: self.epochs,
            },
        }
    }

    /// The resolved configuration as flat text that parses back to `self`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let s = &self.scene;
        let list = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        let mut lines = vec![
            format!("data_dir = {}", self.data_dir.display()),
            format!("train_split = {}", self.train_split),
            format!("val_split = {}", self.val_split),
            format!("n_train = {}", self.n_train),
            format!("n_val = {}", self.n_val),
            format!("image_height = {}", s.image_size.0),
            format!("image_width = {}", s.image_size.1),
            format!("num_classes = {}", s.num_classes),
            format!("num_context_pairs = {}", s.num_context_pairs),
            format!("objects_min = {}", s.objects_per_image.0),
            format!("objects_max = {}", s.objects_per_image.1),
            format!("glyph_min = {}", s.glyph_size.0),
            format!("glyph_max = {}", s.glyph_size.1),
            format!("noise_level = {:?}", s.noise_level),
            format!("context_contrast = {:?}", s.context_contrast),
            format!("context_period = {}", s.context_period),
            format!("context_margin = {}", s.context_margin),
            format!("data_seed = {}", s.seed),
            format!("stage_channels = {}", list(&m.backbone.stage_channels)),
            format!("convs_per_stage = {}", m.backbone.convs_per_stage),
            format!("fpn_channels = {}", m.backbone.fpn_channels),
            format!("pyramid_start = {}", m.backbone.pyramid_start),
            format!("head_hidden = {}", m.head_hidden),
            format!(
                "proposals = {}",
                match m.proposals {
                    ProposalSource::RpnLite => "rpn_lite",
                    ProposalSource::GtJitter => "gt_jitter",
                }
            ),
            format!(
                "cf_box_source = {}",
                match m.cf_box_source {
                    CfBoxSource::Fusion => "fusion",
                    CfBoxSource::Fpn => "fpn",
                }
            ),
            format!("rois_per_image = {}", m.assign.rois_per_image),
            format!("fg_fraction = {:?}", m.assign.fg_fraction),
            format!("rpn_max_proposals = {}", m.rpn.max_proposals),
            format!("finest_scale = {:?}", m.finest_scale),
        ];
        for (k, v) in [
            ("mll", m.flags.mll),
            ("instance", m.flags.instance),
            ("global", m.flags.global),
            ("ff_train", m.flags.ff_train),
            ("cf_train", m.flags.cf_train),
            ("ff_test", self.test.use_ff),
            ("cf_test", self.test.use_cf),
        ] {
            lines.push(format!("{k} = {v}"));
        }
        lines.extend([
            format!("score_thresh = {:?}", m.test.score_thresh),
            format!("nms_iou = {:?}", m.test.nms_iou),
            format!("max_detections = {}", m.test.max_detections),
            format!("epochs = {}", self.epochs),
            format!("batch_size = {}", self.batch_size),
            format!("lr = {:?}", self.lr),
            format!("momentum = {:?}", self.momentum),
            format!("weight_decay = {:?}", self.weight_decay),
            format!("warmup_steps = {}", self.warmup_steps),
            format!("warmup_ratio = {:?}", self.warmup_ratio),
            format!("clip_norm = {:?}", self.clip_norm),
            format!("checkpoint_every = {}", self.checkpoint_every),
            format!("area_factor = {:?}", self.eval.area_factor),
            format!("seed = {}", self.seed),
        ]);
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }
}
