use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{HceError, Result};
use crate::nn::{self, module_rng, Conv2d, ConvCache, ParamMut, ParamRef, Params};
use crate::roi_ops::FeatureMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Output width of each stride-2 stage.
    pub stage_channels: Vec<usize>,
    /// Convolutions per stage; the first one downsamples.
    pub convs_per_stage: usize,
    /// Pyramid width `d`, shared with every RoI feature.
    pub fpn_channels: usize,
    /// Index of the first stage that feeds the pyramid.
    pub pyramid_start: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stage_channels: vec![16, 32, 64, 64],
            convs_per_stage: 1,
            fpn_channels: 64,
            pyramid_start: 1,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return Err(HceError::Config("backbone needs at least one stage of non-zero width".into()));
        }
        if self.convs_per_stage == 0 || self.fpn_channels == 0 {
            return Err(HceError::Config("convs_per_stage and fpn_channels must be positive".into()));
        }
        if self.pyramid_start >= self.stage_channels.len() {
            return Err(HceError::Config(format!(
                "pyramid_start {} leaves no pyramid level for {} stages",
                self.pyramid_start,
                self.stage_channels.len()
            )));
        }
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.stage_channels.len()
    }

    /// Image size must be a multiple of this.
    pub fn final_stride(&self) -> usize {
        1 << self.num_stages()
    }

    pub fn level_strides(&self) -> Vec<f64> {
        (self.pyramid_start..self.num_stages()).map(|i| (2usize << i) as f64).collect()
    }

    pub fn top_channels(&self) -> usize {
        *self.stage_channels.last().expect("validated")
    }
}

/// Plain strided conv stages followed by an FPN top-down pathway with
/// nearest-neighbour upsampling and 1x1 laterals.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub stages: Vec<Vec<Conv2d>>,
    pub laterals: Vec<Conv2d>,
    config: BackboneConfig,
}

#[derive(Debug, Clone)]
pub struct BackboneOutput {
    /// Pyramid levels, finest first.
    pub levels: Vec<FeatureMap>,
    /// Deepest stage output, the input of the context embedder.
    pub top: FeatureMap,
    pub cache: BackboneCache,
}

#[derive(Debug, Clone)]
pub struct BackboneCache {
    /// Per stage, per conv: the conv cache and its post-ReLU output.
    stages: Vec<Vec<(ConvCache, Array3<f64>)>>,
    laterals: Vec<ConvCache>,
    input_dims: (usize, usize, usize),
}

impl Backbone {
    pub fn new(config: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::new();
        let mut in_ch = 3;
        for (i, &ch) in config.stage_channels.iter().enumerate() {
            let mut convs = Vec::new();
            for j in 0..config.convs_per_stage {
                let mut rng = module_rng(seed, &format!("backbone.stage{i}.conv{j}"));
                let stride = if j == 0 { 2 } else { 1 };
                convs.push(Conv2d::new(if j == 0 { in_ch } else { ch }, ch, 3, stride, 1, &mut rng));
            }
            stages.push(convs);
            in_ch = ch;
        }
        let laterals = (config.pyramid_start..config.num_stages())
            .map(|i| {
                let mut rng = module_rng(seed, &format!("backbone.lateral{i}"));
                Conv2d::new(config.stage_channels[i], config.fpn_channels, 1, 1, 0, &mut rng)
            })
            .collect();
        Ok(Backbone {
            stages,
            laterals,
            config: config.clone(),
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero_();
        z
    }

    /// `image` is `3 x H x W` in `[0, 1]`; both sides must be multiples of the
    /// final stride.
    pub fn forward(&self, image: &Array3<f64>) -> Result<BackboneOutput> {
        let (c, h, w) = image.dim();
        let fs = self.config.final_stride();
        if c != 3 || h % fs != 0 || w % fs != 0 || h == 0 || w == 0 {
            return Err(HceError::shape(
                "backbone_forward",
                format!("3 x H x W with H, W multiples of {fs}"),
                format!("{c} x {h} x {w}"),
            ));
        }
        let mut x = image.mapv(|v| v - 0.5);
        let mut stage_cache = Vec::with_capacity(self.stages.len());
        let mut stage_out = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let mut convs = Vec::with_capacity(stage.len());
            for conv in stage {
                let (mut y, cache) = conv.forward(&x)?;
                nn::relu_inplace(&mut y);
                convs.push((cache, y.clone()));
                x = y;
            }
            stage_out.push(x.clone());
            stage_cache.push(convs);
        }
        let start = self.config.pyramid_start;
        let mut lat_cache = Vec::with_capacity(self.laterals.len());
        let mut lats = Vec::with_capacity(self.laterals.len());
        for (k, lat) in self.laterals.iter().enumerate() {
            let (y, cache) = lat.forward(&stage_out[start + k])?;
            lats.push(y);
            lat_cache.push(cache);
        }
        let strides = self.config.level_strides();
        let mut levels: Vec<Array3<f64>> = vec![Array3::zeros((0, 0, 0)); lats.len()];
        for k in (0..lats.len()).rev() {
            let mut p = lats[k].clone();
            if k + 1 < lats.len() {
                p += &upsample2(&levels[k + 1]);
            }
            levels[k] = p;
        }
        let levels = levels.into_iter().zip(strides).map(|(data, stride)| FeatureMap { data, stride }).collect();
        let top = FeatureMap {
            data: stage_out.pop().expect("at least one stage"),
            stride: fs as f64,
        };
        Ok(BackboneOutput {
            levels,
            top,
            cache: BackboneCache {
                stages: stage_cache,
                laterals: lat_cache,
                input_dims: (c, h, w),
            },
        })
    }

    /// Backpropagates pyramid-level gradients plus an extra gradient on the top
    /// stage. Parameter gradients accumulate into `grads`.
    pub fn backward(&self, cache: &BackboneCache, dlevels: Vec<Array3<f64>>, dtop: Option<Array3<f64>>, grads: &mut Backbone) {
        let start = self.config.pyramid_start;
        let n_levels = dlevels.len();
        let mut dstage: Vec<Option<Array3<f64>>> = vec![None; self.stages.len()];
        let mut carry: Option<Array3<f64>> = None;
        // adjoint of the top-down pathway, finest level first
        let mut dp_all: Vec<Array3<f64>> = dlevels;
        for k in 1..n_levels {
            let down = downsample2_sum(&dp_all[k - 1]);
            dp_all[k] += &down;
        }
        for (k, dp) in dp_all.into_iter().enumerate() {
            let dst = self.laterals[k].backward(&cache.laterals[k], &dp, &mut grads.laterals[k]);
            add_into(&mut dstage[start + k], dst);
        }
        if let Some(t) = dtop {
            add_into(dstage.last_mut().expect("stages"), t);
        }
        for i in (0..self.stages.len()).rev() {
            let mut g = match (dstage[i].take(), carry.take()) {
                (Some(a), Some(b)) => a + b,
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (None, None) => continue,
            };
            for j in (0..self.stages[i].len()).rev() {
                let (conv_cache, out) = &cache.stages[i][j];
                nn::relu_backward_inplace(&mut g, out);
                let conv = &self.stages[i][j];
                if i == 0 && j == 0 {
                    conv.backward_params(conv_cache, &g, &mut grads.stages[i][j]);
                    g = Array3::zeros(cache.input_dims);
                } else {
                    g = conv.backward(conv_cache, &g, &mut grads.stages[i][j]);
                }
            }
            carry = Some(g);
        }
    }
}

fn add_into(slot: &mut Option<Array3<f64>>, g: Array3<f64>) {
    match slot {
        Some(a) => *a += &g,
        None => *slot = Some(g),
    }
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(ci, y, xx)| x[[ci, y / 2, xx / 2]])
}

/// Adjoint of [`upsample2`]: sums each 2x2 block.
pub fn downsample2_sum(g: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = g.dim();
    let mut out = Array3::zeros((c, h / 2, w / 2));
    for ((ci, y, x), v) in g.indexed_iter() {
        out[[ci, y / 2, x / 2]] += v;
    }
    out
}

impl Params for Backbone {
    fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            for (j, conv) in stage.iter().enumerate() {
                out.extend(nn::prefixed(&format!("stage{i}.conv{j}"), conv.params()));
            }
        }
        let start = self.config.pyramid_start;
        for (k, lat) in self.laterals.iter().enumerate() {
            out.extend(nn::prefixed(&format!("lateral{}", start + k), lat.params()));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let start = self.config.pyramid_start;
        let mut out = Vec::new();
        for (i, stage) in self.stages.iter_mut().enumerate() {
            for (j, conv) in stage.iter_mut().enumerate() {
                out.extend(nn::prefixed_mut(&format!("stage{i}.conv{j}"), conv.params_mut()));
            }
        }
        for (k, lat) in self.laterals.iter_mut().enumerate() {
            out.extend(nn::prefixed_mut(&format!("lateral{}", start + k), lat.params_mut()));
        }
        out
    }
}
