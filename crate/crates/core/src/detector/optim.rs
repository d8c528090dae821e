use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::nn::Params;

/// SGD with momentum and L2 weight decay, `v = m v + (g + wd p); p -= lr v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step<P: Params>(&mut self, model: &mut P, grads: &P, lr: f64) {
        let gs = grads.params();
        for (p, g) in model.params_mut().into_iter().zip(gs) {
            debug_assert_eq!(p.name, g.name);
            let v = self.velocity.entry(p.name).or_insert_with(|| vec![0.0; p.data.len()]);
            for ((w, &gw), vel) in p.data.iter_mut().zip(g.data).zip(v.iter_mut()) {
                *vel = self.momentum * *vel + gw + self.weight_decay * *w;
                *w -= lr * *vel;
            }
        }
    }
}

/// Step schedule with linear warm-up and two x0.1 decays at 2/3 and 11/12 of
/// the run (epochs 8 and 11 of 12).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub warmup_ratio: f64,
    pub steps_per_epoch: usize,
    pub epochs: usize,
}

impl LrSchedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        let epoch = step as f64 / self.steps_per_epoch.max(1) as f64;
        let total = self.epochs as f64;
        let mut lr = self.base_lr;
        if epoch >= total * 2.0 / 3.0 {
            lr *= 0.1;
        }
        if epoch >= total * 11.0 / 12.0 {
            lr *= 0.1;
        }
        if step < self.warmup_steps {
            let k = step as f64 / self.warmup_steps as f64;
            lr *= self.warmup_ratio + (1.0 - self.warmup_ratio) * k;
        }
        lr
    }
}
