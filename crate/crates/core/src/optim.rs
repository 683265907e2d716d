//! Adam/AdamW with global-norm gradient clipping, plus the learning-rate
//! schedules (step decay and polynomial decay).

use ndarray::ArrayD;

use crate::autodiff::Grads;
use crate::nn::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    AdamW,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Schedule {
    /// lr = lr0 * factor^(number of milestones at or below the epoch).
    StepDecay { milestones: Vec<usize>, factor: f64 },
    /// lr = lr0 * (1 - epoch/total)^power.
    Polynomial { power: f64 },
}

impl Schedule {
    pub fn lr_at(&self, lr0: f64, epoch: usize, total_epochs: usize) -> f64 {
        match self {
            Schedule::StepDecay { milestones, factor } => {
                let hits = milestones.iter().filter(|&&m| epoch >= m).count();
                lr0 * factor.powi(hits as i32)
            }
            Schedule::Polynomial { power } => {
                let t = (epoch as f64 / total_epochs.max(1) as f64).min(1.0);
                lr0 * (1.0 - t).max(0.0).powf(*power)
            }
        }
    }
}

pub struct Optimizer {
    kind: OptimizerKind,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Vec<Option<ArrayD<f64>>>,
    v: Vec<Option<ArrayD<f64>>>,
    steps: usize,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, weight_decay: f64, num_params: usize) -> Self {
        Optimizer {
            kind,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![None; num_params],
            v: vec![None; num_params],
            steps: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// One update over every gradient in `grads`. Gradients are first
    /// scaled so their global L2 norm does not exceed `clip`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64, clip: f64) {
        self.steps += 1;
        let mut sq = 0.0;
        for (_, g) in grads.iter() {
            sq += g.iter().map(|v| v * v).sum::<f64>();
        }
        let norm = sq.sqrt();
        let scale = if clip > 0.0 && norm > clip {
            clip / norm
        } else {
            1.0
        };
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        for (id, g) in grads.iter() {
            let g = g.mapv(|v| v * scale);
            let m = self.m[id].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self.v[id].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            ndarray::Zip::from(&mut *m).and(&g).for_each(|m, &gi| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
            });
            ndarray::Zip::from(&mut *v).and(&g).for_each(|v, &gi| {
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
            });
            let param = store.value_mut(ParamId(id));
            if self.kind == OptimizerKind::AdamW && self.weight_decay > 0.0 {
                param.mapv_inplace(|p| p - lr * self.weight_decay * p);
            }
            ndarray::Zip::from(param)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &mi, &vi| {
                    let mhat = mi / bc1;
                    let vhat = vi / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}
