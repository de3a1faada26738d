//! Adam with bias correction and a per-epoch exponential learning-rate
//! schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// `base · decay^epoch`, epochs counted from 0.
pub fn learning_rate(base: f64, decay: f64, epoch: usize) -> f64 {
    base * decay.powi(epoch as i32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub lr: f64,
    pub decay: f64,
    ids: Vec<usize>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, lr: f64, decay: f64) -> Self {
        let ids = store.trainable_ids();
        Self {
            step: 0,
            lr,
            decay,
            m: ids.iter().map(|&id| vec![0.0; store.tensor(id).len()]).collect(),
            v: ids.iter().map(|&id| vec![0.0; store.tensor(id).len()]).collect(),
            ids: ids.into_iter().map(|id| id.0).collect(),
        }
    }

    pub fn set_epoch(&mut self, base: f64, epoch: usize) {
        self.lr = learning_rate(base, self.decay, epoch);
    }

    /// One Adam update from the gradients held in `store`. A non-finite
    /// gradient aborts the step before any parameter changes.
    pub fn adam_step(&mut self, store: &mut ParamStore) -> Result<()> {
        for &id in &self.ids {
            let t = store.tensor(ParamId(id));
            if t.grad.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::Numeric { op: "adam_step" });
            }
        }
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        for (k, &id) in self.ids.iter().enumerate() {
            let t = store.tensor_mut(ParamId(id));
            let Some(grad) = t.grad.take() else { continue };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, p) in t.data_mut().iter_mut().enumerate() {
                let g = grad[i] as f64;
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
                let update = self.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + EPSILON);
                *p = (*p as f64 - update) as f32;
            }
            t.grad = Some(grad);
        }
        Ok(())
    }
}
