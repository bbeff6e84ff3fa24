//! Adaptive-moment optimizer with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::param::{ParamId, ParamStore};
use crate::{Result, Scalar, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear decay from the base rate to zero over `total_steps`.
    Linear { total_steps: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            schedule: LrSchedule::Constant,
        }
    }
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamWConfig {
            lr,
            ..Default::default()
        }
    }

    fn lr_at(&self, step: u64) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Linear { total_steps } => {
                let remaining = total_steps.saturating_sub(step - 1) as f64;
                self.lr * remaining / total_steps.max(1) as f64
            }
        }
    }
}

#[derive(Clone, Debug)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// Optimizer state: first/second moments per trainable parameter and the step counter.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<ParamId, Moments<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn has_moments(&self, id: ParamId) -> bool {
        self.moments.contains_key(&id)
    }

    /// Applies one update to every trainable parameter of `store`, then clears all gradients.
    ///
    /// Fails without touching any parameter if a trainable parameter has no gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        let trainable: Vec<ParamId> = store
            .iter()
            .filter(|(_, p)| p.requires_grad())
            .map(|(id, _)| id)
            .collect();
        if let Some(missing) = trainable.iter().find(|&&id| store.grad(id).is_none()) {
            return Err(TensorError::Contract(format!(
                "optimizer step without gradient for {}",
                store.get(*missing).name
            )));
        }
        self.step += 1;
        let t = self.step as f64;
        let c = &self.config;
        let lr = c.lr_at(self.step);
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        let step_size = T::lit(lr / bc1);
        let bc2_sqrt = T::lit(bc2.sqrt());
        let decay = T::lit(1.0 - lr * c.weight_decay);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let eps = T::lit(c.eps);
        for id in trainable {
            let grad = store.grad(id).expect("checked above").to_vec();
            let n = grad.len();
            let mom = self.moments.entry(id).or_insert_with(|| Moments {
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
            });
            let values = store.values_mut(id);
            for i in 0..n {
                let g = grad[i];
                values[i] *= decay;
                mom.m[i] = b1 * mom.m[i] + one_b1 * g;
                mom.v[i] = b2 * mom.v[i] + one_b2 * g * g;
                let denom = mom.v[i].sqrt() / bc2_sqrt + eps;
                values[i] -= step_size * mom.m[i] / denom;
            }
        }
        store.clear_grads();
        Ok(())
    }
}
