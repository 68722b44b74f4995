//! Local optimizers over a subset of model parameters.

use std::collections::BTreeMap;

use crate::config::OptimizerConfig;
use crate::model::TransformerStack;
use crate::tensor::{Gradients, ParamId};

/// Optimizer state for one local training session.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    lr: f64,
    step: u64,
    moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, lr: f64) -> Self {
        Self {
            config,
            lr,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Updates exactly the parameters in `ids`; others are left untouched
    /// even if `grads` has entries for them.
    pub fn step(&mut self, model: &mut TransformerStack, grads: &Gradients, ids: &[ParamId]) {
        self.step += 1;
        match self.config {
            OptimizerConfig::Sgd => {
                for &id in ids {
                    let Some(g) = grads.get(id) else { continue };
                    for (w, &gi) in model.param_mut(id).data_mut().iter_mut().zip(g.data()) {
                        *w -= self.lr * gi;
                    }
                }
            }
            OptimizerConfig::AdamW {
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for &id in ids {
                    let Some(g) = grads.get(id) else { continue };
                    let w = model.param_mut(id).data_mut();
                    let (m, v) = self
                        .moments
                        .entry(id)
                        .or_insert_with(|| (vec![0.0; w.len()], vec![0.0; w.len()]));
                    for i in 0..w.len() {
                        let gi = g.data()[i];
                        m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                        let update = (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                        w[i] -= self.lr * (update + weight_decay * w[i]);
                    }
                }
            }
        }
    }
}
