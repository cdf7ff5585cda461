use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::model::{ParamKind, Params};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adamw,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub name: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub batch_size: usize,
    pub dropout: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            name: OptimizerKind::Adamw,
            learning_rate: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-6,
            weight_decay: 0.01,
            warmup_fraction: 0.1,
            batch_size: 32,
            dropout: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("optimizer.learning_rate", "must be > 0"));
        }
        for (k, v) in [("optimizer.beta1", self.beta1), ("optimizer.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(k, "must lie in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("optimizer.adam_eps", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::config("optimizer.warmup_fraction", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("optimizer.dropout", "must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("optimizer.weight_decay", "must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("optimizer.batch_size", "must be >= 1"));
        }
        Ok(())
    }
}

/// Linear warmup then linear decay to zero over `total` steps.
pub fn learning_rate_at(base: f64, warmup_fraction: f64, step: usize, total: usize) -> f64 {
    let total = total.max(1);
    let warmup = ((warmup_fraction * total as f64).ceil() as usize).min(total);
    if step < warmup {
        base * (step + 1) as f64 / warmup as f64
    } else if total == warmup {
        base
    } else {
        base * (total - step) as f64 / (total - warmup) as f64
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// AdamW with decoupled weight decay on matrices (biases, gains and
/// embeddings are not decayed), or plain SGD.
pub struct Optimizer {
    config: OptimizerConfig,
    moments: Option<Params<Moments>>,
    t: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            moments: None,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut Params<Tensor>, grads: &Params<Vec<f64>>, lr: f64) {
        self.t += 1;
        let c = &self.config;
        let decay: Vec<f64> = params
            .keys()
            .iter()
            .map(|k| {
                let matrix = matches!(k.kind, ParamKind::Projection)
                    || k.name == "pooler_w"
                    || k.name == "classifier_w";
                if matrix {
                    c.weight_decay
                } else {
                    0.0
                }
            })
            .collect();
        let grads = grads.leaves();
        match c.name {
            OptimizerKind::Sgd => {
                for ((w, g), wd) in params.leaves_mut().into_iter().zip(grads).zip(decay) {
                    for (x, gi) in w.data_mut().iter_mut().zip(g) {
                        *x -= lr * (gi + wd * *x);
                    }
                }
            }
            OptimizerKind::Adamw => {
                let moments = self.moments.get_or_insert_with(|| {
                    params.map(&mut |_, w| Moments {
                        m: vec![0.0; w.numel()],
                        v: vec![0.0; w.numel()],
                    })
                });
                let bc1 = 1.0 - c.beta1.powi(self.t as i32);
                let bc2 = 1.0 - c.beta2.powi(self.t as i32);
                for (((w, g), wd), mom) in params
                    .leaves_mut()
                    .into_iter()
                    .zip(grads)
                    .zip(decay)
                    .zip(moments.leaves_mut())
                {
                    for (((x, gi), m), v) in w.data_mut().iter_mut().zip(g).zip(&mut mom.m).zip(&mut mom.v) {
                        *m = c.beta1 * *m + (1.0 - c.beta1) * gi;
                        *v = c.beta2 * *v + (1.0 - c.beta2) * gi * gi;
                        let mhat = *m / bc1;
                        let vhat = *v / bc2;
                        *x -= lr * (mhat / (vhat.sqrt() + c.adam_eps) + wd * *x);
                    }
                }
            }
        }
    }
}
