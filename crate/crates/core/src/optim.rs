//! Adam with a linear warmup / linear decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Var};
use crate::error::{Error, Result};
use crate::model::ClassifierParams;

fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: d_beta1(),
            beta2: d_beta2(),
            epsilon: d_eps(),
        }
    }
}

/// Linear ramp to `peak` over `warmup_steps`, then linear decay to zero at
/// `total_steps`. Steps are 1-based.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LinearSchedule {
    pub fn new(peak: f64, warmup_fraction: f64, total_steps: usize) -> Self {
        let warmup_steps =
            ((warmup_fraction * total_steps as f64).round() as usize).min(total_steps);
        LinearSchedule {
            peak,
            warmup_steps,
            total_steps,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        let (t, w, n) = (
            step as f64,
            self.warmup_steps as f64,
            self.total_steps as f64,
        );
        if step <= self.warmup_steps {
            self.peak * (t / w)
        } else {
            self.peak * ((n - t) / (n - w))
        }
    }
}

/// Per-parameter gradient sums for one batch.
#[derive(Clone, Debug)]
pub struct GradAccumulator {
    sums: [Vec<f64>; 5],
}

impl GradAccumulator {
    pub fn new(params: &ClassifierParams) -> Self {
        GradAccumulator {
            sums: params.tensors().map(|t| vec![0.0; t.len()]),
        }
    }

    pub fn clear(&mut self) {
        self.sums.iter_mut().for_each(|s| s.fill(0.0));
    }

    /// Adds the gradients flowing into the five parameter leaves.
    pub fn add(&mut self, grads: &Gradients, param_vars: &[Var; 5]) {
        for (sum, &v) in self.sums.iter_mut().zip(param_vars) {
            if let Some(g) = grads.values(v) {
                sum.iter_mut().zip(g).for_each(|(s, x)| *s += x);
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.sums
            .iter_mut()
            .for_each(|s| s.iter_mut().for_each(|x| *x *= c));
    }

    pub fn sums(&self) -> &[Vec<f64>; 5] {
        &self.sums
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    first: [Vec<f64>; 5],
    second: [Vec<f64>; 5],
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ClassifierParams) -> Result<Self> {
        let ok = |b: f64| (0.0..1.0).contains(&b);
        if !ok(config.beta1)
            || !ok(config.beta2)
            || config.epsilon.is_nan()
            || config.epsilon <= 0.0
        {
            return Err(Error::config("train.adam", format!("invalid {config:?}")));
        }
        Ok(Adam {
            config,
            step: 0,
            first: params.tensors().map(|t| vec![0.0; t.len()]),
            second: params.tensors().map(|t| vec![0.0; t.len()]),
        })
    }

    /// One bias-corrected Adam update with learning rate `lr`.
    pub fn update(&mut self, params: &mut ClassifierParams, grads: &GradAccumulator, lr: f64) {
        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (k, tensor) in params.tensors_mut().into_iter().enumerate() {
            let (m, v, g) = (&mut self.first[k], &mut self.second[k], &grads.sums()[k]);
            for (i, w) in tensor.values_mut().iter_mut().enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
    }
}
