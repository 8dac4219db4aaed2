//! First-order optimizers over the trainable parameters of a model.
//!
//! State is keyed by the position of each trainable tensor in the model's
//! visit order, so an optimizer must stay paired with one model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Parameterized;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerConfig {
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    Sgd {
        #[serde(default)]
        momentum: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..1.0).contains(&v);
        let ok = match *self {
            OptimizerConfig::Adam { beta1, beta2, eps } => unit(beta1) && unit(beta2) && eps > 0.0,
            OptimizerConfig::Sgd { momentum } => unit(momentum),
        };
        if !ok {
            return Err(Error::config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    steps: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer {
            config,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update with learning rate `lr` from the accumulated
    /// gradients. Gradients are left in place.
    pub fn step(&mut self, model: &mut dyn Parameterized, lr: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let config = self.config;
        let (first, second) = (&mut self.first, &mut self.second);
        let mut k = 0;
        model.visit_params_mut(&mut |p| {
            if !p.trainable {
                return;
            }
            if first.len() == k {
                first.push(vec![0.0; p.len()]);
                second.push(vec![0.0; p.len()]);
            }
            let m = &mut first[k];
            match config {
                OptimizerConfig::Adam { beta1, beta2, eps } => {
                    let v = &mut second[k];
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for i in 0..p.len() {
                        let g = p.grad[i];
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                        p.value[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                    }
                }
                OptimizerConfig::Sgd { momentum } => {
                    for i in 0..p.len() {
                        m[i] = momentum * m[i] + p.grad[i];
                        p.value[i] -= lr * m[i];
                    }
                }
            }
            k += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Param;

    struct Quadratic(Param);

    impl Parameterized for Quadratic {
        fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
            f(&self.0)
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
            f(&mut self.0)
        }
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut q = Quadratic(Param::new(vec![1.0, -2.0]));
        q.0.grad = vec![4.0, -0.5];
        let mut opt = Optimizer::new(OptimizerConfig::default()).unwrap();
        opt.step(&mut q, 0.1);
        // bias-corrected first step is lr · sign(g) up to eps
        assert!((q.0.value[0] - 0.9).abs() < 1e-7);
        assert!((q.0.value[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn both_minimize_a_quadratic() {
        for cfg in [OptimizerConfig::default(), OptimizerConfig::Sgd { momentum: 0.5 }] {
            let mut q = Quadratic(Param::new(vec![3.0]));
            let mut opt = Optimizer::new(cfg).unwrap();
            for _ in 0..500 {
                q.0.grad[0] = 2.0 * q.0.value[0];
                opt.step(&mut q, 0.05);
            }
            assert!(q.0.value[0].abs() < 1e-2, "{cfg:?}: {}", q.0.value[0]);
        }
    }
}
