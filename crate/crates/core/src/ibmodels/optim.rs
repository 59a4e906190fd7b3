use serde::{Deserialize, Serialize};

use super::Params;
use crate::ndtape::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
    Sgd {
        lr: f64,
        momentum: f64,
        nesterov: bool,
    },
}

fn default_adam_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Adam { lr, .. } | OptimizerConfig::Sgd { lr, .. } => lr,
        }
    }
}

/// Optimizer state over a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    t: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &Params) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.numel()]).collect();
        let second = match config {
            OptimizerConfig::Adam { .. } => zeros.clone(),
            OptimizerConfig::Sgd { .. } => Vec::new(),
        };
        Self {
            config,
            first: zeros,
            second,
            t: 0,
        }
    }

    /// One update with learning rate `lr`.
    pub fn step(&mut self, params: &mut Params, grads: &[Tensor], lr: f64) {
        self.t += 1;
        match self.config {
            OptimizerConfig::Adam {
                beta1, beta2, eps, ..
            } => {
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                for (i, (p, g)) in params.tensors.iter_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
            OptimizerConfig::Sgd {
                momentum, nesterov, ..
            } => {
                for (i, (p, g)) in params.tensors.iter_mut().zip(grads).enumerate() {
                    for ((p, &g), buf) in p.data_mut().iter_mut().zip(g.data()).zip(&mut self.first[i]) {
                        *buf = momentum * *buf + g;
                        let d = if nesterov { g + momentum * *buf } else { *buf };
                        *p -= lr * d;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> Params {
        Params {
            tensors: vec![Tensor::vector(vec![v])],
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = one(1.0);
        let cfg = OptimizerConfig::Adam {
            lr: 0.1,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut opt = Optimizer::new(cfg, &p);
        opt.step(&mut p, &[Tensor::vector(vec![3.0])], 0.1);
        assert!((p.tensors[0].data()[0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn nesterov_matches_hand_rolled() {
        let mut p = one(1.0);
        let cfg = OptimizerConfig::Sgd {
            lr: 0.1,
            momentum: 0.9,
            nesterov: true,
        };
        let mut opt = Optimizer::new(cfg, &p);
        let (mut x, mut buf) = (1.0f64, 0.0f64);
        for _ in 0..5 {
            let g = 2.0 * x;
            let grad = [Tensor::vector(vec![2.0 * p.tensors[0].data()[0]])];
            opt.step(&mut p, &grad, 0.1);
            buf = 0.9 * buf + g;
            x -= 0.1 * (g + 0.9 * buf);
        }
        assert!((p.tensors[0].data()[0] - x).abs() < 1e-15);
    }
}
