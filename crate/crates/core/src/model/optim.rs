use serde::{Deserialize, Serialize};

use crate::params::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
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

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: default_beta1(), beta2: default_beta2(), eps: default_eps() }
    }
}

/// Optimiser state for one parameter block.
#[derive(Debug, Clone)]
pub struct LocalOptimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl LocalOptimizer {
    pub fn new(kind: OptimizerKind, lr: f64, dim: usize) -> Self {
        let (m, v) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam { .. } => (vec![0.0; dim], vec![0.0; dim]),
        };
        LocalOptimizer { kind, lr, m, v, t: 0 }
    }

    pub fn step(&mut self, params: &mut ParamVector, grad: &ParamVector) {
        match self.kind {
            OptimizerKind::Sgd => params.axpy(-self.lr, grad),
            OptimizerKind::Adam { beta1, beta2, eps } => {
                self.t += 1;
                let bc1 = 1.0 - beta1.powi(self.t);
                let bc2 = 1.0 - beta2.powi(self.t);
                let p = params.as_mut_slice();
                for (i, &g) in grad.as_slice().iter().enumerate() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let m_hat = self.m[i] / bc1;
                    let v_hat = self.v[i] / bc2;
                    p[i] -= self.lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}
