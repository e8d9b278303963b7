use serde::{Deserialize, Serialize};

use crate::representation::Params;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    /// β1 = 0.9, β2 = 0.999, ε = 1e-8.
    Adam,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        step: i32,
        m: Params,
        v: Params,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, like: &Params) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => Optimizer::Adam {
                lr,
                step: 0,
                m: like.zeros_like(),
                v: like.zeros_like(),
            },
        }
    }

    pub fn step(&mut self, params: &mut Params, grad: &Params) {
        match self {
            Optimizer::Sgd { lr } => params.add_scaled(-*lr, grad),
            Optimizer::Adam { lr, step, m, v } => {
                *step += 1;
                let bc1 = 1.0 - BETA1.powi(*step);
                let bc2 = 1.0 - BETA2.powi(*step);
                let tensors = params
                    .tensors_mut()
                    .into_iter()
                    .zip(grad.tensors())
                    .zip(m.tensors_mut())
                    .zip(v.tensors_mut());
                for (((p, g), m), v) in tensors {
                    for i in 0..p.len() {
                        let gi = g[i];
                        if gi == 0.0 && m[i] == 0.0 && v[i] == 0.0 {
                            continue;
                        }
                        m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                        v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        p[i] -= *lr * m_hat / (v_hat.sqrt() + EPS);
                    }
                }
            }
        }
    }
}
