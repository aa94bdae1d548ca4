//! Per-tensor optimizer state. Each trainable tensor owns one
//! `OptimizerState`; when branches merge, the surviving branch keeps its
//! states and the discarded ones are dropped with their tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum { learning_rate: f64, momentum: f64 },
    Adam { learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimizerKind {
    pub fn adam_default(learning_rate: f64) -> Self {
        OptimizerKind::Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            OptimizerKind::SgdMomentum {
                learning_rate,
                momentum,
            } => {
                if !(learning_rate > 0.0 && learning_rate.is_finite()) {
                    return Err(Error::config("sgd: learning_rate must be positive"));
                }
                if !(0.0..1.0).contains(&momentum) {
                    return Err(Error::config("sgd: momentum must be in [0, 1)"));
                }
            }
            OptimizerKind::Adam {
                learning_rate,
                beta1,
                beta2,
                epsilon,
            } => {
                if !(learning_rate > 0.0 && learning_rate.is_finite()) {
                    return Err(Error::config("adam: learning_rate must be positive"));
                }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                    return Err(Error::config("adam: betas must be in [0, 1)"));
                }
                if !(epsilon > 0.0 && epsilon.is_finite()) {
                    return Err(Error::config("adam: epsilon must be positive"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Slots {
    SgdMomentum { velocity: Tensor },
    Adam { m: Tensor, v: Tensor, t: u64 },
}

/// Optimizer state for exactly one parameter tensor.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: OptimizerKind,
    slots: Slots,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, shape: &[usize]) -> Self {
        let slots = match kind {
            OptimizerKind::SgdMomentum { .. } => Slots::SgdMomentum {
                velocity: Tensor::zeros(shape.to_vec()),
            },
            OptimizerKind::Adam { .. } => Slots::Adam {
                m: Tensor::zeros(shape.to_vec()),
                v: Tensor::zeros(shape.to_vec()),
                t: 0,
            },
        };
        OptimizerState { kind, slots }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// One update step. Shapes of param, grad, and the internal buffers must
    /// all agree.
    pub fn step(&mut self, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::input(format!(
                "optimizer step: param shape {:?} vs grad shape {:?}",
                param.shape(),
                grad.shape()
            )));
        }
        match (&mut self.slots, self.kind) {
            (
                Slots::SgdMomentum { velocity },
                OptimizerKind::SgdMomentum {
                    learning_rate,
                    momentum,
                },
            ) => {
                if velocity.shape() != param.shape() {
                    return Err(Error::usage(
                        "optimizer state was built for a different tensor shape",
                    ));
                }
                for ((v, p), g) in velocity
                    .data_mut()
                    .iter_mut()
                    .zip(param.data_mut())
                    .zip(grad.data())
                {
                    *v = momentum * *v + g;
                    *p -= learning_rate * *v;
                }
            }
            (
                Slots::Adam { m, v, t },
                OptimizerKind::Adam {
                    learning_rate,
                    beta1,
                    beta2,
                    epsilon,
                },
            ) => {
                if m.shape() != param.shape() {
                    return Err(Error::usage(
                        "optimizer state was built for a different tensor shape",
                    ));
                }
                *t += 1;
                let bc1 = 1.0 - beta1.powi(*t as i32);
                let bc2 = 1.0 - beta2.powi(*t as i32);
                for (((mv, vv), p), g) in m
                    .data_mut()
                    .iter_mut()
                    .zip(v.data_mut())
                    .zip(param.data_mut())
                    .zip(grad.data())
                {
                    *mv = beta1 * *mv + (1.0 - beta1) * g;
                    *vv = beta2 * *vv + (1.0 - beta2) * g * g;
                    let m_hat = *mv / bc1;
                    let v_hat = *vv / bc2;
                    *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
                }
            }
            _ => return Err(Error::internal("optimizer slots/kind mismatch")),
        }
        param.ensure_finite("parameter after optimizer step")?;
        Ok(())
    }
}
