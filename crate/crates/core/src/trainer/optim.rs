use std::collections::HashMap;

use super::config::OptimizerKind;
use crate::error::{Error, Result};
use crate::models::{FusionModel, ParamId, Part};
use crate::tensor::{Gradients, Tensor, Var};

pub const SGD_MOMENTUM: f64 = 0.9;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Clone, Debug)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Update rule plus per-tensor state keyed by `(branch, parameter)`.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    steps: u64,
    state: HashMap<(Part, ParamId), Moments>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self { kind, lr, steps: 0, state: HashMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Close a step: later [`Optimizer::update`] calls use the next bias correction.
    pub fn advance(&mut self) {
        self.steps += 1;
    }

    /// Update one tensor in place within the current step.
    pub fn update(&mut self, key: (Part, ParamId), value: &mut Tensor, grad: &Tensor) -> Result<()> {
        if value.shape() != grad.shape() {
            return Err(Error::Shape(format!("gradient {:?} for parameter {:?}", grad.shape(), value.shape())));
        }
        let n = value.numel();
        let m = self
            .state
            .entry(key)
            .or_insert_with(|| Moments { first: vec![0.0; n], second: vec![0.0; n] });
        let (p, g) = (value.data_mut(), grad.data());
        match self.kind {
            OptimizerKind::SgdMomentum => {
                for i in 0..n {
                    m.first[i] = SGD_MOMENTUM * m.first[i] + g[i];
                    p[i] -= self.lr * m.first[i];
                }
            }
            OptimizerKind::Adam => {
                let t = (self.steps + 1) as i32;
                let (c1, c2) = (1.0 - ADAM_BETA1.powi(t), 1.0 - ADAM_BETA2.powi(t));
                for i in 0..n {
                    m.first[i] = ADAM_BETA1 * m.first[i] + (1.0 - ADAM_BETA1) * g[i];
                    m.second[i] = ADAM_BETA2 * m.second[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                    let (mh, vh) = (m.first[i] / c1, m.second[i] / c2);
                    p[i] -= self.lr * mh / (vh.sqrt() + ADAM_EPSILON);
                }
            }
        }
        Ok(())
    }

    /// Apply one step to every learning parameter bound in a forward pass.
    /// Frozen tensors and batch statistics are skipped.
    pub fn step(&mut self, model: &mut FusionModel, bindings: &[(Part, ParamId, Var)], grads: &Gradients) -> Result<()> {
        for &(part, id, var) in bindings {
            let param = model.param_mut(part, id);
            if !param.learns() {
                continue;
            }
            let g = grads
                .get(var)
                .ok_or_else(|| Error::Consistency(format!("no gradient for trainable parameter {}", param.name)))?;
            self.update((part, id), &mut param.value, g)?;
        }
        self.advance();
        Ok(())
    }
}
