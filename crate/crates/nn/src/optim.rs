//! SGD, Adam and RMSProp with optional global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const RMSPROP_DECAY: f64 = 0.9;
pub const OPT_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    RmsProp,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerState {
    kind: OptimizerKind,
    lr: f64,
    /// Global-norm clip applied to the gradients before each step.
    max_grad_norm: Option<f64>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    steps: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            max_grad_norm: None,
            m: Vec::new(),
            v: Vec::new(),
            steps: 0,
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::Adam, lr)
    }

    pub fn rmsprop(lr: f64) -> Self {
        Self::new(OptimizerKind::RmsProp, lr)
    }

    pub fn with_clip(mut self, max_norm: Option<f64>) -> Self {
        self.max_grad_norm = max_norm;
        self
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// First and second moment estimates, one per parameter; empty before
    /// the first adaptive step.
    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// Restores moments and the step count saved from another state.
    pub fn set_moments(&mut self, m: Vec<Tensor>, v: Vec<Tensor>, steps: u64) -> Result<()> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.shape() != b.shape()) {
            return Err(NnError::ShapeMismatch {
                op: "set_moments",
                left: vec![m.len()],
                right: vec![v.len()],
            });
        }
        self.m = m;
        self.v = v;
        self.steps = steps;
        Ok(())
    }

    /// Descends along the store's accumulated gradients. Gradients are left
    /// in place; call [`ParamStore::zero_grad`] before the next pass.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let (values, grads) = store.values_and_grads_mut();
        self.apply(values, grads)
    }

    /// `params <- params - update(grads)`.
    pub fn apply(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(NnError::ShapeMismatch {
                op: "optimizer_step",
                left: vec![params.len()],
                right: vec![grads.len()],
            });
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(NnError::ShapeMismatch {
                    op: "optimizer_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(NnError::NonFinite { op: "optimizer_step" });
            }
        }
        if self.m.is_empty() && self.kind != OptimizerKind::Sgd {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = self.m.clone();
        }
        let clip = match self.max_grad_norm {
            Some(max) => {
                let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.steps += 1;
        let lr = self.lr;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (x, &d) in p.data_mut().iter_mut().zip(g.data()) {
                        *x -= lr * clip * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.steps as i32;
                let bc1 = 1.0 - ADAM_BETA1.powi(t);
                let bc2 = 1.0 - ADAM_BETA2.powi(t);
                for ((p, g), (m, v)) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                {
                    let it = p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut().iter_mut().zip(v.data_mut()));
                    for ((x, &d), (mi, vi)) in it {
                        let d = d * clip;
                        *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * d;
                        *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * d * d;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *x -= lr * mhat / (vhat.sqrt() + OPT_EPS);
                    }
                }
            }
            OptimizerKind::RmsProp => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(self.v.iter_mut()) {
                    let it = p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut());
                    for ((x, &d), vi) in it {
                        let d = d * clip;
                        *vi = RMSPROP_DECAY * *vi + (1.0 - RMSPROP_DECAY) * d * d;
                        *x -= lr * d / (vi.sqrt() + OPT_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}
