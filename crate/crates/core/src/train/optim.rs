//! RMSprop and Adam over an ordered list of parameter tensors.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RMSPROP_RHO: f64 = 0.9;
pub const OPT_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    RmsProp { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64 },
}

impl OptimizerKind {
    pub fn adam(lr: f64) -> Self {
        OptimizerKind::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerKind::RmsProp { lr } | OptimizerKind::Adam { lr, .. } => lr,
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptimizerKind::RmsProp { lr } => write!(f, "rmsprop(lr={lr:e})"),
            OptimizerKind::Adam { lr, beta1, beta2 } => write!(f, "adam(lr={lr:e}, b1={beta1}, b2={beta2})"),
        }
    }
}

/// Optimizer state: first and second moments per parameter.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update. `params` and `grads` must keep the same order and
    /// shapes across calls.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Invalid(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "optimizer_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        if self.v.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        match self.kind {
            OptimizerKind::RmsProp { lr } => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.v) {
                    let pd = p.data_mut();
                    for ((x, &gi), vi) in pd.iter_mut().zip(g.data()).zip(v.data_mut()) {
                        *vi = RMSPROP_RHO * *vi + (1.0 - RMSPROP_RHO) * gi * gi;
                        *x -= lr * gi / (*vi + OPT_EPS).sqrt();
                    }
                }
            }
            OptimizerKind::Adam { lr, beta1, beta2 } => {
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    let pd = p.data_mut();
                    for (((x, &gi), mi), vi) in pd.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + OPT_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
