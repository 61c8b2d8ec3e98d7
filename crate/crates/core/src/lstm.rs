//! Single-layer LSTM baseline with a linear read-out.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::param_struct;
use crate::tensor::{Rng, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct LstmConfig {
    pub in_dim: usize,
    pub hidden: usize,
    pub n_o: usize,
}

param_struct! {
    /// Gate blocks are stacked in the order input, forget, candidate, output.
    LstmParams, LstmVars {
        w_x,
        w_h,
        b,
        w_out,
        b_out,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            h: Tensor::zeros(&[hidden]),
            c: Tensor::zeros(&[hidden]),
        }
    }
}

pub fn lstm_init(cfg: &LstmConfig, rng: &mut Rng) -> Result<LstmParams> {
    if cfg.in_dim == 0 || cfg.hidden == 0 || cfg.n_o == 0 {
        return Err(Error::Invalid("LSTM sizes must be positive".into()));
    }
    let h = cfg.hidden;
    Ok(LstmParams {
        w_x: rng.init_weight(4 * h, cfg.in_dim),
        w_h: rng.init_weight(4 * h, h),
        b: Tensor::zeros(&[4 * h]),
        w_out: rng.init_weight(cfg.n_o, h),
        b_out: Tensor::zeros(&[cfg.n_o]),
    })
}

/// `(h, c)` nodes carried between steps.
#[derive(Clone, Copy, Debug)]
pub struct LstmGraphState {
    pub h: Var,
    pub c: Var,
}

/// `c' = σ(f)⊙c + σ(i)⊙tanh(g)`, `h' = σ(o)⊙tanh(c')`. Returns `h'` and the
/// next state; the read-out is applied separately.
pub fn lstm_step(g: &mut Graph, p: &LstmVars, s: LstmGraphState, x: Var) -> Result<(Var, LstmGraphState)> {
    let h = g.shape(s.h)[0];
    let zx = g.matmul(p.w_x, x)?;
    let zh = g.matmul(p.w_h, s.h)?;
    let z = g.add(zx, zh)?;
    let z = g.add(z, p.b)?;
    let blocks = g.reshape(z, &[4, h])?;
    let i = g.index0(blocks, 0)?;
    let f = g.index0(blocks, 1)?;
    let c_in = g.index0(blocks, 2)?;
    let o = g.index0(blocks, 3)?;
    let i = g.sigmoid(i);
    let f = g.sigmoid(f);
    let c_in = g.tanh(c_in);
    let o = g.sigmoid(o);
    let kept = g.mul(f, s.c)?;
    let written = g.mul(i, c_in)?;
    let c = g.add(kept, written)?;
    let tc = g.tanh(c);
    let h_next = g.mul(o, tc)?;
    Ok((h_next, LstmGraphState { h: h_next, c }))
}

/// Read-out logits for every row of `inputs` (`T×in_dim`), from a zero state.
pub fn lstm_sequence(g: &mut Graph, cfg: &LstmConfig, p: &LstmVars, inputs: &Tensor) -> Result<Var> {
    if inputs.rank() != 2 || inputs.shape()[1] != cfg.in_dim {
        return Err(Error::Shape {
            op: "lstm_sequence",
            lhs: inputs.shape().to_vec(),
            rhs: vec![cfg.in_dim],
        });
    }
    let zero = LstmState::zeros(cfg.hidden);
    let mut s = LstmGraphState {
        h: g.constant(zero.h),
        c: g.constant(zero.c),
    };
    let mut outs = Vec::with_capacity(inputs.shape()[0]);
    for t in 0..inputs.shape()[0] {
        let x = g.constant(inputs.index0(t));
        let (h, next) = lstm_step(g, p, s, x)?;
        let y = g.matmul(p.w_out, h)?;
        outs.push(g.add(y, p.b_out)?);
        s = next;
    }
    g.stack(&outs)
}
