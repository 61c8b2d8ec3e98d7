//! Numerical rank of learned weights and instrumented operation counts for
//! the two attention kinds.

use std::fmt;

use crate::attention::{dpa, opa, DpaSpec, OpaSpec};
use crate::error::{Error, Result};
use crate::linalg::spectral_norm;
use crate::tensor::{Rng, Tensor};

pub const RANK_REL_TOL: f64 = 1e-9;
pub const RANK_MAX_ITER: usize = 10_000;

/// `‖W‖_F² / ‖W‖₂²`. Rank-3 tensors are read as `rows × (rest)`.
pub fn numerical_rank(w: &Tensor) -> Result<f64> {
    let m = match w.rank() {
        2 => w.clone(),
        r if r > 2 => {
            let rows = w.shape()[0];
            w.reshape(&[rows, w.numel() / rows])?
        }
        _ => {
            return Err(Error::Rank {
                op: "numerical_rank",
                expected: "2 or more",
                shape: w.shape().to_vec(),
            })
        }
    };
    let fro2: f64 = m.data().iter().map(|v| v * v).sum();
    if fro2 == 0.0 {
        return Err(Error::Invalid("numerical rank of a zero matrix is undefined".into()));
    }
    let s = spectral_norm(&m, RANK_REL_TOL, RANK_MAX_ITER)?;
    Ok(fro2 / (s * s))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnKind {
    Dpa,
    Opa,
}

impl fmt::Display for AttnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttnKind::Dpa => "dpa",
            AttnKind::Opa => "opa",
        })
    }
}

/// Scalar operation tally of one attention evaluation. Nonlinear maps
/// (`exp`, `tanh`) are counted separately as function evaluations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub adds: u64,
    pub mults: u64,
    pub fn_evals: u64,
    /// Scalars holding query-key relationships (scores or OPA matrices).
    pub storage: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlopReport {
    pub kind: AttnKind,
    pub n_q: usize,
    pub n_kv: usize,
    pub d_qk: usize,
    pub d_v: usize,
    pub measured: OpCounts,
    /// Leading-order complexity formulas `(adds, mults, storage)`.
    pub formula: (f64, f64, f64),
    /// Result of the instrumented computation, `n_q×d_v` or `n_q×d_qk×d_v`.
    pub output: Tensor,
}

impl FlopReport {
    pub fn output_elements(&self) -> u64 {
        self.output.numel() as u64
    }
}

/// Leading-order counts for `(adds, mults, storage)`.
pub fn complexity_formula(kind: AttnKind, n_q: usize, n_kv: usize, d_qk: usize, d_v: usize) -> (f64, f64, f64) {
    let (q, n, k, v) = (n_q as f64, n_kv as f64, d_qk as f64, d_v as f64);
    match kind {
        AttnKind::Dpa => ((k * q + v) * n, (k + v) * q * n, q * n),
        AttnKind::Opa => (q * n * k * v, q * k * v, q * k * v),
    }
}

/// Affine-score DPA and tanh OPA evaluated with explicit scalar loops that
/// tally every add and multiply. The inputs are seeded from the dimensions.
pub fn flop_counters(kind: AttnKind, n_q: usize, n_kv: usize, d_qk: usize, d_v: usize) -> Result<FlopReport> {
    if n_q == 0 || n_kv == 0 || d_qk == 0 || d_v == 0 {
        return Err(Error::Invalid("flop counter dimensions must be positive".into()));
    }
    let mut rng = Rng::new((n_q * 1_000_003 + n_kv * 10_007 + d_qk * 101 + d_v) as u64, 0);
    let qs = rng.uniform_tensor(&[n_q, d_qk], -1.0, 1.0);
    let k = rng.uniform_tensor(&[n_kv, d_qk], -1.0, 1.0);
    let v = rng.uniform_tensor(&[n_kv, d_v], -1.0, 1.0);
    let (kd, vd) = (k.data(), v.data());
    let mut c = OpCounts::default();
    let mut out = Vec::new();
    match kind {
        AttnKind::Dpa => {
            let (a, b) = (0.5, 0.25);
            c.storage = (n_q * n_kv) as u64;
            for qi in 0..n_q {
                let q = &qs.data()[qi * d_qk..(qi + 1) * d_qk];
                let mut acc = vec![0.0; d_v];
                for i in 0..n_kv {
                    let mut s = q[0] * kd[i * d_qk];
                    c.mults += 1;
                    for j in 1..d_qk {
                        s += q[j] * kd[i * d_qk + j];
                        c.mults += 1;
                        c.adds += 1;
                    }
                    let s = a * s + b;
                    c.mults += 1;
                    c.adds += 1;
                    for j in 0..d_v {
                        let t = s * vd[i * d_v + j];
                        c.mults += 1;
                        if i == 0 {
                            acc[j] = t;
                        } else {
                            acc[j] += t;
                            c.adds += 1;
                        }
                    }
                }
                out.extend(acc);
            }
        }
        AttnKind::Opa => {
            c.storage = (n_q * d_qk * d_v) as u64;
            for qi in 0..n_q {
                let q = &qs.data()[qi * d_qk..(qi + 1) * d_qk];
                let mut acc = vec![0.0; d_qk * d_v];
                for i in 0..n_kv {
                    for r in 0..d_qk {
                        let f = (q[r] * kd[i * d_qk + r]).tanh();
                        c.mults += 1;
                        c.fn_evals += 1;
                        for j in 0..d_v {
                            let t = f * vd[i * d_v + j];
                            c.mults += 1;
                            if i == 0 {
                                acc[r * d_v + j] = t;
                            } else {
                                acc[r * d_v + j] += t;
                                c.adds += 1;
                            }
                        }
                    }
                }
                out.extend(acc);
            }
        }
    }
    let shape = match kind {
        AttnKind::Dpa => vec![n_q, d_v],
        AttnKind::Opa => vec![n_q, d_qk, d_v],
    };
    let output = Tensor::new(shape, out)?;
    let check = match kind {
        AttnKind::Dpa => {
            let spec = DpaSpec::Affine { a: 0.5, b: 0.25 };
            let rows: Result<Vec<Tensor>> = (0..n_q).map(|i| dpa(&qs.index0(i), &k, &v, &spec)).collect();
            Tensor::stack(&rows?)?
        }
        AttnKind::Opa => {
            let rows: Result<Vec<Tensor>> = (0..n_q).map(|i| opa(&qs.index0(i), &k, &v, &OpaSpec::Tanh)).collect();
            Tensor::stack(&rows?)?
        }
    };
    if check.max_abs_diff(&output) > 1e-9 {
        return Err(Error::Invalid(
            "instrumented attention disagrees with the reference".into(),
        ));
    }
    Ok(FlopReport {
        kind,
        n_q,
        n_kv,
        d_qk,
        d_v,
        measured: c,
        formula: complexity_formula(kind, n_q, n_kv, d_qk, d_v),
        output,
    })
}
