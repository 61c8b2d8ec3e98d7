//! Dot product attention (DPA), outer product attention (OPA), the
//! contraction that recovers DPA from OPA, and the bilinear reading of a
//! linear map applied to a flattened OPA output.
//!
//! These are plain functions over [`Tensor`]s; the differentiable batched
//! form used for training lives on [`crate::Graph::opa_tanh`].

use crate::error::{Error, Result};
use crate::tensor::{dot, softmax_slice, Tensor};

/// Scoring function applied to each `q·k_i`.
#[derive(Clone, Debug, PartialEq)]
pub enum DpaSpec {
    Softmax,
    /// `S(x) = a·x + b`
    Affine {
        a: f64,
        b: f64,
    },
}

/// Elementwise map applied to each `q ⊙ k_i`.
#[derive(Clone, Debug, PartialEq)]
pub enum OpaSpec {
    Tanh,
    /// `F(x) = a ⊙ x + b`
    Affine {
        a: Vec<f64>,
        b: Vec<f64>,
    },
    /// `F(x) = a ⊙ x`, every `a_i` nonzero.
    Scaled {
        a: Vec<f64>,
    },
    /// `F(x) = sqrt(max(x, 0))`
    Sqrt,
}

impl OpaSpec {
    pub fn validate(&self, d_qk: usize) -> Result<()> {
        match self {
            OpaSpec::Affine { a, b } if a.len() != d_qk || b.len() != d_qk => {
                Err(Error::Invalid(format!("affine OPA map needs vectors of length {d_qk}")))
            }
            OpaSpec::Scaled { a } if a.len() != d_qk => Err(Error::Invalid(format!(
                "scaled OPA map needs a vector of length {d_qk}"
            ))),
            OpaSpec::Scaled { a } if a.contains(&0.0) => {
                Err(Error::Invalid("scaled OPA map needs nonzero coefficients".into()))
            }
            _ => Ok(()),
        }
    }

    /// Applies the map to `x = q ⊙ k`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            OpaSpec::Tanh => x.iter().map(|v| v.tanh()).collect(),
            OpaSpec::Affine { a, b } => x.iter().zip(a.iter().zip(b)).map(|(v, (a, b))| a * v + b).collect(),
            OpaSpec::Scaled { a } => x.iter().zip(a).map(|(v, a)| a * v).collect(),
            OpaSpec::Sqrt => x.iter().map(|v| v.max(0.0).sqrt()).collect(),
        }
    }
}

/// Row vector `a_p` of `P(X) = a_p · X`.
#[derive(Clone, Debug, PartialEq)]
pub struct Contraction {
    pub a_p: Vec<f64>,
}

impl Contraction {
    pub fn ones(d_qk: usize) -> Self {
        Contraction { a_p: vec![1.0; d_qk] }
    }
}

fn check_qkv(op: &'static str, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(usize, usize, usize)> {
    if k.rank() != 2 || v.rank() != 2 || q.rank() != 1 {
        return Err(Error::Rank {
            op,
            expected: "q: 1, K: 2, V: 2",
            shape: k.shape().to_vec(),
        });
    }
    let (nkv, dqk, dv) = (k.shape()[0], k.shape()[1], v.shape()[1]);
    if q.numel() != dqk {
        return Err(Error::Shape {
            op,
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    if v.shape()[0] != nkv {
        return Err(Error::Shape {
            op,
            lhs: k.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    Ok((nkv, dqk, dv))
}

/// `A°(q, K, V) = Σ_i S(q·k_i) v_i`.
///
/// Tensors have no zero-sized axes, so `K` always holds at least one key.
pub fn dpa(q: &Tensor, k: &Tensor, v: &Tensor, spec: &DpaSpec) -> Result<Tensor> {
    let (nkv, dqk, dv) = check_qkv("dpa", q, k, v)?;
    let raw: Vec<f64> = (0..nkv)
        .map(|i| dot(q.data(), &k.data()[i * dqk..(i + 1) * dqk]))
        .collect();
    let scores = match spec {
        DpaSpec::Softmax => softmax_slice(&raw),
        DpaSpec::Affine { a, b } => raw.iter().map(|x| a * x + b).collect(),
    };
    let mut out = vec![0.0; dv];
    for (i, s) in scores.iter().enumerate() {
        for (o, x) in out.iter_mut().zip(&v.data()[i * dv..(i + 1) * dv]) {
            *o += s * x;
        }
    }
    Ok(Tensor::vector(&out))
}

/// `A⊗(q, K, V) = Σ_i F(q ⊙ k_i) ⊗ v_i`, a `d_qk×d_v` matrix.
pub fn opa(q: &Tensor, k: &Tensor, v: &Tensor, spec: &OpaSpec) -> Result<Tensor> {
    let (nkv, dqk, dv) = check_qkv("opa", q, k, v)?;
    spec.validate(dqk)?;
    let mut out = vec![0.0; dqk * dv];
    for i in 0..nkv {
        let qk: Vec<f64> = q
            .data()
            .iter()
            .zip(&k.data()[i * dqk..(i + 1) * dqk])
            .map(|(a, b)| a * b)
            .collect();
        let f = spec.apply(&qk);
        let vi = &v.data()[i * dv..(i + 1) * dv];
        for (r, fr) in f.iter().enumerate() {
            for (o, x) in out[r * dv..(r + 1) * dv].iter_mut().zip(vi) {
                *o += fr * x;
            }
        }
    }
    Tensor::new(vec![dqk, dv], out)
}

/// Maps [`dpa`] over the rows of a query matrix, giving `n_q×d_v`.
pub fn dpa_batch(qs: &Tensor, k: &Tensor, v: &Tensor, spec: &DpaSpec) -> Result<Tensor> {
    let rows = query_rows(qs)?;
    let outs = rows.iter().map(|q| dpa(q, k, v, spec)).collect::<Result<Vec<_>>>()?;
    Tensor::stack(&outs)
}

/// Maps [`opa`] over the rows of a query matrix, giving `n_q×d_qk×d_v`.
pub fn opa_batch(qs: &Tensor, k: &Tensor, v: &Tensor, spec: &OpaSpec) -> Result<Tensor> {
    let rows = query_rows(qs)?;
    let outs = rows.iter().map(|q| opa(q, k, v, spec)).collect::<Result<Vec<_>>>()?;
    Tensor::stack(&outs)
}

fn query_rows(qs: &Tensor) -> Result<Vec<Tensor>> {
    if qs.rank() != 2 {
        return Err(Error::Rank {
            op: "attention batch",
            expected: "2",
            shape: qs.shape().to_vec(),
        });
    }
    Ok((0..qs.shape()[0]).map(|i| qs.index0(i)).collect())
}

/// `P(A) = a_p · A`.
pub fn contract_p(a: &Tensor, c: &Contraction) -> Result<Tensor> {
    if a.rank() != 2 || c.a_p.len() != a.shape()[0] {
        return Err(Error::Shape {
            op: "contract_p",
            lhs: a.shape().to_vec(),
            rhs: vec![c.a_p.len()],
        });
    }
    Tensor::vector(&c.a_p).matmul(a)
}

fn check_bilinear(wg: &Tensor, f: &Tensor, v: &Tensor) -> Result<(usize, usize, usize)> {
    if wg.rank() != 3 || f.rank() != 1 || v.rank() != 1 {
        return Err(Error::Rank {
            op: "bilinear_expand",
            expected: "Wg: 3, f: 1, v: 1",
            shape: wg.shape().to_vec(),
        });
    }
    let (n, dqk, dv) = (wg.shape()[0], wg.shape()[1], wg.shape()[2]);
    if f.numel() != dqk || v.numel() != dv {
        return Err(Error::Shape {
            op: "bilinear_expand",
            lhs: wg.shape().to_vec(),
            rhs: vec![f.numel(), v.numel()],
        });
    }
    Ok((n, dqk, dv))
}

/// Bilinear form `out[s] = Σ_j Σ_t Wg[s,j,t] f[j] v[t]` by explicit double
/// summation.
pub fn bilinear_expand(wg: &Tensor, f: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (n, dqk, dv) = check_bilinear(wg, f, v)?;
    let out: Vec<f64> = (0..n)
        .map(|s| {
            let mut acc = 0.0;
            for j in 0..dqk {
                for t in 0..dv {
                    acc += wg.data()[(s * dqk + j) * dv + t] * f.data()[j] * v.data()[t];
                }
            }
            acc
        })
        .collect();
    Ok(Tensor::vector(&out))
}

/// The same quantity computed as the linear map `Wg_flat · vec(f ⊗ v)`
/// with `Wg_flat: n×(d_qk·d_v)`.
pub fn bilinear_flattened(wg: &Tensor, f: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (n, dqk, dv) = check_bilinear(wg, f, v)?;
    let flat = wg.reshape(&[n, dqk * dv])?;
    let vec = Tensor::outer(f, v)?.reshape(&[dqk * dv])?;
    flat.matmul(&vec)
}
