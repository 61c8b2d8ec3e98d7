//! The SAM operator and the associative-memory views of outer product
//! attention: Hebbian and Widrow–Hoff writes, contraction reads, dual cues
//! for linearly independent keys, and the two-step relational read.

use crate::attention::{opa_batch, OpaSpec};
use crate::error::{Error, Result};
use crate::linalg::{gram_schmidt, lstsq};
use crate::tensor::{dot, Rng, Tensor};

/// Layer-norm gain and bias for one projection.
#[derive(Clone, Debug, PartialEq)]
pub struct LnParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LnParams {
    pub fn identity(d: usize) -> Self {
        LnParams {
            gain: Tensor::ones(&[d]),
            bias: Tensor::zeros(&[d]),
        }
    }
}

/// Projection weights of a SAM operator over an `n×d` item memory.
#[derive(Clone, Debug, PartialEq)]
pub struct SamParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub ln_q: LnParams,
    pub ln_k: LnParams,
    pub ln_v: LnParams,
}

impl SamParams {
    pub fn init(n_q: usize, n_kv: usize, n: usize, d: usize, rng: &mut Rng) -> Self {
        SamParams {
            w_q: rng.init_weight(n_q, n),
            w_k: rng.init_weight(n_kv, n),
            w_v: rng.init_weight(n_kv, n),
            ln_q: LnParams::identity(d),
            ln_k: LnParams::identity(d),
            ln_v: LnParams::identity(d),
        }
    }

    pub fn n_q(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn n_kv(&self) -> usize {
        self.w_k.shape()[0]
    }
}

/// `SAM_θ(M)[s] = Σ_j tanh(M_q[s] ⊙ M_k[j]) ⊗ M_v[j]` with
/// `M_x = LN(W_x · M)`. Returns an `n_q×d×d` tensor.
pub fn sam_forward(m: &Tensor, p: &SamParams) -> Result<Tensor> {
    if m.rank() != 2 {
        return Err(Error::Rank {
            op: "sam_forward",
            expected: "2",
            shape: m.shape().to_vec(),
        });
    }
    let mq = p.w_q.matmul(m)?.layer_norm(&p.ln_q.gain, &p.ln_q.bias)?;
    let mk = p.w_k.matmul(m)?.layer_norm(&p.ln_k.gain, &p.ln_k.bias)?;
    let mv = p.w_v.matmul(m)?.layer_norm(&p.ln_v.gain, &p.ln_v.bias)?;
    opa_batch(&mq, &mk, &mv, &OpaSpec::Tanh)
}

/// SAM without layer normalization and with an arbitrary elementwise map.
pub fn sam_forward_raw(m: &Tensor, w_q: &Tensor, w_k: &Tensor, w_v: &Tensor, spec: &OpaSpec) -> Result<Tensor> {
    let mq = w_q.matmul(m)?;
    let mk = w_k.matmul(m)?;
    let mv = w_v.matmul(m)?;
    opa_batch(&mq, &mk, &mv, spec)
}

/// How an [`AssocMemory`] is laid out.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// `Σ x_i ⊗ v_i`; read with `cueᵀ · store`.
    KeyByValue,
    /// `Σ v_i ⊗ x_i` (Widrow–Hoff form); read with `store · cue`.
    ValueByKey,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssocMemory {
    pub store: Tensor,
    pub layout: Layout,
}

fn check_pairs(d: usize, pairs: &[(Tensor, Tensor)]) -> Result<()> {
    for (x, v) in pairs {
        if x.shape() != [d] || v.shape() != [d] {
            return Err(Error::Shape {
                op: "assoc_write",
                lhs: x.shape().to_vec(),
                rhs: v.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// Hebbian hetero-associative write `Σ_i x_i ⊗ v_i`.
pub fn assoc_write(d: usize, pairs: &[(Tensor, Tensor)]) -> Result<AssocMemory> {
    check_pairs(d, pairs)?;
    let mut store = Tensor::zeros(&[d, d]);
    for (x, v) in pairs {
        store.add_assign(&Tensor::outer(x, v)?);
    }
    Ok(AssocMemory {
        store,
        layout: Layout::KeyByValue,
    })
}

/// Contraction read with a cue vector.
pub fn assoc_read(m: &AssocMemory, cue: &Tensor) -> Result<Tensor> {
    match m.layout {
        Layout::KeyByValue => cue.matmul(&m.store),
        Layout::ValueByKey => m.store.matmul(cue),
    }
}

/// One pass of the Widrow–Hoff rule `A ← A + (v_i - A x_i) ⊗ x_i`.
pub fn widrow_hoff_write(d: usize, pairs: &[(Tensor, Tensor)]) -> Result<AssocMemory> {
    widrow_hoff_passes(d, pairs, 1)
}

/// Repeated Widrow–Hoff passes over the same pairs.
pub fn widrow_hoff_passes(d: usize, pairs: &[(Tensor, Tensor)], passes: usize) -> Result<AssocMemory> {
    check_pairs(d, pairs)?;
    let mut m = AssocMemory {
        store: Tensor::zeros(&[d, d]),
        layout: Layout::ValueByKey,
    };
    for _ in 0..passes {
        widrow_hoff_pass(&mut m, pairs)?;
    }
    Ok(m)
}

/// Applies one more Widrow–Hoff pass to an existing value-by-key memory.
pub fn widrow_hoff_pass(m: &mut AssocMemory, pairs: &[(Tensor, Tensor)]) -> Result<()> {
    if m.layout != Layout::ValueByKey {
        return Err(Error::Invalid("Widrow–Hoff updates need a value-by-key memory".into()));
    }
    for (x, v) in pairs {
        let err = v.sub(&m.store.matmul(x)?)?;
        m.store.add_assign(&Tensor::outer(&err, x)?);
    }
    Ok(())
}

/// Cues `c_j` with `c_j · x_i = δ_ij` for linearly independent rows `x_i`,
/// built from a Gram–Schmidt factorization `X = L·Q`: `C = L⁻ᵀ·Q`.
pub fn retrieval_cues(xs: &Tensor) -> Result<Tensor> {
    let q = gram_schmidt(xs)?;
    let n = xs.shape()[0];
    // L = X·Qᵀ is lower triangular.
    let l = xs.matmul(&q.transpose()?)?;
    // Solve Lᵀ·M = I for M = L⁻ᵀ by back substitution, column by column.
    let mut minv = Tensor::zeros(&[n, n]);
    for col in 0..n {
        for row in (0..n).rev() {
            let mut s = if row == col { 1.0 } else { 0.0 };
            for k in row + 1..n {
                s -= l.get(&[k, row]) * minv.get(&[k, col]);
            }
            minv.set(&[row, col], s / l.get(&[row, row]));
        }
    }
    minv.matmul(&q)
}

/// Outcome of [`two_step_retrieval_demo`].
#[derive(Clone, Debug)]
pub struct TwoStepRetrieval {
    pub retrieved: Tensor,
    pub target: Tensor,
    pub probed_index: usize,
    pub error: f64,
}

/// Builds the item memory `M = Σ x_i ⊗ x_i` from nonnegative, near
/// orthonormal patterns, solves for projection rows that make SAM (without
/// layer norm, `F = sqrt`) isolate the probed pattern, and reads the
/// relational memory back with `softmax(z)ᵀ · M_r · (x / n_kv)`.
pub fn two_step_retrieval_demo(
    patterns: &[Tensor],
    probe: &Tensor,
    n_q: usize,
    n_kv: usize,
) -> Result<TwoStepRetrieval> {
    let d = probe.numel();
    if patterns.is_empty() || patterns.len() >= d {
        return Err(Error::Invalid(format!(
            "need between 1 and {} patterns for d = {d}, got {}",
            d - 1,
            patterns.len()
        )));
    }
    if n_q == 0 || n_kv == 0 {
        return Err(Error::Invalid("n_q and n_kv must be positive".into()));
    }
    for (i, x) in patterns.iter().enumerate() {
        if x.shape() != [d] {
            return Err(Error::Shape {
                op: "two_step_retrieval_demo",
                lhs: x.shape().to_vec(),
                rhs: vec![d],
            });
        }
        if x.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Invalid(format!("pattern {i} has negative entries")));
        }
        if (x.norm() - 1.0).abs() >= 0.05 {
            return Err(Error::Invalid(format!("pattern {i} is not near unit norm")));
        }
        for (j, y) in patterns.iter().enumerate().take(i) {
            let c = dot(x.data(), y.data()).abs();
            if c >= 0.05 {
                return Err(Error::Invalid(format!(
                    "patterns {j} and {i} are too correlated (|dot| = {c})"
                )));
            }
        }
    }
    let probed_index = patterns
        .iter()
        .enumerate()
        .map(|(i, x)| (i, dot(x.data(), probe.data())))
        .fold((0, f64::NEG_INFINITY), |b, (i, s)| if s > b.1 { (i, s) } else { b })
        .0;

    let x = Tensor::stack(patterns)?;
    let mut memory = Tensor::zeros(&[d, d]);
    for p in patterns {
        memory.add_assign(&Tensor::outer(p, p)?);
    }
    let select: Vec<f64> = (0..patterns.len())
        .map(|i| if i == probed_index { 1.0 } else { 0.0 })
        .collect();
    let solve = |rhs: &[f64]| -> Result<Vec<f64>> {
        let (w, res) = lstsq(&x, rhs)?;
        if res > 1e-6 {
            return Err(Error::Invalid(format!(
                "projection system residual {res:e} exceeds 1e-6"
            )));
        }
        Ok(w)
    };
    let w_sel = solve(&select)?;
    let w_all = solve(&vec![1.0; patterns.len()])?;
    let rows = |w: &[f64], n: usize| Tensor::new(vec![n, d], w.repeat(n));
    let w_q = rows(&w_sel, n_q)?;
    let w_k = rows(&w_sel, n_kv)?;
    let w_v = rows(&w_all, n_kv)?;
    let relational = sam_forward_raw(&memory, &w_q, &w_k, &w_v, &OpaSpec::Sqrt)?;

    // First contraction: attention over the n_q slices (z = 0 gives uniform
    // weights; every slice is identical under this construction).
    let weights = Tensor::zeros(&[n_q]).softmax()?;
    let collapsed = weights.matmul(&relational.reshape(&[n_q, d * d])?)?.reshape(&[d, d])?;
    // Second contraction with f(x) = x / n_kv.
    let retrieved = collapsed.matmul(&probe.scale(1.0 / n_kv as f64))?;
    let target = patterns[probed_index].clone();
    let error = retrieved.sub(&target)?.norm();
    Ok(TwoStepRetrieval {
        retrieved,
        target,
        probed_index,
        error,
    })
}

/// Nonnegative orthonormal patterns on disjoint coordinate blocks, the only
/// way unit vectors with nonnegative entries can be mutually orthogonal.
pub fn disjoint_patterns(d: usize, count: usize, rng: &mut Rng) -> Vec<Tensor> {
    assert!(count >= 1 && count <= d);
    let mut coords: Vec<usize> = (0..d).collect();
    rng.shuffle(&mut coords);
    let block = d / count;
    (0..count)
        .map(|i| {
            let mut v = vec![0.0; d];
            for &c in &coords[i * block..(i + 1) * block] {
                v[c] = rng.uniform(0.2, 1.0);
            }
            let t = Tensor::vector(&v);
            let n = t.norm();
            t.scale(1.0 / n)
        })
        .collect()
}
