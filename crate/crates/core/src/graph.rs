//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and enough cached state to run its pullback. Nodes only reference earlier
//! nodes, so the tape order is a topological order and [`Graph::backward`]
//! is a single reverse sweep with gradient accumulation at fan-out.

use crate::error::{Error, Result};
use crate::tensor::{
    axis_split, broadcast_kind, flatten_shape, gemm_nn, gemm_nt, gemm_tn, matmul_dims, row_stats, sigmoid,
    softmax_slice, Broadcast, FlattenMode, ReduceOp, Tensor,
};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    BroadcastAdd {
        big: Var,
        small: Var,
        scalar: bool,
    },
    Outer(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    MatMulNt {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose(Var),
    Reshape(Var),
    Reduce {
        a: Var,
        axis: usize,
        argmax: Option<Vec<usize>>,
    },
    SumAll(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv: Vec<f64>,
    },
    Opa {
        q: Var,
        k: Var,
        v: Var,
        act: Vec<f64>,
    },
    Stack(Vec<Var>),
    Index0(Var, usize),
    BceLogits {
        logits: Var,
        targets: Tensor,
        mask: Vec<f64>,
        count: f64,
    },
    SoftmaxCe {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::ScaleBy(a, b) | Op::Outer(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::SumAll(a)
            | Op::Softmax(a)
            | Op::Index0(a, _) => vec![*a],
            Op::BroadcastAdd { big, small, .. } => vec![*big, *small],
            Op::MatMul { a, b, .. } | Op::MatMulNt { a, b, .. } => vec![*a, *b],
            Op::Reduce { a, .. } => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Opa { q, k, v, .. } => vec![*q, *k, *v],
            Op::Stack(parts) => parts.clone(),
            Op::BceLogits { logits, .. } | Op::SoftmaxCe { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    /// True when the node depends on a leaf; gradients are only propagated
    /// into such nodes.
    grad: bool,
}

/// Operation tape. Rebuilt for every sequence.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of a backward sweep: one optional gradient per node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`. Nodes the loss does not
    /// depend on yield `None`.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when the loss does not
    /// depend on it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let grad = matches!(op, Op::Leaf) || op.inputs().iter().any(|v| self.nodes[v.0].grad);
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// A node that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).add(self.value(b))?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).sub(self.value(b))?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).mul(self.value(b))?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).scale(s);
        self.push(t, Op::Scale(a, s))
    }

    /// Multiplies `a` by the one-element tensor `s` (a learnable scalar).
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(shape_err("scale_by", self.value(a), self.value(s)));
        }
        let t = self.value(a).scale(self.value(s).item());
        Ok(self.push(t, Op::ScaleBy(a, s)))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).tanh();
        self.push(t, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).sigmoid();
        self.push(t, Op::Sigmoid(a))
    }

    /// See [`Tensor::broadcast_add`]; either argument may be the smaller one.
    pub fn broadcast_add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) == self.shape(b) {
            return self.add(a, b);
        }
        let t = self.value(a).broadcast_add(self.value(b))?;
        let (big, small) = if self.value(a).numel() >= self.value(b).numel() {
            (a, b)
        } else {
            (b, a)
        };
        let scalar = matches!(
            broadcast_kind(self.shape(big), self.shape(small)),
            Some(Broadcast::Scalar)
        );
        Ok(self.push(t, Op::BroadcastAdd { big, small, scalar }))
    }

    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = Tensor::outer(self.value(a), self.value(b))?;
        Ok(self.push(t, Op::Outer(a, b)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).matmul(self.value(b))?;
        let (m, k, n, _, _) = matmul_dims(self.shape(a), self.shape(b))?;
        Ok(self.push(t, Op::MatMul { a, b, m, k, n }))
    }

    /// `a · bᵀ` for two matrices, without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(shape_err("matmul_nt", self.value(a), self.value(b)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNt { a, b, m, k, n }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        Ok(self.push(t, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    pub fn flatten(&mut self, a: Var, mode: FlattenMode) -> Result<Var> {
        let shape = flatten_shape(self.shape(a), mode)?;
        self.reshape(a, &shape)
    }

    pub fn reduce(&mut self, a: Var, op: ReduceOp, axis: usize) -> Result<Var> {
        let x = self.value(a);
        let t = x.reduce(op, axis)?;
        let argmax = match op {
            ReduceOp::Sum => None,
            ReduceOp::Max => {
                let (outer, len, inner) = axis_split(x.shape(), axis);
                let mut idx = vec![0usize; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = f64::NEG_INFINITY;
                        for p in 0..len {
                            let v = x.data()[(o * len + p) * inner + i];
                            if v > best {
                                best = v;
                                idx[o * inner + i] = p;
                            }
                        }
                    }
                }
                Some(idx)
            }
        };
        Ok(self.push(t, Op::Reduce { a, axis, argmax }))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum_all());
        self.push(t, Op::SumAll(a))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).softmax()?;
        Ok(self.push(t, Op::Softmax(a)))
    }

    /// Row-wise layer normalization over the last axis with learnable gain
    /// and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let t = self.value(x).layer_norm(self.value(gain), self.value(bias))?;
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap();
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut inv = Vec::with_capacity(xv.numel() / d);
        for row in xv.data().chunks(d) {
            let (mean, iv) = row_stats(row);
            inv.push(iv);
            xhat.extend(row.iter().map(|&v| (v - mean) * iv));
        }
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv,
            },
        ))
    }

    /// Batched outer product attention with `tanh` as the elementwise map:
    /// `out[s] = Σ_j tanh(q[s] ⊙ k[j]) ⊗ v[j]` for `q: n_q×d`, `k: n_kv×d`,
    /// `v: n_kv×d_v`, giving `n_q×d×d_v`.
    pub fn opa_tanh(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (qs, ks, vs) = (self.shape(q), self.shape(k), self.shape(v));
        if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks[0] != vs[0] {
            return Err(Error::Shape {
                op: "opa",
                lhs: qs.to_vec(),
                rhs: ks.to_vec(),
            });
        }
        let (nq, d, nkv, dv) = (qs[0], qs[1], ks[0], vs[1]);
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut act = vec![0.0; nq * nkv * d];
        for s in 0..nq {
            for j in 0..nkv {
                let base = (s * nkv + j) * d;
                for r in 0..d {
                    act[base + r] = (qd[s * d + r] * kd[j * d + r]).tanh();
                }
            }
        }
        let mut out = vec![0.0; nq * d * dv];
        for s in 0..nq {
            // out[s] = act[s]ᵀ · v  with act[s]: n_kv×d
            gemm_tn(
                &act[s * nkv * d..(s + 1) * nkv * d],
                vd,
                &mut out[s * d * dv..(s + 1) * d * dv],
                d,
                nkv,
                dv,
            );
        }
        Ok(self.push(Tensor::from_parts(vec![nq, d, dv], out), Op::Opa { q, k, v, act }))
    }

    /// Stacks equal-shape nodes along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<Tensor> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let t = Tensor::stack(&vals)?;
        Ok(self.push(t, Op::Stack(parts.to_vec())))
    }

    pub fn index0(&mut self, a: Var, i: usize) -> Result<Var> {
        let x = self.value(a);
        if x.rank() < 2 || i >= x.shape()[0] {
            return Err(Error::Axis {
                op: "index0",
                axis: i,
                shape: x.shape().to_vec(),
            });
        }
        let t = x.index0(i);
        Ok(self.push(t, Op::Index0(a, i)))
    }

    /// Mean sigmoid cross-entropy over the bits of masked rows, in the
    /// overflow-free form `max(z,0) - z·t + ln(1 + e^{-|z|})`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor, mask: &[f64]) -> Result<Var> {
        let z = self.value(logits);
        if z.shape() != targets.shape() || z.rank() != 2 || mask.len() != z.shape()[0] {
            return Err(shape_err("bce_with_logits", z, targets));
        }
        let w = z.shape()[1];
        let active = mask.iter().filter(|&&m| m != 0.0).count();
        if active == 0 {
            return Err(Error::Invalid("loss mask selects no steps".into()));
        }
        let count = (active * w) as f64;
        let mut total = 0.0;
        for (row, &m) in mask.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            for c in 0..w {
                let zi = z.data()[row * w + c];
                let ti = targets.data()[row * w + c];
                total += zi.max(0.0) - zi * ti + (-zi.abs()).exp().ln_1p();
            }
        }
        Ok(self.push(
            Tensor::scalar(total / count),
            Op::BceLogits {
                logits,
                targets: targets.clone(),
                mask: mask.to_vec(),
                count,
            },
        ))
    }

    /// Softmax cross-entropy of a logit vector against a class index.
    pub fn softmax_ce(&mut self, logits: Var, target: usize) -> Result<Var> {
        let z = self.value(logits);
        if z.rank() != 1 || z.numel() < 2 {
            return Err(Error::Rank {
                op: "softmax_ce",
                expected: "1 with at least two classes",
                shape: z.shape().to_vec(),
            });
        }
        if target >= z.numel() {
            return Err(Error::Invalid(format!(
                "target class {target} out of range for {} classes",
                z.numel()
            )));
        }
        let m = z.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.data().iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        let loss = lse - z.data()[target];
        let probs = softmax_slice(z.data());
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxCe { logits, target, probs }))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Rank {
                op: "backward",
                expected: "scalar loss",
                shape: self.shape(loss).to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.pullback(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads })
    }

    fn pullback(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].grad;
        match &node.op {
            Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (val(*a), val(*b));
                // dA = dC·Bᵀ (m×k), dB = Aᵀ·dC (k×n)
                if needs(*a) {
                    gemm_nt(g.data(), bv.data(), grad_buf(grads, *a, av), *m, *n, *k);
                }
                if needs(*b) {
                    gemm_tn(av.data(), g.data(), grad_buf(grads, *b, bv), *k, *m, *n);
                }
                return;
            }
            Op::MatMulNt { a, b, m, k, n } => {
                let (av, bv) = (val(*a), val(*b));
                // C = A·Bᵀ: dA = dC·B (m×k), dB = dCᵀ·A (n×k)
                if needs(*a) {
                    gemm_nn(g.data(), bv.data(), grad_buf(grads, *a, av), *m, *n, *k);
                }
                if needs(*b) {
                    gemm_tn(g.data(), av.data(), grad_buf(grads, *b, bv), *n, *m, *k);
                }
                return;
            }
            _ => {}
        }
        let mut acc = |v: Var, t: Tensor| {
            if needs(v) {
                accumulate(grads, v, t)
            }
        };
        match &node.op {
            Op::Leaf | Op::Constant | Op::MatMul { .. } | Op::MatMulNt { .. } => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                acc(*a, g.mul(val(*b)).unwrap());
                acc(*b, g.mul(val(*a)).unwrap());
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::ScaleBy(a, s) => {
                let sv = val(*s).item();
                let ds: f64 = g.data().iter().zip(val(*a).data()).map(|(x, y)| x * y).sum();
                acc(*a, g.scale(sv));
                acc(*s, Tensor::from_parts(val(*s).shape().to_vec(), vec![ds]));
            }
            Op::Tanh(a) => {
                let y = &node.value;
                acc(
                    *a,
                    Tensor::from_parts(
                        y.shape().to_vec(),
                        g.data().iter().zip(y.data()).map(|(g, y)| g * (1.0 - y * y)).collect(),
                    ),
                );
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc(
                    *a,
                    Tensor::from_parts(
                        y.shape().to_vec(),
                        g.data().iter().zip(y.data()).map(|(g, y)| g * y * (1.0 - y)).collect(),
                    ),
                );
            }
            Op::BroadcastAdd { big, small, scalar } => {
                acc(*big, g.clone());
                let sshape = val(*small).shape().to_vec();
                let gs = if *scalar {
                    Tensor::from_parts(sshape, vec![g.sum_all()])
                } else {
                    let inner = g.numel() / sshape[0];
                    Tensor::from_parts(sshape, g.data().chunks(inner).map(|c| c.iter().sum()).collect())
                };
                acc(*small, gs);
            }
            Op::Outer(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let n = bv.numel();
                let ga: Vec<f64> = g
                    .data()
                    .chunks(n)
                    .map(|row| crate::tensor::dot(row, bv.data()))
                    .collect();
                let mut gb = vec![0.0; n];
                for (row, &x) in g.data().chunks(n).zip(av.data()) {
                    for (o, &r) in gb.iter_mut().zip(row) {
                        *o += x * r;
                    }
                }
                acc(*a, Tensor::from_parts(av.shape().to_vec(), ga));
                acc(*b, Tensor::from_parts(bv.shape().to_vec(), gb));
            }
            Op::Transpose(a) => acc(*a, g.transpose().unwrap()),
            Op::Reshape(a) => acc(*a, g.reshape(val(*a).shape()).unwrap()),
            Op::Reduce { a, axis, argmax } => {
                let av = val(*a);
                let (outer, len, inner) = axis_split(av.shape(), *axis);
                let mut ga = vec![0.0; av.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let gv = g.data()[o * inner + i];
                        match argmax {
                            None => {
                                for p in 0..len {
                                    ga[(o * len + p) * inner + i] += gv;
                                }
                            }
                            Some(idx) => ga[(o * len + idx[o * inner + i]) * inner + i] += gv,
                        }
                    }
                }
                acc(*a, Tensor::from_parts(av.shape().to_vec(), ga));
            }
            Op::SumAll(a) => acc(*a, Tensor::full(val(*a).shape(), g.item())),
            Op::Softmax(a) => {
                let y = &node.value;
                let dot: f64 = g.data().iter().zip(y.data()).map(|(g, y)| g * y).sum();
                acc(
                    *a,
                    Tensor::from_parts(
                        y.shape().to_vec(),
                        g.data().iter().zip(y.data()).map(|(g, y)| y * (g - dot)).collect(),
                    ),
                );
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv,
            } => {
                let gv = val(*gain).data();
                let d = gv.len();
                let mut gx = vec![0.0; xhat.len()];
                let mut ggain = vec![0.0; d];
                let mut gbias = vec![0.0; d];
                for (r, &iv) in inv.iter().enumerate() {
                    let gy = &g.data()[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for j in 0..d {
                        let dxh = gy[j] * gv[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[j];
                        ggain[j] += gy[j] * xh[j];
                        gbias[j] += gy[j];
                    }
                    mean_dxh /= d as f64;
                    mean_dxh_xh /= d as f64;
                    for j in 0..d {
                        let dxh = gy[j] * gv[j];
                        gx[r * d + j] = iv * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                }
                acc(*x, Tensor::from_parts(val(*x).shape().to_vec(), gx));
                acc(*gain, Tensor::from_parts(vec![d], ggain));
                acc(*bias, Tensor::from_parts(vec![d], gbias));
            }
            Op::Opa { q, k, v, act } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let (nq, d) = (qv.shape()[0], qv.shape()[1]);
                let (nkv, dv) = (kv.shape()[0], vv.shape()[1]);
                let mut gq = vec![0.0; nq * d];
                let mut gk = vec![0.0; nkv * d];
                let mut gvv = vec![0.0; nkv * dv];
                let mut dact = vec![0.0; nkv * d];
                for s in 0..nq {
                    let gs = &g.data()[s * d * dv..(s + 1) * d * dv];
                    let acts = &act[s * nkv * d..(s + 1) * nkv * d];
                    // dv += act[s] · g[s]  (n_kv×d · d×d_v)
                    gemm_nn(acts, gs, &mut gvv, nkv, d, dv);
                    // dact = v · g[s]ᵀ  (n_kv×d_v · d_v×d)
                    dact.iter_mut().for_each(|x| *x = 0.0);
                    gemm_nt(vv.data(), gs, &mut dact, nkv, dv, d);
                    for j in 0..nkv {
                        for r in 0..d {
                            let a = acts[j * d + r];
                            let du = dact[j * d + r] * (1.0 - a * a);
                            gq[s * d + r] += du * kv.data()[j * d + r];
                            gk[j * d + r] += du * qv.data()[s * d + r];
                        }
                    }
                }
                acc(*q, Tensor::from_parts(qv.shape().to_vec(), gq));
                acc(*k, Tensor::from_parts(kv.shape().to_vec(), gk));
                acc(*v, Tensor::from_parts(vv.shape().to_vec(), gvv));
            }
            Op::Stack(parts) => {
                let inner = g.numel() / parts.len();
                for (i, &p) in parts.iter().enumerate() {
                    acc(
                        p,
                        Tensor::from_parts(val(p).shape().to_vec(), g.data()[i * inner..(i + 1) * inner].to_vec()),
                    );
                }
            }
            Op::Index0(a, i) => {
                let av = val(*a);
                let inner = g.numel();
                let mut ga = vec![0.0; av.numel()];
                ga[i * inner..(i + 1) * inner].copy_from_slice(g.data());
                acc(*a, Tensor::from_parts(av.shape().to_vec(), ga));
            }
            Op::BceLogits {
                logits,
                targets,
                mask,
                count,
            } => {
                let z = val(*logits);
                let w = z.shape()[1];
                let scale = g.item() / count;
                let mut gz = vec![0.0; z.numel()];
                for (row, &m) in mask.iter().enumerate() {
                    if m == 0.0 {
                        continue;
                    }
                    for c in 0..w {
                        let i = row * w + c;
                        gz[i] = scale * (sigmoid(z.data()[i]) - targets.data()[i]);
                    }
                }
                acc(*logits, Tensor::from_parts(z.shape().to_vec(), gz));
            }
            Op::SoftmaxCe { logits, target, probs } => {
                let gv = g.item();
                let mut gz: Vec<f64> = probs.iter().map(|p| p * gv).collect();
                gz[*target] -= gv;
                acc(*logits, Tensor::from_parts(vec![probs.len()], gz));
            }
        }
    }
}

/// Gradient slot of `v`, zero-initialised on first use.
fn grad_buf<'a>(grads: &'a mut [Option<Tensor>], v: Var, like: &Tensor) -> &'a mut [f64] {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(like.shape())).data_mut()
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

/// Per-coordinate comparison of reverse-mode and finite-difference
/// gradients.
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// Worst `|a - n| / max(|a|, |n|, 1e-8)`.
    pub max_rel: f64,
    /// Worst `|a - n|`.
    pub max_abs: f64,
    /// `(parameter index, coordinate, analytic, numeric)` at `max_rel`.
    pub worst: (usize, usize, f64, f64),
    /// Largest analytic gradient magnitude seen.
    pub max_grad: f64,
    /// Relative error of every coordinate, in parameter order.
    pub rel: Vec<f64>,
    /// Analytic gradient of every coordinate, in parameter order.
    pub analytic: Vec<f64>,
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences `(f(p+eps) - f(p-eps)) / 2eps` on every coordinate of
/// every parameter and returns the worst relative error, using the
/// denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    Ok(grad_check_report(f, params, eps)?.max_rel)
}

/// [`grad_check`] with the full per-coordinate record.
pub fn grad_check_report<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.leaf(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[pi], p);
        for i in 0..p.numel() {
            let orig = p.data()[i];
            work[pi].data_mut()[i] = orig + eps;
            let fp = eval(&work)?;
            work[pi].data_mut()[i] = orig - eps;
            let fm = eval(&work)?;
            work[pi].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic.data()[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1e-8);
            if rel > report.max_rel {
                report.max_rel = rel;
                report.worst = (pi, i, a, numeric);
            }
            report.max_abs = report.max_abs.max(abs);
            report.max_grad = report.max_grad.max(a.abs());
            report.rel.push(rel);
            report.analytic.push(a);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[1.0, -2.0, 3.0]));
        let l = g.sum_all(x);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn outer_sum_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::vector(&[1.0, 2.0]));
        let b = g.leaf(Tensor::vector(&[3.0, -1.0, 0.5]));
        let o = g.outer(a, b).unwrap();
        let l = g.sum_all(o);
        let grads = g.backward(l).unwrap();
        // d/da_i Σ_ij a_i b_j = Σ_j b_j
        assert_eq!(grads.get(a).unwrap().data(), &[2.5, 2.5]);
        assert_eq!(grads.get(b).unwrap().data(), &[3.0, 3.0, 3.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[2.0]));
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let grads = g.backward(z).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[5.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Rank { .. })));
    }

    #[test]
    fn quadratic_grad_check() {
        let mut rng = Rng::new(0, 0);
        let p = rng.uniform_tensor(&[5], -1.0, 1.0);
        let err = grad_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                Ok(g.sum_all(sq))
            },
            &[p],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    /// Weighted sum with fixed random coefficients so every output element
    /// contributes a distinct gradient.
    fn probe(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
        let shape = g.shape(out).to_vec();
        let mut rng = Rng::new(seed, 99);
        let w = g.constant(rng.uniform_tensor(&shape, -1.0, 1.0));
        let m = g.mul(out, w)?;
        Ok(g.sum_all(m))
    }

    fn check(shapes: &[&[usize]], seed: u64, f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
        let mut rng = Rng::new(seed, 1);
        let params: Vec<Tensor> = shapes.iter().map(|s| rng.uniform_tensor(s, -1.0, 1.0)).collect();
        let err = grad_check(
            |g, v| {
                let out = f(g, v)?;
                probe(g, out, seed)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn every_op_matches_finite_differences() {
        for seed in 0..3 {
            check(&[&[3, 2], &[3, 2]], seed, |g, v| g.add(v[0], v[1]));
            check(&[&[3, 2], &[3, 2]], seed, |g, v| g.sub(v[0], v[1]));
            check(&[&[3, 2], &[3, 2]], seed, |g, v| g.mul(v[0], v[1]));
            check(&[&[4]], seed, |g, v| Ok(g.scale(v[0], -1.7)));
            check(&[&[2, 3], &[1]], seed, |g, v| g.scale_by(v[0], v[1]));
            check(&[&[5]], seed, |g, v| Ok(g.tanh(v[0])));
            check(&[&[5]], seed, |g, v| Ok(g.sigmoid(v[0])));
            check(&[&[3, 4], &[3]], seed, |g, v| g.broadcast_add(v[1], v[0]));
            check(&[&[2, 3, 2], &[2]], seed, |g, v| g.broadcast_add(v[0], v[1]));
            check(&[&[3, 3], &[1]], seed, |g, v| g.broadcast_add(v[0], v[1]));
            check(&[&[3], &[4]], seed, |g, v| g.outer(v[0], v[1]));
            check(&[&[3, 4], &[4, 2]], seed, |g, v| g.matmul(v[0], v[1]));
            check(&[&[3, 4], &[4]], seed, |g, v| g.matmul(v[0], v[1]));
            check(&[&[4], &[4, 2]], seed, |g, v| g.matmul(v[0], v[1]));
            check(&[&[3, 4], &[5, 4]], seed, |g, v| g.matmul_nt(v[0], v[1]));
            check(&[&[3, 4]], seed, |g, v| g.transpose(v[0]));
            check(&[&[2, 3, 2]], seed, |g, v| g.flatten(v[0], FlattenMode::FirstTwo));
            check(&[&[2, 3, 2]], seed, |g, v| g.reduce(v[0], ReduceOp::Sum, 1));
            check(&[&[3, 4]], seed, |g, v| g.reduce(v[0], ReduceOp::Max, 0));
            check(&[&[6]], seed, |g, v| g.softmax(v[0]));
            check(&[&[3, 5], &[5], &[5]], seed, |g, v| g.layer_norm(v[0], v[1], v[2]));
            check(&[&[2, 3], &[4, 3], &[4, 2]], seed, |g, v| g.opa_tanh(v[0], v[1], v[2]));
            check(&[&[3], &[3]], seed, |g, v| g.stack(&[v[0], v[1]]));
            check(&[&[3, 2]], seed, |g, v| g.index0(v[0], 1));
        }
    }

    #[test]
    fn loss_ops_match_finite_differences() {
        let mut rng = Rng::new(11, 0);
        let targets = Tensor::from_fn(&[3, 4], |_| if rng.bit() { 1.0 } else { 0.0 });
        let mask = [1.0, 0.0, 1.0];
        let z = Rng::new(12, 0).uniform_tensor(&[3, 4], -3.0, 3.0);
        let err = grad_check(|g, v| g.bce_with_logits(v[0], &targets, &mask), &[z], 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
        let z = Rng::new(13, 0).uniform_tensor(&[5], -3.0, 3.0);
        let err = grad_check(|g, v| g.softmax_ce(v[0], 2), &[z], 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn unused_leaf_has_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[1.0]));
        let y = g.leaf(Tensor::vector(&[1.0]));
        let l = g.sum_all(x);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(y).is_none());
        assert_eq!(grads.get_or_zeros(y, g.value(y)).data(), &[0.0]);
    }
}
