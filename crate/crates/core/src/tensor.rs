//! Dense row-major `f64` tensors and the deterministic random source used by
//! every generator and initializer in the crate.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Epsilon added to the variance inside layer normalization.
pub const LN_EPS: f64 = 1e-5;

/// Dense n-dimensional array of 64-bit floats.
///
/// A scalar is stored with shape `[1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Elementwise operations exposed through [`Tensor::ew`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EwOp {
    Add,
    Sub,
    Mul,
    Tanh,
    Sigmoid,
    Scale(f64),
    BroadcastAdd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Max,
}

/// Which pair of axes a flatten merges.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlattenMode {
    /// `(a, b, c) -> (a*b, c)`
    FirstTwo,
    /// `(a, b, c) -> (a, b*c)`
    LastTwo,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Invalid(format!("invalid tensor shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Invalid(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor whose shape is already known to be consistent.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![0.0; n])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn scalar(x: f64) -> Self {
        Tensor::from_parts(vec![1], vec![x])
    }

    pub fn vector(data: &[f64]) -> Self {
        Tensor::from_parts(vec![data.len()], data.to_vec())
    }

    /// Builds a matrix from equal-length rows.
    pub fn matrix(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Invalid("ragged matrix rows".into()));
        }
        Tensor::new(vec![r, c], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    fn offset(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.shape.len(), "index rank");
        let mut o = 0;
        for (i, (&x, &d)) in idx.iter().zip(&self.shape).enumerate() {
            assert!(x < d, "index {x} out of bounds for axis {i} of size {d}");
            o = o * d + x;
        }
        o
    }

    /// Sub-tensor at position `i` of the leading axis.
    pub fn index0(&self, i: usize) -> Tensor {
        assert!(self.rank() >= 2 && i < self.shape[0]);
        let inner: usize = self.shape[1..].iter().product();
        Tensor::from_parts(self.shape[1..].to_vec(), self.data[i * inner..(i + 1) * inner].to_vec())
    }

    /// Stacks equal-shape tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::Shape {
                    op: "stack",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor::from_parts(shape, data))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    fn zip_same(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    /// Elementwise dispatcher. Binary operations require `b`.
    pub fn ew(op: EwOp, a: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
        let need_b = |name: &str| b.ok_or_else(|| Error::Invalid(format!("{name} needs a second operand")));
        match op {
            EwOp::Add => a.add(need_b("add")?),
            EwOp::Sub => a.sub(need_b("sub")?),
            EwOp::Mul => a.mul(need_b("mul")?),
            EwOp::BroadcastAdd => a.broadcast_add(need_b("broadcast-add")?),
            EwOp::Tanh => Ok(a.tanh()),
            EwOp::Sigmoid => Ok(a.sigmoid()),
            EwOp::Scale(s) => Ok(a.scale(s)),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_same(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_same(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_same(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|x| x * s)
    }

    pub fn tanh(&self) -> Tensor {
        self.map(f64::tanh)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map(sigmoid)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Addition with the three supported broadcasts: equal shapes, a
    /// one-element operand, or a vector whose length matches the leading axis
    /// of the other operand (entry `i` is added to every element of slice `i`).
    /// Either operand may be the smaller one.
    pub fn broadcast_add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape == other.shape {
            return self.add(other);
        }
        let (big, small) = if self.numel() >= other.numel() {
            (self, other)
        } else {
            (other, self)
        };
        match broadcast_kind(big.shape(), small.shape()) {
            Some(Broadcast::Scalar) => {
                let s = small.data[0];
                Ok(big.map(|x| x + s))
            }
            Some(Broadcast::Leading) => {
                let inner = big.numel() / big.shape[0];
                let mut out = big.clone();
                for (i, chunk) in out.data.chunks_mut(inner).enumerate() {
                    let v = small.data[i];
                    chunk.iter_mut().for_each(|x| *x += v);
                }
                Ok(out)
            }
            None => Err(Error::Shape {
                op: "broadcast-add",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            }),
        }
    }

    pub fn outer(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.rank() != 1 || b.rank() != 1 {
            return Err(Error::Shape {
                op: "outer",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let (m, n) = (a.numel(), b.numel());
        let mut data = Vec::with_capacity(m * n);
        for &x in &a.data {
            data.extend(b.data.iter().map(|&y| x * y));
        }
        Ok(Tensor::from_parts(vec![m, n], data))
    }

    /// Matrix product. Rank-1 operands act as a row vector on the left and a
    /// column vector on the right; the squeezed axis is dropped again from the
    /// result (vector·vector yields a one-element tensor).
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k1, n, k2, out_shape) = matmul_dims(self.shape(), other.shape())?;
        if k1 != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(&self.data, &other.data, &mut out, m, k1, n);
        Ok(Tensor::from_parts(out_shape, out))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::Rank {
                op: "transpose",
                expected: "2",
                shape: self.shape.clone(),
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor::from_parts(vec![c, r], data))
    }

    /// Sum or max over one axis; the axis is dropped (a rank-1 input yields a
    /// one-element tensor).
    pub fn reduce(&self, op: ReduceOp, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::Axis {
                op: "reduce",
                axis,
                shape: self.shape.clone(),
            });
        }
        let (outer, len, inner) = axis_split(&self.shape, axis);
        let mut out = vec![
            match op {
                ReduceOp::Sum => 0.0,
                ReduceOp::Max => f64::NEG_INFINITY,
            };
            outer * inner
        ];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    let x = self.data[base + i];
                    let slot = &mut out[o * inner + i];
                    match op {
                        ReduceOp::Sum => *slot += x,
                        ReduceOp::Max => {
                            if x > *slot {
                                *slot = x
                            }
                        }
                    }
                }
            }
        }
        let mut shape: Vec<usize> = self.shape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(Tensor::from_parts(shape, out))
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Numerically stable softmax of a vector.
    pub fn softmax(&self) -> Result<Tensor> {
        if self.rank() != 1 {
            return Err(Error::Rank {
                op: "softmax",
                expected: "1",
                shape: self.shape.clone(),
            });
        }
        Ok(Tensor::from_parts(self.shape.clone(), softmax_slice(&self.data)))
    }

    /// Row-wise layer normalization over the last axis followed by a
    /// per-column gain and bias.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let d = *self.shape.last().unwrap();
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: self.shape.clone(),
                rhs: gain.shape.clone(),
            });
        }
        let mut out = Vec::with_capacity(self.numel());
        for row in self.data.chunks(d) {
            let (mean, inv) = row_stats(row);
            out.extend(
                row.iter()
                    .enumerate()
                    .map(|(j, &x)| (x - mean) * inv * gain.data[j] + bias.data[j]),
            );
        }
        Ok(Tensor::from_parts(self.shape.clone(), out))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn flatten(&self, mode: FlattenMode) -> Result<Tensor> {
        let shape = flatten_shape(self.shape(), mode)?;
        Ok(Tensor::from_parts(shape, self.data.clone()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub(crate) enum Broadcast {
    Scalar,
    Leading,
}

pub(crate) fn broadcast_kind(big: &[usize], small: &[usize]) -> Option<Broadcast> {
    if small.iter().product::<usize>() == 1 {
        Some(Broadcast::Scalar)
    } else if small.len() == 1 && big.len() >= 2 && small[0] == big[0] {
        Some(Broadcast::Leading)
    } else {
        None
    }
}

pub(crate) fn flatten_shape(shape: &[usize], mode: FlattenMode) -> Result<Vec<usize>> {
    match (mode, shape.len()) {
        (FlattenMode::FirstTwo, 3) => Ok(vec![shape[0] * shape[1], shape[2]]),
        (FlattenMode::LastTwo, r) if r >= 2 => {
            let mut s = shape[..r - 2].to_vec();
            s.push(shape[r - 2] * shape[r - 1]);
            Ok(s)
        }
        _ => Err(Error::Rank {
            op: "flatten",
            expected: match mode {
                FlattenMode::FirstTwo => "3",
                FlattenMode::LastTwo => ">= 2",
            },
            shape: shape.to_vec(),
        }),
    }
}

/// `(outer, len, inner)` sizes around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Returns `(m, k_left, n, k_right, out_shape)` for a matmul.
pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize, Vec<usize>)> {
    let bad = || Error::Shape {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    match (a.len(), b.len()) {
        (2, 2) => Ok((a[0], a[1], b[1], b[0], vec![a[0], b[1]])),
        (2, 1) => Ok((a[0], a[1], 1, b[0], vec![a[0]])),
        (1, 2) => Ok((1, a[0], b[1], b[0], vec![b[1]])),
        (1, 1) => Ok((1, a[0], 1, b[0], vec![1])),
        _ => Err(bad()),
    }
}

pub(crate) fn row_stats(row: &[f64]) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + LN_EPS).sqrt())
}

pub(crate) fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `c += a · b` with `a: m×k`, `b: k×n`.
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    if n == 1 {
        for i in 0..m {
            c[i] += dot(&a[i * k..(i + 1) * k], b);
        }
        return;
    }
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += a · bᵀ` with `a: m×k`, `b: n×k`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    if k == 1 {
        // rank-one update
        for (crow, &av) in c.chunks_exact_mut(n).zip(a) {
            for (cv, &bv) in crow.iter_mut().zip(b) {
                *cv += av * bv;
            }
        }
        return;
    }
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c += aᵀ · b` with `a: k×m`, `b: k×n`.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler vectorize without reassociating.
    let b = &b[..a.len()];
    let mut acc = [0.0f64; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ar.iter().zip(br) {
        s += x * y;
    }
    s
}

/// Seeded random source. The pair `(seed, stream)` fully determines the draw
/// sequence on every platform.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
    seed: u64,
    stream: u64,
}

impl Rng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { inner, seed, stream }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Uniform draw from `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.gen::<f64>()
    }

    /// Standard normal draw (Box-Muller).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.inner.gen::<f64>();
        let u2 = self.inner.gen::<f64>();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn bit(&mut self) -> bool {
        self.inner.gen::<bool>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.gen_range(lo..=hi)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }

    pub fn uniform_tensor(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        Tensor::from_fn(shape, |_| self.uniform(lo, hi))
    }

    /// Weight initialization: uniform in `±1/sqrt(fan_in)`.
    pub fn init_weight(&mut self, rows: usize, fan_in: usize) -> Tensor {
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.uniform_tensor(&[rows, fan_in], -bound, bound)
    }
}
