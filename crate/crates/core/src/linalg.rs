//! Small dense linear-algebra helpers: Gram–Schmidt, least squares and a
//! power-iteration spectral norm.

use crate::error::{Error, Result};
use crate::tensor::{dot, Rng, Tensor};

/// Residual norm below which a row is treated as linearly dependent.
pub const DEPENDENCE_TOL: f64 = 1e-10;

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

fn require_matrix(op: &'static str, a: &Tensor) -> Result<(usize, usize)> {
    if a.rank() != 2 {
        return Err(Error::Rank {
            op,
            expected: "2",
            shape: a.shape().to_vec(),
        });
    }
    Ok((a.shape()[0], a.shape()[1]))
}

/// Orthonormalizes the rows of `keys` (modified Gram–Schmidt with one
/// re-orthogonalization pass). The output rows span the same space.
pub fn gram_schmidt(keys: &Tensor) -> Result<Tensor> {
    let (r, c) = require_matrix("gram_schmidt", keys)?;
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(r);
    for i in 0..r {
        let mut v = keys.data()[i * c..(i + 1) * c].to_vec();
        for _ in 0..2 {
            for b in &basis {
                let p = dot(b, &v);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = norm(&v);
        if n < DEPENDENCE_TOL {
            return Err(Error::Dependent { index: i, residual: n });
        }
        v.iter_mut().for_each(|x| *x /= n);
        basis.push(v);
    }
    Tensor::new(vec![r, c], basis.concat())
}

/// Least-squares solution of `a·x ≈ b`.
///
/// Columns that are (numerically) dependent on earlier ones are dropped and
/// their coefficients set to zero, so rank-deficient and underdetermined
/// systems still get an exact fit whenever one exists. Returns the solution
/// and the residual norm `‖a·x - b‖`.
pub fn lstsq(a: &Tensor, b: &[f64]) -> Result<(Vec<f64>, f64)> {
    let (m, n) = require_matrix("lstsq", a)?;
    if b.len() != m {
        return Err(Error::Shape {
            op: "lstsq",
            lhs: a.shape().to_vec(),
            rhs: vec![b.len()],
        });
    }
    let col = |j: usize| -> Vec<f64> { (0..m).map(|i| a.data()[i * n + j]).collect() };
    // Q columns, R rows (over all n columns), and which columns were kept.
    let mut q: Vec<Vec<f64>> = Vec::new();
    let mut r: Vec<Vec<f64>> = Vec::new();
    let mut kept: Vec<usize> = Vec::new();
    for j in 0..n {
        let orig = col(j);
        let scale = norm(&orig).max(1.0);
        let mut v = orig;
        let mut coeffs = vec![0.0; q.len()];
        for _ in 0..2 {
            for (k, qk) in q.iter().enumerate() {
                let p = dot(qk, &v);
                coeffs[k] += p;
                v.iter_mut().zip(qk).for_each(|(x, y)| *x -= p * y);
            }
        }
        let nv = norm(&v);
        if nv <= DEPENDENCE_TOL * scale || q.len() == m {
            continue;
        }
        for (k, c) in coeffs.iter().enumerate() {
            r[k][j] = *c;
        }
        v.iter_mut().for_each(|x| *x /= nv);
        let mut row = vec![0.0; n];
        row[j] = nv;
        r.push(row);
        q.push(v);
        kept.push(j);
    }
    // Back substitution on the kept columns: R_kept x_kept = Qᵀ b.
    let qtb: Vec<f64> = q.iter().map(|qk| dot(qk, b)).collect();
    let mut x = vec![0.0; n];
    for k in (0..kept.len()).rev() {
        let mut s = qtb[k];
        for &j2 in kept.iter().skip(k + 1) {
            s -= r[k][j2] * x[j2];
        }
        x[kept[k]] = s / r[k][kept[k]];
    }
    let fit = a.matmul(&Tensor::vector(&x))?;
    let res = fit
        .data()
        .iter()
        .zip(b)
        .map(|(f, b)| (f - b) * (f - b))
        .sum::<f64>()
        .sqrt();
    Ok((x, res))
}

/// Largest singular value by power iteration on `WᵀW`, stopping when the
/// Rayleigh quotient changes by less than `rel_tol` relative.
pub fn spectral_norm(w: &Tensor, rel_tol: f64, max_iter: usize) -> Result<f64> {
    let (_, c) = require_matrix("spectral_norm", w)?;
    let wt = w.transpose()?;
    let mut rng = Rng::new(0x5eed, 0);
    let mut v = Tensor::from_fn(&[c], |_| rng.uniform(0.5, 1.5));
    let n = v.norm();
    v = v.scale(1.0 / n);
    let mut prev = 0.0;
    for _ in 0..max_iter {
        let u = w.matmul(&v)?;
        let z = wt.matmul(&u)?;
        let lambda = dot(v.data(), z.data());
        let zn = z.norm();
        if zn == 0.0 {
            return Ok(0.0);
        }
        v = z.scale(1.0 / zn);
        if (lambda - prev).abs() <= rel_tol * lambda.abs() {
            return Ok(lambda.max(0.0).sqrt());
        }
        prev = lambda;
    }
    Ok(prev.max(0.0).sqrt())
}
