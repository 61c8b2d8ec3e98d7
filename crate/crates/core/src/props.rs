//! Executable property suites for the algebraic results behind SAM: the
//! summation swap, DPA as a contraction of OPA, the bilinear reading of a
//! linear readout, perfect retrieval from OPA, the Hebbian form of the
//! transfer step and two-step retrieval.
//!
//! Each suite draws seeded random instances and reports the worst error
//! against its tolerance.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::attention::{bilinear_expand, contract_p, dpa, opa, Contraction, DpaSpec, OpaSpec};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::linalg::{gram_schmidt, lstsq};
use crate::sam::{disjoint_patterns, retrieval_cues, sam_forward_raw, two_step_retrieval_demo};
use crate::stm::{stm_init, transfer, StmConfig};
use crate::tensor::{dot, Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum PropId {
    Lemma1,
    P1,
    P2,
    P3,
    P4,
    P5,
}

impl PropId {
    pub const ALL: [PropId; 6] = [
        PropId::Lemma1,
        PropId::P1,
        PropId::P2,
        PropId::P3,
        PropId::P4,
        PropId::P5,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            PropId::Lemma1 => "lemma1",
            PropId::P1 => "1",
            PropId::P2 => "2",
            PropId::P3 => "3",
            PropId::P4 => "4",
            PropId::P5 => "5",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            PropId::Lemma1 => "summation order swap",
            PropId::P1 => "DPA is a contraction of OPA",
            PropId::P2 => "linear readout of OPA is bilinear",
            PropId::P3 => "perfect retrieval from OPA",
            PropId::P4 => "transfer is a Hebbian update",
            PropId::P5 => "two-step contraction retrieval",
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            PropId::Lemma1 | PropId::P1 | PropId::P2 => 1e-12,
            PropId::P3 | PropId::P4 => 1e-10,
            PropId::P5 => 1e-6,
        }
    }
}

impl fmt::Display for PropId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for PropId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        PropId::ALL
            .into_iter()
            .find(|p| p.tag() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown property '{s}' (expected 1-5 or lemma1)")))
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub id: PropId,
    pub trials: usize,
    pub tolerance: f64,
    /// Worst error per trial.
    pub trial_errors: Vec<f64>,
    pub max_error: f64,
    /// Extra checks that belong to the suite, as `(description, passed)`.
    pub checks: Vec<(String, bool)>,
    pub passed: bool,
    pub seconds: f64,
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} prop {} ({}): {} trials, max error {:.3e} (tol {:.0e}), {:.3}s",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.id.title(),
            self.trials,
            self.max_error,
            self.tolerance,
            self.seconds
        )?;
        for (what, ok) in &self.checks {
            write!(f, "\n  {} {what}", if *ok { "ok  " } else { "FAIL" })?;
        }
        Ok(())
    }
}

pub fn run_suite(id: PropId, trials: usize, seed: u64) -> Result<SuiteReport> {
    if trials == 0 {
        return Err(Error::Invalid("trials must be positive".into()));
    }
    let start = Instant::now();
    let mut errors = Vec::with_capacity(trials);
    for t in 0..trials {
        let mut rng = Rng::new(seed, t as u64);
        errors.push(match id {
            PropId::Lemma1 => lemma1_trial(&mut rng),
            PropId::P1 => prop1_trial(&mut rng)?,
            PropId::P2 => prop2_trial(&mut rng)?,
            PropId::P3 => prop3_trial(&mut rng)?,
            PropId::P4 => prop4_trial(&mut rng)?,
            PropId::P5 => prop5_trial(&mut rng)?,
        });
    }
    let checks = match id {
        PropId::P3 => {
            let worst = prop3_counterexample_error(seed)?;
            let sweep = key_correlation_sweep()?;
            let monotone = sweep.windows(2).all(|w| w[1] > w[0]);
            vec![
                (
                    format!("a zero query entry breaks retrieval (error {worst:.3} > 0.1)"),
                    worst > 0.1,
                ),
                (
                    format!(
                        "retrieval error grows with key correlation: {}",
                        sweep.iter().map(|e| format!("{e:.2e}")).collect::<Vec<_>>().join(" < ")
                    ),
                    monotone && sweep[0] < 1e-12,
                ),
            ]
        }
        PropId::P5 => {
            let e = prop5_noisy_error(seed)?;
            vec![(
                format!("5% probe noise keeps retrieval within 0.1 (error {e:.3})"),
                e < 0.1,
            )]
        }
        _ => Vec::new(),
    };
    let max_error = errors.iter().copied().fold(0.0, f64::max);
    let tolerance = id.tolerance();
    let passed = errors.iter().all(|e| *e < tolerance) && checks.iter().all(|c| c.1);
    Ok(SuiteReport {
        id,
        trials,
        tolerance,
        trial_errors: errors,
        max_error,
        checks,
        passed,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn run_all(trials: usize, seed: u64) -> Result<Vec<SuiteReport>> {
    PropId::ALL.into_iter().map(|p| run_suite(p, trials, seed)).collect()
}

fn dims(rng: &mut Rng, hi: usize) -> usize {
    rng.range_inclusive(1, hi)
}

/// `Σ_i Σ_j q_j k_ij v_i` against `Σ_j Σ_i q_j k_ij v_i`.
fn lemma1_trial(rng: &mut Rng) -> f64 {
    let (ni, nj) = (dims(rng, 8), dims(rng, 8));
    let q: Vec<f64> = (0..nj).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let k: Vec<f64> = (0..ni * nj).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let v: Vec<f64> = (0..ni).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let mut a = 0.0;
    for i in 0..ni {
        for j in 0..nj {
            a += q[j] * k[i * nj + j] * v[i];
        }
    }
    let mut b = 0.0;
    for j in 0..nj {
        for i in 0..ni {
            b += q[j] * k[i * nj + j] * v[i];
        }
    }
    (a - b).abs()
}

/// Affine `S(x) = a·x + b` against affine `F` with `a_j = a`,
/// `b_j = b / d_qk`, contracted with `a_p = 1`.
fn prop1_trial(rng: &mut Rng) -> Result<f64> {
    let (dqk, dv, nkv) = (dims(rng, 8), dims(rng, 8), dims(rng, 8));
    let q = rng.uniform_tensor(&[dqk], -1.0, 1.0);
    let k = rng.uniform_tensor(&[nkv, dqk], -1.0, 1.0);
    let v = rng.uniform_tensor(&[nkv, dv], -1.0, 1.0);
    let (a, b) = (rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0));
    let want = dpa(&q, &k, &v, &DpaSpec::Affine { a, b })?;
    let f = OpaSpec::Affine {
        a: vec![a; dqk],
        b: vec![b / dqk as f64; dqk],
    };
    let got = contract_p(&opa(&q, &k, &v, &f)?, &Contraction::ones(dqk))?;
    Ok(got.max_abs_diff(&want))
}

/// Bilinear double sum against `Wg_flat · vec(A⊗)` for a single key.
fn prop2_trial(rng: &mut Rng) -> Result<f64> {
    let (n, dqk, dv) = (dims(rng, 8), dims(rng, 8), dims(rng, 8));
    let wg = rng.uniform_tensor(&[n, dqk, dv], -1.0, 1.0);
    let q = rng.uniform_tensor(&[dqk], -1.0, 1.0);
    let k = rng.uniform_tensor(&[1, dqk], -1.0, 1.0);
    let v = rng.uniform_tensor(&[1, dv], -1.0, 1.0);
    let a = opa(&q, &k, &v, &OpaSpec::Tanh)?;
    let flat = wg.reshape(&[n, dqk * dv])?.matmul(&a.reshape(&[dqk * dv])?)?;
    let f = Tensor::vector(&OpaSpec::Tanh.apply(q.mul(&k.index0(0))?.data()));
    let bil = bilinear_expand(&wg, &f, &v.index0(0))?;
    Ok(bil.max_abs_diff(&flat))
}

/// Orthonormalized keys, nonzero query entries and `F(x) = a ⊙ x` with
/// nonzero `a`: contracting with the dual cue of `x_j = F(q ⊙ k_j)`
/// returns `v_j`.
fn prop3_trial(rng: &mut Rng) -> Result<f64> {
    let d = rng.range_inclusive(2, 16);
    let nkv = dims(rng, d);
    let dv = dims(rng, 16);
    let keys = gram_schmidt(&rng.uniform_tensor(&[nkv, d], -1.0, 1.0))?;
    let q = Tensor::from_fn(&[d], |_| nonzero(rng));
    let af: Vec<f64> = (0..d).map(|_| nonzero(rng)).collect();
    let v = rng.uniform_tensor(&[nkv, dv], -1.0, 1.0);
    let spec = OpaSpec::Scaled { a: af.clone() };
    let mem = opa(&q, &keys, &v, &spec)?;
    let xs = Tensor::from_fn(&[nkv, d], |i| af[i % d] * q.data()[i % d] * keys.data()[i]);
    let cues = retrieval_cues(&xs)?;
    let mut worst: f64 = 0.0;
    for j in 0..nkv {
        let got = contract_p(
            &mem,
            &Contraction {
                a_p: cues.index0(j).into_data(),
            },
        )?;
        worst = worst.max(got.max_abs_diff(&v.index0(j)));
    }
    Ok(worst)
}

fn nonzero(rng: &mut Rng) -> f64 {
    let m = rng.uniform(0.5, 1.5);
    if rng.bit() {
        m
    } else {
        -m
    }
}

/// `d` keys in `d` dimensions with one zero query entry: every `x_i` loses
/// that coordinate, so no cue can separate all values. Returns the worst
/// least-squares retrieval error over the stored values.
pub fn prop3_counterexample_error(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed, 1 << 40);
    let d = 4;
    let keys = gram_schmidt(&rng.uniform_tensor(&[d, d], -1.0, 1.0))?;
    let mut q = Tensor::from_fn(&[d], |_| nonzero(&mut rng));
    q.set(&[0], 0.0);
    let v = rng.uniform_tensor(&[d, d], -1.0, 1.0);
    let spec = OpaSpec::Scaled { a: vec![1.0; d] };
    let mem = opa(&q, &keys, &v, &spec)?;
    let xs = Tensor::from_fn(&[d, d], |i| q.data()[i % d] * keys.data()[i]);
    let mut worst: f64 = 0.0;
    for j in 0..d {
        let e: Vec<f64> = (0..d).map(|i| if i == j { 1.0 } else { 0.0 }).collect();
        let (cue, _) = lstsq(&xs, &e)?;
        let got = contract_p(&mem, &Contraction { a_p: cue })?;
        worst = worst.max(got.sub(&v.index0(j))?.norm());
    }
    Ok(worst)
}

/// Correlation readout `x_jᵀ · Σ x_i ⊗ v_i` with unit keys sliding from an
/// orthonormal set towards a shared direction; returns the mean retrieval
/// error at five interpolation points.
pub fn key_correlation_sweep() -> Result<Vec<f64>> {
    let d = 8;
    let n = 4;
    let mut rng = Rng::new(0xc0, 0);
    let v = rng.uniform_tensor(&[n, d], -1.0, 1.0);
    let shared = Tensor::full(&[d], 1.0 / (d as f64).sqrt());
    let q = Tensor::ones(&[d]);
    let mut out = Vec::new();
    for step in 0..5 {
        let t = step as f64 * 0.2;
        let rows: Vec<Tensor> = (0..n)
            .map(|i| {
                let mut e = Tensor::zeros(&[d]);
                e.set(&[i], 1.0);
                let k = e.scale(1.0 - t).add(&shared.scale(t))?;
                let norm = k.norm();
                Ok(k.scale(1.0 / norm))
            })
            .collect::<Result<_>>()?;
        let keys = Tensor::stack(&rows)?;
        let mem = opa(&q, &keys, &v, &OpaSpec::Scaled { a: vec![1.0; d] })?;
        let mut err = 0.0;
        for j in 0..n {
            let got = contract_p(
                &mem,
                &Contraction {
                    a_p: keys.index0(j).into_data(),
                },
            )?;
            err += got.sub(&v.index0(j))?.norm();
        }
        out.push(err / n as f64);
    }
    Ok(out)
}

/// Single-key SAM, `G1[i] = d_i · vec(I)`: the transfer increment must be
/// `α3 · d ⊗ v_1` with `d[i] = d_i Σ_s F(M_q[s,s] k_1[s])`.
fn prop4_trial(rng: &mut Rng) -> Result<f64> {
    let d = rng.range_inclusive(2, 8);
    let n_q = rng.range_inclusive(1, d);
    let m = rng.uniform_tensor(&[d, d], -1.0, 1.0);
    let w_q = rng.uniform_tensor(&[n_q, d], -1.0, 1.0);
    let w_k = rng.uniform_tensor(&[1, d], -1.0, 1.0);
    let w_v = rng.uniform_tensor(&[1, d], -1.0, 1.0);
    let mr = sam_forward_raw(&m, &w_q, &w_k, &w_v, &OpaSpec::Tanh)?;
    let coef: Vec<f64> = (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let alpha3 = rng.uniform(0.1, 2.0);

    let cfg = StmConfig {
        d,
        n_q,
        n_r: 1,
        ..StmConfig::new(1, 1)
    };
    let (mut p, _) = stm_init(&cfg, rng)?;
    // G1[i, s·d + j] = d_i δ_sj
    p.g1 = Tensor::from_fn(&[d, n_q * d], |idx| {
        let (i, col) = (idx / (n_q * d), idx % (n_q * d));
        if col / d == col % d {
            coef[i]
        } else {
            0.0
        }
    });
    p.alpha3 = Tensor::scalar(alpha3);
    let mut g = Graph::new();
    let vars = p.bind(&mut g);
    let mi = g.constant(Tensor::zeros(&[d, d]));
    let mr_node = g.constant(mr);
    let out = transfer(&mut g, &vars, mi, mr_node)?;
    let increment = g.value(out).clone();

    let mq = w_q.matmul(&m)?;
    let k1 = w_k.matmul(&m)?.into_data();
    let v1 = w_v.matmul(&m)?.reshape(&[d])?;
    let s: f64 = (0..n_q).map(|s| (mq.get(&[s, s]) * k1[s]).tanh()).sum();
    let dvec = Tensor::vector(&coef.iter().map(|c| alpha3 * c * s).collect::<Vec<_>>());
    Ok(increment.max_abs_diff(&Tensor::outer(&dvec, &v1)?))
}

/// `d = 16`, three orthonormal nonnegative patterns, exact probe.
fn prop5_trial(rng: &mut Rng) -> Result<f64> {
    let pats = disjoint_patterns(16, 3, rng);
    let j = rng.below(3);
    let n_q = rng.range_inclusive(1, 4);
    let n_kv = rng.range_inclusive(1, 4);
    Ok(two_step_retrieval_demo(&pats, &pats[j], n_q, n_kv)?.error)
}

/// Two-step retrieval from a probe with 5% relative noise.
pub fn prop5_noisy_error(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed, 1 << 41);
    let pats = disjoint_patterns(16, 3, &mut rng);
    let noise = rng.uniform_tensor(&[16], -1.0, 1.0);
    let noise = noise.scale(0.05 / noise.norm());
    let probe = pats[1].add(&noise)?;
    let r = two_step_retrieval_demo(&pats, &probe, 2, 2)?;
    Ok(r.error)
}

/// Largest `|x · y|` among distinct pairs of rows, for diagnostics.
pub fn max_cross_correlation(rows: &Tensor) -> f64 {
    let n = rows.shape()[0];
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..i {
            worst = worst.max(dot(rows.index0(i).data(), rows.index0(j).data()).abs());
        }
    }
    worst
}
