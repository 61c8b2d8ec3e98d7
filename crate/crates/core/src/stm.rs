//! The two-memory recurrent cell: gated item write, two-step relational
//! read, SAM relational write, transfer back into the item memory, and
//! output distillation.
//!
//! Every component is expressed on a [`Graph`] so that a whole episode can be
//! differentiated; [`StmCell`] wraps the same code for plain evaluation.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::param_struct;
use crate::sam::{LnParams, SamParams};
use crate::tensor::{Rng, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct StmConfig {
    pub d: usize,
    pub n_q: usize,
    pub n_r: usize,
    pub n_o: usize,
    pub in_dim: usize,
    pub alphas_learnable: bool,
    /// Replace both gates by the constant 1 (`Mi ← Mi + X`).
    pub clamp_gates: bool,
}

impl StmConfig {
    pub const DEFAULT_D: usize = 96;
    pub const DEFAULT_N_Q: usize = 8;
    pub const DEFAULT_N_R: usize = 96;

    pub fn new(in_dim: usize, n_o: usize) -> Self {
        StmConfig {
            d: Self::DEFAULT_D,
            n_q: Self::DEFAULT_N_Q,
            n_r: Self::DEFAULT_N_R,
            n_o,
            in_dim,
            alphas_learnable: true,
            clamp_gates: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d", self.d),
            ("n_q", self.n_q),
            ("n_r", self.n_r),
            ("n_o", self.n_o),
            ("in_dim", self.in_dim),
        ] {
            if v == 0 {
                return Err(Error::Invalid(format!("STM {name} must be positive")));
            }
        }
        Ok(())
    }
}

param_struct! {
    /// All learned weights of one STM cell. `n_kv = n_q` and the SAM input
    /// width equals `d`.
    StmParams, StmVars {
        enc_w, enc_b,
        f1_w, f1_b,
        f2_w, f2_b,
        f3_w, f3_b,
        w_f, u_f, b_f,
        w_i, u_i, b_i,
        sam_wq, sam_wk, sam_wv,
        ln_q_gain, ln_q_bias,
        ln_k_gain, ln_k_bias,
        ln_v_gain, ln_v_bias,
        alpha1, alpha2, alpha3,
        g1,
        g2, b2,
        g3, b3,
    }
}

impl StmParams {
    /// The SAM sub-operator as a standalone parameter set.
    pub fn sam(&self) -> SamParams {
        SamParams {
            w_q: self.sam_wq.clone(),
            w_k: self.sam_wk.clone(),
            w_v: self.sam_wv.clone(),
            ln_q: LnParams {
                gain: self.ln_q_gain.clone(),
                bias: self.ln_q_bias.clone(),
            },
            ln_k: LnParams {
                gain: self.ln_k_gain.clone(),
                bias: self.ln_k_bias.clone(),
            },
            ln_v: LnParams {
                gain: self.ln_v_gain.clone(),
                bias: self.ln_v_bias.clone(),
            },
        }
    }

    pub fn is_alpha(name: &str) -> bool {
        matches!(name, "alpha1" | "alpha2" | "alpha3")
    }
}

/// Item memory `d×d` and relational memory `n_q×d×d`.
#[derive(Clone, Debug, PartialEq)]
pub struct StmState {
    pub mi: Tensor,
    pub mr: Tensor,
}

impl StmState {
    pub fn zeros(cfg: &StmConfig) -> Self {
        StmState {
            mi: Tensor::zeros(&[cfg.d, cfg.d]),
            mr: Tensor::zeros(&[cfg.n_q, cfg.d, cfg.d]),
        }
    }
}

pub fn stm_init(cfg: &StmConfig, rng: &mut Rng) -> Result<(StmParams, StmState)> {
    cfg.validate()?;
    let (d, n_q, n_r, n_o) = (cfg.d, cfg.n_q, cfg.n_r, cfg.n_o);
    let sam = SamParams::init(n_q, n_q, d, d, rng);
    let p = StmParams {
        enc_w: rng.init_weight(d, cfg.in_dim),
        enc_b: Tensor::zeros(&[d]),
        f1_w: rng.init_weight(d, d),
        f1_b: Tensor::zeros(&[d]),
        f2_w: rng.init_weight(d, d),
        f2_b: Tensor::zeros(&[d]),
        f3_w: rng.init_weight(n_q, d),
        f3_b: Tensor::zeros(&[n_q]),
        w_f: rng.init_weight(d, d),
        u_f: rng.init_weight(d, d),
        b_f: Tensor::scalar(0.0),
        w_i: rng.init_weight(d, d),
        u_i: rng.init_weight(d, d),
        b_i: Tensor::scalar(0.0),
        sam_wq: sam.w_q,
        sam_wk: sam.w_k,
        sam_wv: sam.w_v,
        ln_q_gain: sam.ln_q.gain,
        ln_q_bias: sam.ln_q.bias,
        ln_k_gain: sam.ln_k.gain,
        ln_k_bias: sam.ln_k.bias,
        ln_v_gain: sam.ln_v.gain,
        ln_v_bias: sam.ln_v.bias,
        alpha1: Tensor::scalar(1.0),
        alpha2: Tensor::scalar(1.0),
        alpha3: Tensor::scalar(1.0),
        g1: rng.init_weight(d, n_q * d),
        g2: rng.init_weight(n_r, d * d),
        b2: Tensor::zeros(&[n_r]),
        g3: rng.init_weight(n_o, n_q * n_r),
        b3: Tensor::zeros(&[n_o]),
    };
    Ok((p, StmState::zeros(cfg)))
}

/// The encoded input and the three feed-forward maps of one step.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub x: Var,
    pub f1: Var,
    pub f2: Var,
    pub f3: Var,
}

fn affine(g: &mut Graph, w: Var, b: Var, x: Var) -> Result<Var> {
    let y = g.matmul(w, x)?;
    g.add(y, b)
}

/// `x = E·x_raw + b_E`, `f1 = tanh(W1 x + b1)`, `f2 = tanh(W2 x + b2)`,
/// `f3 = W3 x + b3`.
pub fn encode(g: &mut Graph, p: &StmVars, x_raw: Var) -> Result<Encoded> {
    let x = affine(g, p.enc_w, p.enc_b, x_raw)?;
    let a1 = affine(g, p.f1_w, p.f1_b, x)?;
    let f1 = g.tanh(a1);
    let a2 = affine(g, p.f2_w, p.f2_b, x)?;
    let f2 = g.tanh(a2);
    let f3 = affine(g, p.f3_w, p.f3_b, x)?;
    Ok(Encoded { x, f1, f2, f3 })
}

/// `sigmoid(W·x ⊕ U·tanh(Mi) + b)` with `W·x` added to row `i` entry-wise.
fn gate(g: &mut Graph, w: Var, u: Var, b: Var, x: Var, tanh_mi: Var) -> Result<Var> {
    let wx = g.matmul(w, x)?;
    let um = g.matmul(u, tanh_mi)?;
    let pre = g.broadcast_add(um, wx)?;
    let pre = g.broadcast_add(pre, b)?;
    Ok(g.sigmoid(pre))
}

/// `Mi ← F ⊙ Mi + I ⊙ (f1 ⊗ f2)`.
pub fn item_write(g: &mut Graph, cfg: &StmConfig, p: &StmVars, mi: Var, enc: &Encoded) -> Result<Var> {
    let x = g.outer(enc.f1, enc.f2)?;
    if cfg.clamp_gates {
        return g.add(mi, x);
    }
    let tanh_mi = g.tanh(mi);
    let f = gate(g, p.w_f, p.u_f, p.b_f, enc.x, tanh_mi)?;
    let i = gate(g, p.w_i, p.u_i, p.b_i, enc.x, tanh_mi)?;
    let kept = g.mul(f, mi)?;
    let written = g.mul(i, x)?;
    g.add(kept, written)
}

/// `v_r = softmax(f3)ᵀ · Mr · f2`.
pub fn relational_read(g: &mut Graph, mr: Var, enc: &Encoded) -> Result<Var> {
    let (n_q, d) = {
        let s = g.shape(mr);
        (s[0], s[1])
    };
    let w = g.softmax(enc.f3)?;
    let flat = g.reshape(mr, &[n_q, d * d])?;
    let collapsed = g.matmul(w, flat)?;
    let collapsed = g.reshape(collapsed, &[d, d])?;
    g.matmul(collapsed, enc.f2)
}

/// SAM over a `d×d` memory node with layer-normalized projections.
pub fn sam_graph(g: &mut Graph, p: &StmVars, m: Var) -> Result<Var> {
    let q = g.matmul(p.sam_wq, m)?;
    let q = g.layer_norm(q, p.ln_q_gain, p.ln_q_bias)?;
    let k = g.matmul(p.sam_wk, m)?;
    let k = g.layer_norm(k, p.ln_k_gain, p.ln_k_bias)?;
    let v = g.matmul(p.sam_wv, m)?;
    let v = g.layer_norm(v, p.ln_v_gain, p.ln_v_bias)?;
    g.opa_tanh(q, k, v)
}

/// `Mr ← Mr + α1 · SAM(Mi + α2 · v_r ⊗ f2)`.
pub fn relational_write(g: &mut Graph, p: &StmVars, mi: Var, mr: Var, enc: &Encoded, v_r: Var) -> Result<Var> {
    let refresh = g.outer(v_r, enc.f2)?;
    let refresh = g.scale_by(refresh, p.alpha2)?;
    let input = g.add(mi, refresh)?;
    let s = sam_graph(g, p, input)?;
    let s = g.scale_by(s, p.alpha1)?;
    g.add(mr, s)
}

/// `Mi ← Mi + α3 · G1 · V_f(Mr)`.
pub fn transfer(g: &mut Graph, p: &StmVars, mi: Var, mr: Var) -> Result<Var> {
    let (n_q, d) = {
        let s = g.shape(mr);
        (s[0], s[1])
    };
    let flat = g.reshape(mr, &[n_q * d, d])?;
    let t = g.matmul(p.g1, flat)?;
    let t = g.scale_by(t, p.alpha3)?;
    g.add(mi, t)
}

/// `o = G3 · V_l(G2 · V_l(Mr)ᵀ ...)`: every slice of `Mr` is flattened and
/// mapped to `n_r` features by the shared affine `G2`, the `n_q×n_r` result
/// is flattened and mapped to `n_o` by `G3`.
pub fn distill_output(g: &mut Graph, p: &StmVars, mr: Var) -> Result<Var> {
    let (n_q, d) = {
        let s = g.shape(mr);
        (s[0], s[1])
    };
    let flat = g.reshape(mr, &[n_q, d * d])?;
    // n_r×n_q so that the bias broadcasts along the leading axis
    let h = g.matmul_nt(p.g2, flat)?;
    let h = g.broadcast_add(h, p.b2)?;
    let h = g.transpose(h)?;
    let n_r = g.shape(h)[1];
    let h = g.reshape(h, &[n_q * n_r])?;
    affine(g, p.g3, p.b3, h)
}

/// Memory nodes carried between steps on a graph.
#[derive(Clone, Copy, Debug)]
pub struct GraphState {
    pub mi: Var,
    pub mr: Var,
}

impl GraphState {
    pub fn constant(g: &mut Graph, s: &StmState) -> Self {
        GraphState {
            mi: g.constant(s.mi.clone()),
            mr: g.constant(s.mr.clone()),
        }
    }
}

/// One timestep: encode, item write, relational read, relational write,
/// transfer, distill. Returns the output logits and the next state.
pub fn stm_step(
    g: &mut Graph,
    cfg: &StmConfig,
    p: &StmVars,
    state: GraphState,
    x_raw: Var,
) -> Result<(Var, GraphState)> {
    let enc = encode(g, p, x_raw)?;
    let mi = item_write(g, cfg, p, state.mi, &enc)?;
    let v_r = relational_read(g, state.mr, &enc)?;
    let mr = relational_write(g, p, mi, state.mr, &enc, v_r)?;
    let mi = transfer(g, p, mi, mr)?;
    let o = distill_output(g, p, mr)?;
    Ok((o, GraphState { mi, mr }))
}

/// Runs the cell over the rows of `inputs` (`T×in_dim`) from a zero state
/// and returns the stacked `T×n_o` outputs.
pub fn stm_sequence(g: &mut Graph, cfg: &StmConfig, p: &StmVars, inputs: &Tensor) -> Result<Var> {
    if inputs.rank() != 2 || inputs.shape()[1] != cfg.in_dim {
        return Err(Error::Shape {
            op: "stm_sequence",
            lhs: inputs.shape().to_vec(),
            rhs: vec![cfg.in_dim],
        });
    }
    let mut state = GraphState::constant(g, &StmState::zeros(cfg));
    let mut outs = Vec::with_capacity(inputs.shape()[0]);
    for t in 0..inputs.shape()[0] {
        let x = g.constant(inputs.index0(t));
        let (o, next) = stm_step(g, cfg, p, state, x)?;
        outs.push(o);
        state = next;
    }
    g.stack(&outs)
}

/// Evaluation-only wrapper around the graph components.
pub struct StmCell<'a> {
    pub cfg: &'a StmConfig,
    pub params: &'a StmParams,
}

impl StmCell<'_> {
    /// One step on concrete tensors.
    pub fn step(&self, state: &StmState, x_raw: &Tensor) -> Result<(Tensor, StmState)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let s = GraphState::constant(&mut g, state);
        let x = g.constant(x_raw.clone());
        let (o, next) = stm_step(&mut g, self.cfg, &p, s, x)?;
        Ok((
            g.value(o).clone(),
            StmState {
                mi: g.value(next.mi).clone(),
                mr: g.value(next.mr).clone(),
            },
        ))
    }

    /// Outputs for every row of `inputs`, starting from a zero state.
    pub fn run(&self, inputs: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let out = stm_sequence(&mut g, self.cfg, &p, inputs)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::grad_check_report;
    use crate::params::ParamSet;
    use crate::sam::sam_forward;
    use crate::tensor::sigmoid;

    fn small_cfg() -> StmConfig {
        StmConfig {
            d: 6,
            n_q: 2,
            n_r: 5,
            n_o: 3,
            in_dim: 4,
            alphas_learnable: true,
            clamp_gates: false,
        }
    }

    fn randomized(cfg: &StmConfig, seed: u64) -> StmParams {
        let mut rng = Rng::new(seed, 0);
        let (mut p, _) = stm_init(cfg, &mut rng).unwrap();
        for (_, t) in p.named_mut() {
            let shape = t.shape().to_vec();
            *t = rng.uniform_tensor(&shape, -0.5, 0.5);
        }
        p
    }

    fn random_state(cfg: &StmConfig, rng: &mut Rng) -> StmState {
        StmState {
            mi: rng.uniform_tensor(&[cfg.d, cfg.d], -0.5, 0.5),
            mr: rng.uniform_tensor(&[cfg.n_q, cfg.d, cfg.d], -0.5, 0.5),
        }
    }

    fn mv(w: &Tensor, b: &Tensor, x: &[f64]) -> Vec<f64> {
        let (r, c) = (w.shape()[0], w.shape()[1]);
        (0..r)
            .map(|i| (0..c).map(|j| w.get(&[i, j]) * x[j]).sum::<f64>() + b.data()[i])
            .collect()
    }

    struct Loops {
        x: Vec<f64>,
        f1: Vec<f64>,
        f2: Vec<f64>,
        f3: Vec<f64>,
    }

    fn loop_encode(p: &StmParams, x_raw: &[f64]) -> Loops {
        let x = mv(&p.enc_w, &p.enc_b, x_raw);
        let f1 = mv(&p.f1_w, &p.f1_b, &x).iter().map(|v| v.tanh()).collect();
        let f2 = mv(&p.f2_w, &p.f2_b, &x).iter().map(|v| v.tanh()).collect();
        let f3 = mv(&p.f3_w, &p.f3_b, &x);
        Loops { x, f1, f2, f3 }
    }

    fn loop_item_write(p: &StmParams, mi: &Tensor, e: &Loops) -> Tensor {
        let d = mi.shape()[0];
        let mut out = Tensor::zeros(&[d, d]);
        for r in 0..d {
            for c in 0..d {
                let mut uf = 0.0;
                let mut ui = 0.0;
                for k in 0..d {
                    uf += p.u_f.get(&[r, k]) * mi.get(&[k, c]).tanh();
                    ui += p.u_i.get(&[r, k]) * mi.get(&[k, c]).tanh();
                }
                let wf: f64 = (0..d).map(|k| p.w_f.get(&[r, k]) * e.x[k]).sum();
                let wi: f64 = (0..d).map(|k| p.w_i.get(&[r, k]) * e.x[k]).sum();
                let f = sigmoid(wf + uf + p.b_f.item());
                let i = sigmoid(wi + ui + p.b_i.item());
                out.set(&[r, c], f * mi.get(&[r, c]) + i * e.f1[r] * e.f2[c]);
            }
        }
        out
    }

    fn eval<T>(f: impl FnOnce(&mut Graph, &StmVars) -> Result<T>, p: &StmParams) -> (Graph, T) {
        let mut g = Graph::new();
        let v = p.bind(&mut g);
        let out = f(&mut g, &v).unwrap();
        (g, out)
    }

    #[test]
    fn init_shapes_and_determinism() {
        let cfg = StmConfig::new(10, 33);
        let (p, s) = stm_init(&cfg, &mut Rng::new(3, 0)).unwrap();
        assert_eq!(s.mi.shape(), &[96, 96]);
        assert_eq!(s.mr.shape(), &[8, 96, 96]);
        assert_eq!(p.g1.shape(), &[96, 768]);
        assert_eq!(p.g2.shape(), &[96, 9216]);
        assert_eq!(p.g3.shape(), &[33, 768]);
        let (p2, _) = stm_init(&cfg, &mut Rng::new(3, 0)).unwrap();
        assert_eq!(p, p2);
        assert_eq!(p.alpha1.item(), 1.0);
        assert_eq!(p.b_f.item(), 0.0);
    }

    #[test]
    fn item_write_clamped_gates_is_hebbian() {
        let mut cfg = small_cfg();
        cfg.clamp_gates = true;
        let p = randomized(&cfg, 1);
        let mut rng = Rng::new(2, 0);
        let mi0 = rng.uniform_tensor(&[6, 6], -1.0, 1.0);
        let xr = rng.uniform_tensor(&[4], -1.0, 1.0);
        let (g, out) = eval(
            |g, v| {
                let x = g.constant(xr.clone());
                let e = encode(g, v, x)?;
                let m = g.constant(mi0.clone());
                Ok((item_write(g, &cfg, v, m, &e)?, e))
            },
            &p,
        );
        let l = loop_encode(&p, xr.data());
        let want = mi0
            .add(&Tensor::outer(&Tensor::vector(&l.f1), &Tensor::vector(&l.f2)).unwrap())
            .unwrap();
        assert!(g.value(out.0).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn item_write_zero_input_keeps_zero_memory() {
        let cfg = small_cfg();
        let mut rng = Rng::new(4, 0);
        let (p, s) = stm_init(&cfg, &mut rng).unwrap();
        let (g, out) = eval(
            |g, v| {
                let x = g.constant(Tensor::zeros(&[4]));
                let e = encode(g, v, x)?;
                let m = g.constant(s.mi.clone());
                item_write(g, &cfg, v, m, &e)
            },
            &p,
        );
        assert_eq!(g.value(out), &Tensor::zeros(&[6, 6]));
    }

    #[test]
    fn item_write_matches_loop_oracle() {
        let cfg = small_cfg();
        let p = randomized(&cfg, 5);
        let mut rng = Rng::new(6, 0);
        let mi0 = rng.uniform_tensor(&[6, 6], -1.0, 1.0);
        let xr = rng.uniform_tensor(&[4], -1.0, 1.0);
        let (g, out) = eval(
            |g, v| {
                let x = g.constant(xr.clone());
                let e = encode(g, v, x)?;
                let m = g.constant(mi0.clone());
                item_write(g, &cfg, v, m, &e)
            },
            &p,
        );
        let want = loop_item_write(&p, &mi0, &loop_encode(&p, xr.data()));
        assert!(g.value(out).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn relational_read_examples() {
        let cfg = small_cfg();
        let p = randomized(&cfg, 7);
        let mut rng = Rng::new(8, 0);
        let xr = rng.uniform_tensor(&[4], -1.0, 1.0);
        let mr = rng.uniform_tensor(&[2, 6, 6], -1.0, 1.0);
        let read = |mr: &Tensor| {
            let (g, out) = eval(
                |g, v| {
                    let x = g.constant(xr.clone());
                    let e = encode(g, v, x)?;
                    let m = g.constant(mr.clone());
                    relational_read(g, m, &e)
                },
                &p,
            );
            g.value(out).clone()
        };
        assert_eq!(read(&Tensor::zeros(&[2, 6, 6])), Tensor::zeros(&[6]));
        let l = loop_encode(&p, xr.data());
        let e0 = (l.f3[0] - l.f3[0].max(l.f3[1])).exp();
        let e1 = (l.f3[1] - l.f3[0].max(l.f3[1])).exp();
        let w = [e0 / (e0 + e1), e1 / (e0 + e1)];
        let mut want = vec![0.0; 6];
        for (s, ws) in w.iter().enumerate() {
            for r in 0..6 {
                for c in 0..6 {
                    want[r] += ws * mr.get(&[s, r, c]) * l.f2[c];
                }
            }
        }
        assert!(read(&mr).max_abs_diff(&Tensor::vector(&want)) < 1e-12);
    }

    #[test]
    fn relational_read_single_slice() {
        let mut cfg = small_cfg();
        cfg.n_q = 1;
        let p = randomized(&cfg, 9);
        let mut rng = Rng::new(10, 0);
        let xr = rng.uniform_tensor(&[4], -1.0, 1.0);
        let mr = rng.uniform_tensor(&[1, 6, 6], -1.0, 1.0);
        let (g, out) = eval(
            |g, v| {
                let x = g.constant(xr.clone());
                let e = encode(g, v, x)?;
                let m = g.constant(mr.clone());
                relational_read(g, m, &e)
            },
            &p,
        );
        let l = loop_encode(&p, xr.data());
        let want = mr.index0(0).matmul(&Tensor::vector(&l.f2)).unwrap();
        assert!(g.value(out).max_abs_diff(&want) < 1e-12);
    }

    fn write_once(cfg: &StmConfig, p: &StmParams, mi: &Tensor, mr: &Tensor, xr: &Tensor) -> (Tensor, Tensor) {
        let (g, (out, input)) = eval(
            |g, v| {
                let x = g.constant(xr.clone());
                let e = encode(g, v, x)?;
                let mi = g.constant(mi.clone());
                let mr = g.constant(mr.clone());
                let v_r = relational_read(g, mr, &e)?;
                let refresh = g.outer(v_r, e.f2)?;
                let refresh = g.scale_by(refresh, v.alpha2)?;
                let input = g.add(mi, refresh)?;
                Ok((relational_write(g, v, mi, mr, &e, v_r)?, input))
            },
            p,
        );
        let _ = cfg;
        (g.value(out).clone(), g.value(input).clone())
    }

    #[test]
    fn relational_write_examples() {
        let cfg = small_cfg();
        let mut p = randomized(&cfg, 11);
        let mut rng = Rng::new(12, 0);
        let mi = rng.uniform_tensor(&[6, 6], -1.0, 1.0);
        let mr = rng.uniform_tensor(&[2, 6, 6], -1.0, 1.0);
        let xr = rng.uniform_tensor(&[4], -1.0, 1.0);

        p.alpha1 = Tensor::scalar(0.0);
        assert_eq!(write_once(&cfg, &p, &mi, &mr, &xr).0, mr);

        p.alpha1 = Tensor::scalar(0.7);
        p.alpha2 = Tensor::scalar(0.0);
        let (out, input) = write_once(&cfg, &p, &mi, &mr, &xr);
        assert_eq!(input, mi);
        let want = mr.add(&sam_forward(&mi, &p.sam()).unwrap().scale(0.7)).unwrap();
        assert!(out.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn first_write_from_zero_state_is_scaled_sam() {
        let cfg = small_cfg();
        let mut p = randomized(&cfg, 13);
        p.alpha1 = Tensor::scalar(0.3);
        let xr = Rng::new(14, 0).uniform_tensor(&[4], -1.0, 1.0);
        let (g, (mi, mr)) = eval(
            |g, v| {
                let x = g.constant(xr.clone());
                let e = encode(g, v, x)?;
                let s = GraphState::constant(g, &StmState::zeros(&cfg));
                let mi = item_write(g, &cfg, v, s.mi, &e)?;
                let v_r = relational_read(g, s.mr, &e)?;
                Ok((mi, relational_write(g, v, mi, s.mr, &e, v_r)?))
            },
            &p,
        );
        let want = sam_forward(g.value(mi), &p.sam()).unwrap().scale(0.3);
        assert!(g.value(mr).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn transfer_examples() {
        let cfg = small_cfg();
        let mut p = randomized(&cfg, 15);
        let mut rng = Rng::new(16, 0);
        let mi = rng.uniform_tensor(&[6, 6], -1.0, 1.0);
        let mr = rng.uniform_tensor(&[2, 6, 6], -1.0, 1.0);
        let run = |p: &StmParams| {
            let (g, out) = eval(
                |g, v| {
                    let a = g.constant(mi.clone());
                    let b = g.constant(mr.clone());
                    transfer(g, v, a, b)
                },
                p,
            );
            g.value(out).clone()
        };
        p.alpha3 = Tensor::scalar(0.0);
        assert_eq!(run(&p), mi);
        p.alpha3 = Tensor::scalar(2.0);
        let mut want = mi.clone();
        for r in 0..6 {
            for c in 0..6 {
                let mut s = 0.0;
                for q in 0..2 {
                    for k in 0..6 {
                        s += p.g1.get(&[r, q * 6 + k]) * mr.get(&[q, k, c]);
                    }
                }
                want.set(&[r, c], want.get(&[r, c]) + 2.0 * s);
            }
        }
        assert!(run(&p).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn transfer_full_scale_dims() {
        let cfg = StmConfig::new(4, 2);
        let (p, s) = stm_init(&cfg, &mut Rng::new(0, 0)).unwrap();
        let (g, out) = eval(
            |g, v| {
                let a = g.constant(s.mi.clone());
                let b = g.constant(s.mr.clone());
                transfer(g, v, a, b)
            },
            &p,
        );
        assert_eq!(g.value(out).shape(), &[96, 96]);
    }

    #[test]
    fn distill_examples() {
        let cfg = small_cfg();
        let mut p = randomized(&cfg, 17);
        let mr = Rng::new(18, 0).uniform_tensor(&[2, 6, 6], -1.0, 1.0);
        let run = |p: &StmParams, mr: &Tensor| {
            let (g, out) = eval(
                |g, v| {
                    let m = g.constant(mr.clone());
                    distill_output(g, v, m)
                },
                p,
            );
            g.value(out).clone()
        };
        // loop oracle with biases
        let mut h = vec![0.0; 2 * 5];
        for q in 0..2 {
            for r in 0..5 {
                let mut s = p.b2.data()[r];
                for k in 0..36 {
                    s += p.g2.get(&[r, k]) * mr.data()[q * 36 + k];
                }
                h[q * 5 + r] = s;
            }
        }
        let want = mv(&p.g3, &p.b3, &h);
        assert!(run(&p, &mr).max_abs_diff(&Tensor::vector(&want)) < 1e-12);

        p.b2 = Tensor::zeros(&[5]);
        p.b3 = Tensor::zeros(&[3]);
        assert_eq!(run(&p, &Tensor::zeros(&[2, 6, 6])), Tensor::zeros(&[3]));
        let lin = run(&p, &mr.scale(2.5)).sub(&run(&p, &mr).scale(2.5)).unwrap();
        assert!(lin.norm() < 1e-12);
    }

    #[test]
    fn distill_full_scale_dims() {
        let cfg = StmConfig::new(4, 33);
        let (p, s) = stm_init(&cfg, &mut Rng::new(0, 0)).unwrap();
        let cell = StmCell { cfg: &cfg, params: &p };
        let (o, _) = cell.step(&s, &Tensor::zeros(&[4])).unwrap();
        assert_eq!(o.shape(), &[33]);
    }

    #[test]
    fn zero_inputs_give_zero_outputs() {
        let cfg = small_cfg();
        let (p, _) = stm_init(&cfg, &mut Rng::new(19, 0)).unwrap();
        let out = StmCell { cfg: &cfg, params: &p }.run(&Tensor::zeros(&[5, 4])).unwrap();
        assert_eq!(out, Tensor::zeros(&[5, 3]));
    }

    #[test]
    fn step_matches_manual_composition() {
        let cfg = small_cfg();
        let p = randomized(&cfg, 20);
        let mut rng = Rng::new(21, 0);
        let s0 = random_state(&cfg, &mut rng);
        let xr = rng.uniform_tensor(&[4], -1.0, 1.0);
        let (o, s1) = StmCell { cfg: &cfg, params: &p }.step(&s0, &xr).unwrap();

        // compose from independent oracles
        let l = loop_encode(&p, xr.data());
        let mi = loop_item_write(&p, &s0.mi, &l);
        let e: Vec<f64> = {
            let m = l.f3.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = l.f3.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = ex.iter().sum();
            ex.iter().map(|v| v / z).collect()
        };
        let mut v_r = vec![0.0; 6];
        for s in 0..2 {
            for r in 0..6 {
                for c in 0..6 {
                    v_r[r] += e[s] * s0.mr.get(&[s, r, c]) * l.f2[c];
                }
            }
        }
        let refresh = Tensor::outer(&Tensor::vector(&v_r), &Tensor::vector(&l.f2)).unwrap();
        let input = mi.add(&refresh.scale(p.alpha2.item())).unwrap();
        let mr = s0
            .mr
            .add(&sam_forward(&input, &p.sam()).unwrap().scale(p.alpha1.item()))
            .unwrap();
        let tr = p.g1.matmul(&mr.reshape(&[12, 6]).unwrap()).unwrap();
        let mi2 = mi.add(&tr.scale(p.alpha3.item())).unwrap();
        assert!(s1.mi.max_abs_diff(&mi2) < 1e-12);
        assert!(s1.mr.max_abs_diff(&mr) < 1e-12);
        let mut h = vec![0.0; 10];
        for q in 0..2 {
            for r in 0..5 {
                h[q * 5 + r] = p.b2.data()[r] + (0..36).map(|k| p.g2.get(&[r, k]) * mr.data()[q * 36 + k]).sum::<f64>();
            }
        }
        assert!(o.max_abs_diff(&Tensor::vector(&mv(&p.g3, &p.b3, &h))) < 1e-12);
    }

    #[test]
    fn shapes_conserved_over_many_steps() {
        let cfg = small_cfg();
        let (p, mut s) = stm_init(&cfg, &mut Rng::new(22, 0)).unwrap();
        let cell = StmCell { cfg: &cfg, params: &p };
        let mut rng = Rng::new(23, 0);
        for _ in 0..20 {
            let (_, next) = cell.step(&s, &rng.uniform_tensor(&[4], -1.0, 1.0)).unwrap();
            s = next;
            assert_eq!(s.mi.shape(), &[6, 6]);
            assert_eq!(s.mr.shape(), &[2, 6, 6]);
        }
    }

    #[test]
    fn hebbian_reduction_over_sequence() {
        let mut cfg = small_cfg();
        cfg.clamp_gates = true;
        let mut p = randomized(&cfg, 24);
        p.alpha2 = Tensor::scalar(0.0);
        p.alpha3 = Tensor::scalar(0.0);
        let mut rng = Rng::new(25, 0);
        let cell = StmCell { cfg: &cfg, params: &p };
        let mut s = StmState::zeros(&cfg);
        let mut want = Tensor::zeros(&[6, 6]);
        for _ in 0..7 {
            let xr = rng.uniform_tensor(&[4], -1.0, 1.0);
            let l = loop_encode(&p, xr.data());
            want.add_assign(&Tensor::outer(&Tensor::vector(&l.f1), &Tensor::vector(&l.f2)).unwrap());
            s = cell.step(&s, &xr).unwrap().1;
        }
        assert!(s.mi.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn zero_alpha1_keeps_relational_memory_empty() {
        let cfg = small_cfg();
        let mut p = randomized(&cfg, 26);
        p.alpha1 = Tensor::scalar(0.0);
        let cell = StmCell { cfg: &cfg, params: &p };
        let mut rng = Rng::new(27, 0);
        let base = {
            let mut g = Graph::new();
            let v = p.bind(&mut g);
            let z = g.constant(Tensor::zeros(&[2, 6, 6]));
            let o = distill_output(&mut g, &v, z).unwrap();
            g.value(o).clone()
        };
        let mut s = StmState::zeros(&cfg);
        for _ in 0..5 {
            let (o, next) = cell.step(&s, &rng.uniform_tensor(&[4], -1.0, 1.0)).unwrap();
            assert_eq!(next.mr, Tensor::zeros(&[2, 6, 6]));
            assert_eq!(o, base);
            s = next;
        }
    }

    #[test]
    fn deterministic_trajectory() {
        let cfg = small_cfg();
        let inputs = Rng::new(28, 0).uniform_tensor(&[6, 4], -1.0, 1.0);
        let run = || {
            let (p, _) = stm_init(&cfg, &mut Rng::new(29, 0)).unwrap();
            StmCell { cfg: &cfg, params: &p }.run(&inputs).unwrap()
        };
        assert_eq!(run().data(), run().data());
    }

    #[test]
    fn three_step_gradient_check() {
        let cfg = StmConfig {
            d: 8,
            n_q: 2,
            n_r: 4,
            n_o: 3,
            in_dim: 4,
            alphas_learnable: true,
            clamp_gates: false,
        };
        let p = randomized(&cfg, 30);
        let mut rng = Rng::new(31, 0);
        let inputs = rng.uniform_tensor(&[3, 4], -1.0, 1.0);
        let probe = rng.uniform_tensor(&[3, 3], -1.0, 1.0);
        let tensors: Vec<Tensor> = p.named().into_iter().map(|(_, t)| t.clone()).collect();
        let report = grad_check_report(
            |g, vars| {
                let v = StmVars::from_slice(vars);
                let out = stm_sequence(g, &cfg, &v, &inputs)?;
                let w = g.constant(probe.clone());
                let prod = g.mul(out, w)?;
                Ok(g.sum_all(prod))
            },
            &tensors,
            1e-5,
        )
        .unwrap();
        // Coordinates with tiny gradients sit at the finite-difference noise
        // floor, so they are held to an absolute bound instead.
        assert!(report.max_abs < 1e-8, "{}", report.max_abs);
        for (rel, a) in report.rel.iter().zip(&report.analytic) {
            if a.abs() >= 1e-4 {
                assert!(*rel < 1e-6, "{rel} at gradient {a}");
            }
        }
    }
}
