//! Losses, optimizers, metrics, the training loop and diagnostics.

pub mod diagnostics;
pub mod loss;
pub mod metrics;
pub mod optim;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::lstm::{lstm_init, lstm_sequence, LstmConfig, LstmParams};
use crate::params::ParamSet;
use crate::stm::{stm_init, stm_sequence, StmConfig, StmParams};
use crate::tasks::{generate_batch, Episode, TaskConfig, TaskKind};
use crate::tensor::{Rng, Tensor};

pub use diagnostics::{complexity_formula, flop_counters, numerical_rank, AttnKind, FlopReport, OpCounts};
pub use loss::{loss_bits, loss_classify};
pub use metrics::{bit_error_per_sequence, bit_errors, MetricsLog, Record};
pub use optim::{clip_grad_norm, Optimizer, OptimizerKind};

/// Stream offsets keeping parameter init, training episodes and the eval
/// set on disjoint random streams of one seed.
const INIT_STREAM: u64 = 1 << 62;
const EVAL_STREAM: u64 = 1 << 61;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Stm,
    Lstm,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Stm => "stm",
            ModelKind::Lstm => "lstm",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stm" => Ok(ModelKind::Stm),
            "lstm" => Ok(ModelKind::Lstm),
            _ => Err(Error::Invalid(format!("unknown model '{s}' (expected stm or lstm)"))),
        }
    }
}

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: TaskConfig,
    pub model: ModelKind,
    pub d: usize,
    pub n_q: usize,
    pub n_r: usize,
    pub alphas_learnable: bool,
    pub lstm_hidden: usize,
    pub optimizer: OptimizerKind,
    pub batch: usize,
    pub iterations: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub seed: u64,
    pub clip: f64,
    pub workers: usize,
    /// Stop after an eval whose accuracy reaches this value.
    pub stop_accuracy: Option<f64>,
    /// Stop after an eval whose bit error falls below this value.
    pub stop_bit_error: Option<f64>,
    pub metrics_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(kind: TaskKind) -> Self {
        RunConfig {
            task: TaskConfig::new(kind),
            model: ModelKind::Stm,
            d: 32,
            n_q: 2,
            n_r: 32,
            alphas_learnable: true,
            lstm_hidden: 128,
            optimizer: OptimizerKind::RmsProp { lr: 1e-4 },
            batch: 32,
            iterations: 1000,
            eval_interval: 100,
            eval_episodes: 512,
            seed: 0,
            clip: 10.0,
            workers: 1,
            stop_accuracy: None,
            stop_bit_error: None,
            metrics_path: None,
            checkpoint_path: None,
        }
    }

    pub const PRESETS: [&'static str; 8] = [
        "copy",
        "copy-full",
        "priority-sort",
        "assoc",
        "nth-farthest",
        "nth-farthest-full",
        "rar",
        "rar-full",
    ];

    /// Named configurations. Desk presets set the budgets used by the
    /// acceptance runs; `-full` presets keep the full-scale sizes.
    pub fn preset(name: &str) -> Result<Self> {
        let episodes = |c: &mut RunConfig, n: usize| c.iterations = n.div_ceil(c.batch);
        let cfg = match name {
            "copy" => {
                let mut c = RunConfig::new(TaskKind::Copy);
                episodes(&mut c, 20_000);
                c.eval_interval = 25;
                c
            }
            "copy-full" => {
                let mut c = RunConfig::new(TaskKind::Copy);
                c.d = 96;
                c.n_q = 8;
                c.n_r = 96;
                c.batch = 128;
                c.iterations = 100_000;
                c.eval_interval = 1000;
                c
            }
            "priority-sort" => {
                let mut c = RunConfig::new(TaskKind::PrioritySort);
                c.optimizer = OptimizerKind::adam(1e-3);
                episodes(&mut c, 50_000);
                c
            }
            "assoc" => {
                let mut c = RunConfig::new(TaskKind::AssocRetrieval);
                c.n_q = 1;
                // batch 8: four times the updates per episode; batch 32 stays at chance
                c.batch = 8;
                c.optimizer = OptimizerKind::adam(1e-3);
                episodes(&mut c, 50_000);
                c.eval_interval = 250;
                c.stop_accuracy = Some(0.99);
                c
            }
            "nth-farthest" => {
                let mut c = RunConfig::new(TaskKind::NthFarthest);
                c.n_q = 4;
                c.optimizer = OptimizerKind::adam(1e-3);
                episodes(&mut c, 100_000);
                c.eval_interval = 100;
                c.stop_accuracy = Some(0.90);
                c
            }
            "nth-farthest-full" => {
                let mut c = RunConfig::new(TaskKind::NthFarthest);
                c.task.m = 8;
                c.task.k = 16;
                c.d = 96;
                c.n_q = 8;
                c.n_r = 96;
                c.batch = 1600;
                c.optimizer = OptimizerKind::adam(1e-3);
                c.iterations = 100_000;
                c.eval_interval = 1000;
                c
            }
            "rar" => {
                let mut c = RunConfig::new(TaskKind::Rar);
                c.optimizer = OptimizerKind::adam(1e-3);
                episodes(&mut c, 100_000);
                c.eval_interval = 100;
                c
            }
            "rar-full" => {
                let mut c = RunConfig::new(TaskKind::Rar);
                c.task.items = 8;
                c.task.vecs = 4;
                c.d = 96;
                c.n_q = 8;
                c.n_r = 96;
                c.batch = 128;
                c.iterations = 100_000;
                c.eval_interval = 1000;
                c
            }
            _ => {
                return Err(Error::Invalid(format!(
                    "unknown preset '{name}'; available: {}",
                    Self::PRESETS.join(", ")
                )))
            }
        };
        Ok(cfg)
    }

    pub fn stm_config(&self) -> StmConfig {
        StmConfig {
            d: self.d,
            n_q: self.n_q,
            n_r: self.n_r,
            n_o: self.task.n_o(),
            in_dim: self.task.in_dim(),
            alphas_learnable: self.alphas_learnable,
            clamp_gates: false,
        }
    }

    pub fn lstm_config(&self) -> LstmConfig {
        LstmConfig {
            in_dim: self.task.in_dim(),
            hidden: self.lstm_hidden,
            n_o: self.task.n_o(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        for (name, v) in [
            ("d", self.d),
            ("n_q", self.n_q),
            ("n_r", self.n_r),
            ("lstm_hidden", self.lstm_hidden),
            ("batch", self.batch),
            ("iterations", self.iterations),
            ("eval_interval", self.eval_interval),
            ("eval_episodes", self.eval_episodes),
            ("workers", self.workers),
        ] {
            if v == 0 {
                return Err(Error::Invalid(format!("{name} must be positive")));
            }
        }
        let lr = self.optimizer.lr();
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Invalid(format!(
                "learning rate {lr} must be finite and non-negative"
            )));
        }
        if let OptimizerKind::Adam { beta1, beta2, .. } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                return Err(Error::Invalid("Adam betas must lie in [0, 1)".into()));
            }
        }
        if self.clip.is_nan() || self.clip <= 0.0 {
            return Err(Error::Invalid("clip norm must be positive".into()));
        }
        Ok(())
    }
}

/// A trainable sequence model.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Stm(StmConfig, StmParams),
    Lstm(LstmConfig, LstmParams),
}

impl Model {
    pub fn init(cfg: &RunConfig) -> Result<Self> {
        let mut rng = Rng::new(cfg.seed, INIT_STREAM);
        Ok(match cfg.model {
            ModelKind::Stm => {
                let c = cfg.stm_config();
                let (p, _) = stm_init(&c, &mut rng)?;
                Model::Stm(c, p)
            }
            ModelKind::Lstm => {
                let c = cfg.lstm_config();
                let p = lstm_init(&c, &mut rng)?;
                Model::Lstm(c, p)
            }
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Stm(..) => ModelKind::Stm,
            Model::Lstm(..) => ModelKind::Lstm,
        }
    }

    /// Binds the parameters as leaves and returns the `T×n_o` logits with
    /// the leaves in [`ParamSet::named`] order.
    pub fn forward(&self, g: &mut Graph, inputs: &Tensor) -> Result<(Var, Vec<Var>)> {
        match self {
            Model::Stm(c, p) => {
                let v = p.bind(g);
                Ok((stm_sequence(g, c, &v, inputs)?, v.all()))
            }
            Model::Lstm(c, p) => {
                let v = p.bind(g);
                Ok((lstm_sequence(g, c, &v, inputs)?, v.all()))
            }
        }
    }

    /// Whether the optimizer may change `name`.
    pub fn trainable(&self, name: &str) -> bool {
        match self {
            Model::Stm(c, _) => c.alphas_learnable || !StmParams::is_alpha(name),
            Model::Lstm(..) => true,
        }
    }
}

impl ParamSet for Model {
    fn named(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Model::Stm(_, p) => p.named(),
            Model::Lstm(_, p) => p.named(),
        }
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match self {
            Model::Stm(_, p) => p.named_mut(),
            Model::Lstm(_, p) => p.named_mut(),
        }
    }
}

/// Graph loss of one episode: bit cross-entropy for bit tasks, softmax
/// cross-entropy on the last masked step for classification tasks.
pub fn episode_loss(g: &mut Graph, logits: Var, ep: &Episode) -> Result<Var> {
    if ep.task.is_classification() {
        let t = ep
            .mask
            .iter()
            .rposition(|&m| m != 0.0)
            .ok_or_else(|| Error::Invalid("episode has no masked step".into()))?;
        let class = ep
            .target_class()
            .ok_or_else(|| Error::Invalid("classification episode lacks a one-hot target".into()))?;
        let row = g.index0(logits, t)?;
        g.softmax_ce(row, class)
    } else {
        g.bce_with_logits(logits, &ep.targets, &ep.mask)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    /// Mean masked bit errors per sequence; for classification tasks the
    /// misclassification rate.
    pub bit_error: f64,
    /// Fraction of sequences with no error at all.
    pub accuracy: f64,
}

/// Forward-only evaluation over `episodes`.
pub fn evaluate(model: &Model, episodes: &[Episode]) -> Result<EvalResult> {
    if episodes.is_empty() {
        return Err(Error::Invalid("no evaluation episodes".into()));
    }
    let (mut loss, mut errors, mut correct) = (0.0, 0.0, 0usize);
    for ep in episodes {
        let mut g = Graph::new();
        let (logits, _) = model.forward(&mut g, &ep.inputs)?;
        let l = episode_loss(&mut g, logits, ep)?;
        loss += g.value(l).item();
        let z = g.value(logits);
        let ok = if ep.task.is_classification() {
            let t = ep.mask.iter().rposition(|&m| m != 0.0).unwrap_or(0);
            let row = z.index0(t);
            let pred = argmax(row.data());
            Some(pred) == ep.target_class()
        } else {
            let e = bit_errors(&z.sigmoid(), &ep.targets, &ep.mask);
            errors += e as f64;
            e == 0
        };
        if ok {
            correct += 1;
        } else if ep.task.is_classification() {
            errors += 1.0;
        }
    }
    let n = episodes.len() as f64;
    Ok(EvalResult {
        loss: loss / n,
        bit_error: errors / n,
        accuracy: correct as f64 / n,
    })
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Summed loss and parameter gradients of a batch, divided by its size.
pub fn batch_gradients(model: &Model, batch: &[Episode]) -> Result<(f64, Vec<Tensor>)> {
    let mut sum: Vec<Tensor> = model.named().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
    let mut loss = 0.0;
    for ep in batch {
        let mut g = Graph::new();
        let (logits, leaves) = model.forward(&mut g, &ep.inputs)?;
        let l = episode_loss(&mut g, logits, ep)?;
        loss += g.value(l).item();
        let grads = g.backward(l)?;
        for (acc, v) in sum.iter_mut().zip(&leaves) {
            if let Some(gr) = grads.get(*v) {
                acc.add_assign(gr);
            }
        }
    }
    let s = 1.0 / batch.len() as f64;
    for t in sum.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= s);
    }
    Ok((loss * s, sum))
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: MetricsLog,
    pub model: Model,
    pub iterations: usize,
    pub episodes: usize,
    /// True when a stop threshold ended the run before the budget.
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn summary(&self) -> String {
        match self.log.last() {
            Some(r) => format!(
                "{} iterations ({} episodes): loss {:.4}, bit error {:.4}, accuracy {:.4}, best accuracy {:.4}{}",
                self.iterations,
                self.episodes,
                r.loss,
                r.bit_error,
                r.accuracy,
                self.log.best_accuracy(),
                if self.stopped_early { " (stopped early)" } else { "" }
            ),
            None => format!("{} iterations, no evaluations", self.iterations),
        }
    }
}

/// Checkpoint metadata describing `cfg`, enough to rebuild the model.
pub fn checkpoint_meta(cfg: &RunConfig) -> Vec<(String, String)> {
    crate::config::to_pairs(cfg)
        .into_iter()
        .map(|(k, v)| (format!("cfg.{k}"), v))
        .collect()
}

/// Rebuilds the run configuration and model stored in a checkpoint.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<(RunConfig, Model)> {
    let text: String = ck
        .meta
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("cfg.").map(|k| format!("{k} = {v}\n")))
        .collect();
    let cfg = crate::config::parse(&text)?;
    let mut model = Model::init(&cfg)?;
    ck.load_into(&mut model)?;
    Ok((cfg, model))
}

pub fn eval_episodes(cfg: &RunConfig) -> Result<Vec<Episode>> {
    generate_batch(&cfg.task, cfg.seed, EVAL_STREAM, cfg.eval_episodes, cfg.workers)
}

pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    train_with(cfg, |_| {})
}

/// Runs the loop and calls `on_eval` after every evaluation.
pub fn train_with(cfg: &RunConfig, mut on_eval: impl FnMut(&Record)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let mut model = Model::init(cfg)?;
    let eval_set = eval_episodes(cfg)?;
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut log = MetricsLog::default();
    let trainable: Vec<bool> = model.named().iter().map(|(n, _)| model.trainable(n)).collect();
    let mut stopped_early = false;
    let mut iteration = 0;
    while iteration < cfg.iterations {
        iteration += 1;
        let stream = ((iteration - 1) * cfg.batch) as u64;
        let batch = generate_batch(&cfg.task, cfg.seed, stream, cfg.batch, cfg.workers)?;
        let (loss, grads) = batch_gradients(&model, &batch)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { iteration });
        }
        let mut grads: Vec<Tensor> = grads
            .into_iter()
            .zip(&trainable)
            .filter(|(_, &t)| t)
            .map(|(g, _)| g)
            .collect();
        clip_grad_norm(&mut grads, cfg.clip);
        {
            let mut params: Vec<&mut Tensor> = model
                .named_mut()
                .into_iter()
                .zip(&trainable)
                .filter(|(_, &t)| t)
                .map(|((_, p), _)| p)
                .collect();
            opt.step(&mut params, &grads)?;
        }
        if iteration % cfg.eval_interval == 0 || iteration == cfg.iterations {
            let r = evaluate(&model, &eval_set)?;
            if !r.loss.is_finite() {
                return Err(Error::Diverged { iteration });
            }
            let rec = Record {
                iteration,
                loss: r.loss,
                bit_error: r.bit_error,
                accuracy: r.accuracy,
                seconds: start.elapsed().as_secs_f64(),
            };
            on_eval(&rec);
            log.push(rec)?;
            let hit_acc = cfg.stop_accuracy.is_some_and(|a| r.accuracy >= a);
            let hit_bits = cfg.stop_bit_error.is_some_and(|b| r.bit_error < b);
            if hit_acc || hit_bits {
                stopped_early = iteration < cfg.iterations;
                break;
            }
        }
    }
    if let Some(p) = &cfg.metrics_path {
        std::fs::write(p, log.to_csv())?;
    }
    if let Some(p) = &cfg.checkpoint_path {
        Checkpoint::from_params(&model, checkpoint_meta(cfg)).save(p)?;
    }
    Ok(TrainOutcome {
        log,
        model,
        iterations: iteration,
        episodes: iteration * cfg.batch,
        stopped_early,
    })
}
