use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use samstm::attention::{dpa, opa, DpaSpec, OpaSpec};
use samstm::checkpoint::Checkpoint;
use samstm::config::{self, SEED_ENV};
use samstm::props::{self, PropId};
use samstm::tasks::{generate_batch, read_episodes, validate, write_episodes, TaskConfig, TaskKind};
use samstm::train::{self, flop_counters, numerical_rank, AttnKind};
use samstm::{Error, Rng};

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_PROPERTY: u8 = 3;

#[derive(Parser)]
#[command(
    name = "samstm",
    version,
    about = "Self-attentive associative memory: tasks, training and diagnostics"
)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Generate oracle-validated episodes into an `.ep` file.
    Gen(GenArgs),
    /// Train a model from a config file and/or inline flags.
    Train(TrainArgs),
    /// Evaluate a checkpoint on held-out or supplied episodes.
    Eval(EvalArgs),
    /// Run the algebraic property suites.
    CheckProps(PropsArgs),
    /// Count attention operations and time the kernels.
    Bench(BenchArgs),
    /// Numerical rank of a checkpointed weight.
    Rank(RankArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    task: String,
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Falls back to the SAMSTM_SEED environment variable, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    bits: Option<usize>,
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    items: Option<usize>,
    #[arg(long)]
    vecs: Option<usize>,
    /// Threads used for generation; the output does not depend on it.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// `key = value` config file; inline flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    eval_interval: Option<usize>,
    #[arg(long)]
    eval_episodes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Any other config entry, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Suppress per-eval progress lines.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Episode file to score; defaults to the run's held-out set.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Size of the held-out set when no data file is given.
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct PropsArgs {
    /// 1-5, lemma1 or all.
    #[arg(long, default_value = "all")]
    prop: String,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print the error of every trial.
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated key/value counts.
    #[arg(long, default_value = "4,8,16")]
    sweep: String,
    #[arg(long, default_value_t = 2)]
    n_q: usize,
    #[arg(long, default_value_t = 16)]
    d_qk: usize,
    #[arg(long, default_value_t = 16)]
    d_v: usize,
    /// Timed repetitions per kernel.
    #[arg(long, default_value_t = 200)]
    reps: usize,
}

#[derive(Args)]
struct RankArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Parameter name; matched case-insensitively.
    #[arg(long, default_value = "g2")]
    param: String,
}

/// A failure and the exit code it maps to.
struct Failure(u8, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Parse { .. } => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        };
        Failure(code, e.to_string())
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure(EXIT_USAGE, msg.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let res = match cli.verb {
        Verb::Gen(a) => cmd_gen(a),
        Verb::Train(a) => cmd_train(a),
        Verb::Eval(a) => cmd_eval(a),
        Verb::CheckProps(a) => cmd_check_props(a),
        Verb::Bench(a) => cmd_bench(a),
        Verb::Rank(a) => cmd_rank(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

fn env_seed() -> Result<Option<u64>, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| usage(format!("{SEED_ENV}='{s}' is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn cmd_gen(a: GenArgs) -> Result<(), Failure> {
    let kind: TaskKind = a.task.parse().map_err(|e: Error| usage(e.to_string()))?;
    let mut cfg = TaskConfig::new(kind);
    let set = |slot: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut cfg.bits, a.bits);
    set(&mut cfg.min_len, a.min_len);
    set(&mut cfg.max_len, a.max_len);
    set(&mut cfg.pairs, a.pairs);
    set(&mut cfg.m, a.m);
    set(&mut cfg.k, a.k);
    set(&mut cfg.items, a.items);
    set(&mut cfg.vecs, a.vecs);
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let seed = match a.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let episodes = generate_batch(&cfg, seed, 0, a.count, a.workers)?;
    fs::write(&a.out, write_episodes(&episodes)).map_err(Error::from)?;
    println!(
        "wrote {} {} episodes to {} (seed {seed}); all {} match the oracle",
        episodes.len(),
        kind,
        a.out.display(),
        episodes.len()
    );
    Ok(())
}

/// Merges the config file with inline flags into one config text; inline
/// values replace file entries with the same key.
fn train_config_text(a: &TrainArgs) -> Result<String, Failure> {
    let mut pairs: Vec<(String, String)> = match &a.config {
        Some(path) => {
            let text =
                fs::read_to_string(path).map_err(|e| Failure(EXIT_RUNTIME, format!("{}: {e}", path.display())))?;
            config::parse_pairs(&text)
                .map_err(|e| usage(format!("{}: {e}", path.display())))?
                .into_iter()
                .map(|(_, k, v)| (k, v))
                .collect()
        }
        None => Vec::new(),
    };
    let mut inline: Vec<(String, String)> = Vec::new();
    let mut push = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            inline.push((k.to_string(), v));
        }
    };
    push("preset", a.preset.clone());
    push("task", a.task.clone());
    push("model", a.model.clone());
    push("optimizer", a.optimizer.clone());
    push("lr", a.lr.map(|v| v.to_string()));
    push("batch", a.batch.map(|v| v.to_string()));
    push("iterations", a.iterations.map(|v| v.to_string()));
    push("episodes", a.episodes.map(|v| v.to_string()));
    push("eval_interval", a.eval_interval.map(|v| v.to_string()));
    push("eval_episodes", a.eval_episodes.map(|v| v.to_string()));
    push("seed", a.seed.map(|v| v.to_string()));
    push("workers", a.workers.map(|v| v.to_string()));
    push("metrics", a.metrics.as_ref().map(|p| p.display().to_string()));
    push("checkpoint", a.checkpoint.as_ref().map(|p| p.display().to_string()));
    for s in &a.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got '{s}'")))?;
        inline.push((k.trim().to_string(), v.trim().to_string()));
    }
    for (k, v) in inline {
        // the two length keys are exclusive; an inline one replaces a file one
        if k == "episodes" || k == "iterations" {
            pairs.retain(|(pk, _)| pk != "episodes" && pk != "iterations");
        }
        match pairs.iter_mut().find(|(pk, _)| *pk == k) {
            Some(slot) => slot.1 = v,
            None => pairs.push((k, v)),
        }
    }
    Ok(pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect())
}

fn cmd_train(a: TrainArgs) -> Result<(), Failure> {
    let text = train_config_text(&a)?;
    let cfg = config::parse(&text).map_err(|e| usage(e.to_string()))?;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    println!(
        "training {} on {} ({}, batch {}, {} iterations, seed {})",
        cfg.model, cfg.task.kind, cfg.optimizer, cfg.batch, cfg.iterations, cfg.seed
    );
    let quiet = a.quiet;
    let out = train::train_with(&cfg, |r| {
        if !quiet {
            println!(
                "iter {:>7}  loss {:.5}  bit error {:.4}  accuracy {:.4}  {:.1}s",
                r.iteration, r.loss, r.bit_error, r.accuracy, r.seconds
            );
        }
    })?;
    println!("{}", out.summary());
    if let Some(p) = &cfg.metrics_path {
        println!("metrics: {}", p.display());
    }
    if let Some(p) = &cfg.checkpoint_path {
        println!("checkpoint: {}", p.display());
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<(), Failure> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let (mut cfg, model) = train::model_from_checkpoint(&ck)?;
    let episodes = match &a.data {
        Some(path) => {
            let text =
                fs::read_to_string(path).map_err(|e| Failure(EXIT_RUNTIME, format!("{}: {e}", path.display())))?;
            let eps = read_episodes(&text)?;
            for ep in &eps {
                validate(ep)?;
            }
            eps
        }
        None => {
            if let Some(n) = a.episodes {
                cfg.eval_episodes = n;
            }
            if let Some(w) = a.workers {
                cfg.workers = w;
            }
            train::eval_episodes(&cfg)?
        }
    };
    let r = train::evaluate(&model, &episodes)?;
    println!(
        "{} {} on {} episodes: loss {:.5}  bit error {:.4}  accuracy {:.4}",
        cfg.model,
        cfg.task.kind,
        episodes.len(),
        r.loss,
        r.bit_error,
        r.accuracy
    );
    Ok(())
}

fn cmd_check_props(a: PropsArgs) -> Result<(), Failure> {
    let ids: Vec<PropId> = if a.prop == "all" {
        PropId::ALL.to_vec()
    } else {
        vec![a.prop.parse().map_err(|e: Error| usage(e.to_string()))?]
    };
    if a.trials == 0 {
        return Err(usage("--trials must be positive"));
    }
    let mut failed = 0;
    for id in &ids {
        let r = props::run_suite(*id, a.trials, a.seed)?;
        if a.verbose {
            for (t, e) in r.trial_errors.iter().enumerate() {
                println!("  prop {id} trial {t}: {e:.3e}");
            }
        }
        println!("{r}");
        if !r.passed {
            failed += 1;
        }
    }
    if ids.len() > 1 {
        println!("{} of {} suites passed", ids.len() - failed, ids.len());
    }
    if failed > 0 {
        return Err(Failure(EXIT_PROPERTY, format!("{failed} property suite(s) failed")));
    }
    Ok(())
}

fn parse_sweep(s: &str) -> Result<Vec<usize>, Failure> {
    let dims: Vec<usize> = s
        .split(',')
        .map(|t| t.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| usage(format!("--sweep expects comma-separated positive integers, got '{s}'")))?;
    if dims.is_empty() || dims.contains(&0) {
        return Err(usage(format!("--sweep expects positive integers, got '{s}'")));
    }
    Ok(dims)
}

/// Mean wall-clock seconds of one `dpa`/`opa` call per query.
fn time_kernel(kind: AttnKind, n_q: usize, n_kv: usize, d_qk: usize, d_v: usize, reps: usize) -> Result<f64, Failure> {
    let mut rng = Rng::new(0, n_kv as u64);
    let qs: Vec<_> = (0..n_q).map(|_| rng.uniform_tensor(&[d_qk], -1.0, 1.0)).collect();
    let k = rng.uniform_tensor(&[n_kv, d_qk], -1.0, 1.0);
    let v = rng.uniform_tensor(&[n_kv, d_v], -1.0, 1.0);
    let start = Instant::now();
    let mut sink = 0.0;
    for _ in 0..reps {
        for q in &qs {
            let out = match kind {
                AttnKind::Dpa => dpa(q, &k, &v, &DpaSpec::Softmax)?,
                AttnKind::Opa => opa(q, &k, &v, &OpaSpec::Tanh)?,
            };
            sink += out.data()[0];
        }
    }
    std::hint::black_box(sink);
    Ok(start.elapsed().as_secs_f64() / reps as f64)
}

fn cmd_bench(a: BenchArgs) -> Result<(), Failure> {
    let sweep = parse_sweep(&a.sweep)?;
    if a.n_q == 0 || a.d_qk == 0 || a.d_v == 0 || a.reps == 0 {
        return Err(usage("--n-q, --d-qk, --d-v and --reps must be positive"));
    }
    println!("n_q={} d_qk={} d_v={} ({} timed reps)", a.n_q, a.d_qk, a.d_v, a.reps);
    println!(
        "{:<4} {:>5} {:>10} {:>10} {:>8} {:>12} {:>12} {:>10} {:>11}",
        "attn", "n_kv", "adds", "mults", "storage", "adds(form)", "mults(form)", "stor(form)", "us/call"
    );
    for &n_kv in &sweep {
        let mut mults = [0u64; 2];
        for (slot, kind) in [AttnKind::Dpa, AttnKind::Opa].into_iter().enumerate() {
            let r = flop_counters(kind, a.n_q, n_kv, a.d_qk, a.d_v)?;
            let secs = time_kernel(kind, a.n_q, n_kv, a.d_qk, a.d_v, a.reps)?;
            mults[slot] = r.measured.mults;
            println!(
                "{:<4} {:>5} {:>10} {:>10} {:>8} {:>12.0} {:>12.0} {:>10.0} {:>11.2}",
                match kind {
                    AttnKind::Dpa => "dpa",
                    AttnKind::Opa => "opa",
                },
                n_kv,
                r.measured.adds,
                r.measured.mults,
                r.measured.storage,
                r.formula.0,
                r.formula.1,
                r.formula.2,
                secs * 1e6
            );
        }
        println!(
            "     opa/dpa multiply ratio at n_kv={n_kv}: {:.3}",
            mults[1] as f64 / mults[0] as f64
        );
    }
    Ok(())
}

fn cmd_rank(a: RankArgs) -> Result<(), Failure> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let name = ck
        .names()
        .into_iter()
        .find(|n| n.eq_ignore_ascii_case(&a.param))
        .map(str::to_string)
        .unwrap_or_else(|| a.param.clone());
    let w = ck.require(&name)?;
    let rows = w.shape().first().copied().unwrap_or(1);
    let bound = rows.min(w.numel() / rows.max(1));
    let r = numerical_rank(w)?;
    println!("r({name}) = {r:.4}  (shape {:?}, upper bound {bound})", w.shape());
    Ok(())
}
