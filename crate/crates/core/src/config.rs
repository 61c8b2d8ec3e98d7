//! Plain-text run configuration: `key = value` lines, `#` comments.
//!
//! `preset` (if present) picks the starting point, then every other key
//! overrides one field. Without a `seed` key the `SAMSTM_SEED` environment
//! variable is used, and 0 otherwise.

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::tasks::TaskKind;
use crate::train::{OptimizerKind, RunConfig};

pub const SEED_ENV: &str = "SAMSTM_SEED";

pub const KEYS: [&str; 32] = [
    "preset",
    "task",
    "bits",
    "min_len",
    "max_len",
    "pairs",
    "m",
    "k",
    "items",
    "vecs",
    "model",
    "d",
    "n_q",
    "n_r",
    "alphas_learnable",
    "lstm_hidden",
    "optimizer",
    "lr",
    "beta1",
    "beta2",
    "batch",
    "iterations",
    "eval_interval",
    "eval_episodes",
    "seed",
    "clip",
    "workers",
    "stop_accuracy",
    "stop_bit_error",
    "metrics",
    "checkpoint",
    "episodes",
];

/// Splits `text` into ordered pairs, rejecting unknown or repeated keys.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: line_no,
            msg: format!("expected 'key = value', got '{line}'"),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("unknown config key '{k}'"),
            });
        }
        if let Some(prev) = seen.insert(k.to_string(), line_no) {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("config key '{k}' already set on line {prev}"),
            });
        }
        out.push((line_no, k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn parse(text: &str) -> Result<RunConfig> {
    parse_with_seed_fallback(text, std::env::var(SEED_ENV).ok().as_deref())
}

/// [`parse`] with an explicit stand-in for the seed environment variable.
pub fn parse_with_seed_fallback(text: &str, env_seed: Option<&str>) -> Result<RunConfig> {
    let pairs = parse_pairs(text)?;
    let find = |key: &str| pairs.iter().find(|(_, k, _)| k == key);
    let task_kind = match find("task") {
        Some((n, _, v)) => Some(v.parse::<TaskKind>().map_err(|e| at(*n, "task", e))?),
        None => None,
    };
    let mut cfg = match find("preset") {
        Some((n, _, v)) => RunConfig::preset(v).map_err(|e| at(*n, "preset", e))?,
        None => RunConfig::new(task_kind.unwrap_or(TaskKind::Copy)),
    };
    if let Some(kind) = task_kind {
        cfg.task.kind = kind;
    }
    let mut lr = None;
    let mut optimizer = None;
    let mut betas = (None, None);
    let mut episodes = None;
    for (n, k, v) in &pairs {
        let n = *n;
        let int = || {
            v.parse::<usize>()
                .map_err(|_| at(n, k, "expected a non-negative integer"))
        };
        let float = || v.parse::<f64>().map_err(|_| at(n, k, "expected a number"));
        match k.as_str() {
            "preset" | "task" => {}
            "bits" => cfg.task.bits = int()?,
            "min_len" => cfg.task.min_len = int()?,
            "max_len" => cfg.task.max_len = int()?,
            "pairs" => cfg.task.pairs = int()?,
            "m" => cfg.task.m = int()?,
            "k" => cfg.task.k = int()?,
            "items" => cfg.task.items = int()?,
            "vecs" => cfg.task.vecs = int()?,
            "model" => cfg.model = v.parse().map_err(|e| at(n, k, e))?,
            "d" => cfg.d = int()?,
            "n_q" => cfg.n_q = int()?,
            "n_r" => cfg.n_r = int()?,
            "alphas_learnable" => cfg.alphas_learnable = v.parse().map_err(|_| at(n, k, "expected true or false"))?,
            "lstm_hidden" => cfg.lstm_hidden = int()?,
            "optimizer" => optimizer = Some((n, v.clone())),
            "lr" => lr = Some(float()?),
            "beta1" => betas.0 = Some(float()?),
            "beta2" => betas.1 = Some(float()?),
            "batch" => cfg.batch = int()?,
            "iterations" => cfg.iterations = int()?,
            "episodes" => episodes = Some(int()?),
            "eval_interval" => cfg.eval_interval = int()?,
            "eval_episodes" => cfg.eval_episodes = int()?,
            "seed" => cfg.seed = v.parse().map_err(|_| at(n, k, "expected an unsigned integer"))?,
            "clip" => cfg.clip = float()?,
            "workers" => cfg.workers = int()?,
            "stop_accuracy" => cfg.stop_accuracy = optional(v, float)?,
            "stop_bit_error" => cfg.stop_bit_error = optional(v, float)?,
            "metrics" => cfg.metrics_path = optional(v, || Ok(PathBuf::from(v)))?,
            "checkpoint" => cfg.checkpoint_path = optional(v, || Ok(PathBuf::from(v)))?,
            _ => unreachable!("key list checked by parse_pairs"),
        }
    }
    if find("seed").is_none() {
        if let Some(s) = env_seed {
            cfg.seed = s
                .trim()
                .parse()
                .map_err(|_| Error::Invalid(format!("{SEED_ENV}='{s}' is not an unsigned integer")))?;
        }
    }
    if let Some(e) = episodes {
        if find("iterations").is_some() {
            return Err(Error::Invalid("set either 'iterations' or 'episodes', not both".into()));
        }
        cfg.iterations = e.div_ceil(cfg.batch.max(1));
    }
    let base_lr = lr.unwrap_or(cfg.optimizer.lr());
    cfg.optimizer = match optimizer {
        Some((n, name)) => match name.as_str() {
            "rmsprop" => OptimizerKind::RmsProp { lr: base_lr },
            "adam" => OptimizerKind::adam(base_lr),
            _ => return Err(at(n, "optimizer", "expected rmsprop or adam")),
        },
        None => match cfg.optimizer {
            OptimizerKind::RmsProp { .. } => OptimizerKind::RmsProp { lr: base_lr },
            OptimizerKind::Adam { beta1, beta2, .. } => OptimizerKind::Adam {
                lr: base_lr,
                beta1,
                beta2,
            },
        },
    };
    if let OptimizerKind::Adam { beta1, beta2, .. } = &mut cfg.optimizer {
        *beta1 = betas.0.unwrap_or(*beta1);
        *beta2 = betas.1.unwrap_or(*beta2);
    } else if betas.0.is_some() || betas.1.is_some() {
        return Err(Error::Invalid("beta1/beta2 only apply to the adam optimizer".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn optional<T>(v: &str, f: impl FnOnce() -> Result<T>) -> Result<Option<T>> {
    if v == "none" || v.is_empty() {
        Ok(None)
    } else {
        f().map(Some)
    }
}

fn at(line: usize, key: &str, msg: impl ToString) -> Error {
    Error::Parse {
        line,
        msg: format!("{key}: {}", msg.to_string()),
    }
}

/// Every field of `cfg` as config pairs; [`parse`] inverts it.
pub fn to_pairs(cfg: &RunConfig) -> Vec<(String, String)> {
    let opt = |o: Option<f64>| o.map_or("none".to_string(), |v| v.to_string());
    let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
    let mut v: Vec<(&str, String)> = vec![
        ("task", cfg.task.kind.tag().to_string()),
        ("bits", cfg.task.bits.to_string()),
        ("min_len", cfg.task.min_len.to_string()),
        ("max_len", cfg.task.max_len.to_string()),
        ("pairs", cfg.task.pairs.to_string()),
        ("m", cfg.task.m.to_string()),
        ("k", cfg.task.k.to_string()),
        ("items", cfg.task.items.to_string()),
        ("vecs", cfg.task.vecs.to_string()),
        ("model", cfg.model.to_string()),
        ("d", cfg.d.to_string()),
        ("n_q", cfg.n_q.to_string()),
        ("n_r", cfg.n_r.to_string()),
        ("alphas_learnable", cfg.alphas_learnable.to_string()),
        ("lstm_hidden", cfg.lstm_hidden.to_string()),
    ];
    match cfg.optimizer {
        OptimizerKind::RmsProp { lr } => {
            v.push(("optimizer", "rmsprop".into()));
            v.push(("lr", lr.to_string()));
        }
        OptimizerKind::Adam { lr, beta1, beta2 } => {
            v.push(("optimizer", "adam".into()));
            v.push(("lr", lr.to_string()));
            v.push(("beta1", beta1.to_string()));
            v.push(("beta2", beta2.to_string()));
        }
    }
    v.extend([
        ("batch", cfg.batch.to_string()),
        ("iterations", cfg.iterations.to_string()),
        ("eval_interval", cfg.eval_interval.to_string()),
        ("eval_episodes", cfg.eval_episodes.to_string()),
        ("seed", cfg.seed.to_string()),
        ("clip", cfg.clip.to_string()),
        ("workers", cfg.workers.to_string()),
        ("stop_accuracy", opt(cfg.stop_accuracy)),
        ("stop_bit_error", opt(cfg.stop_bit_error)),
        ("metrics", path(&cfg.metrics_path)),
        ("checkpoint", path(&cfg.checkpoint_path)),
    ]);
    v.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

pub fn to_text(cfg: &RunConfig) -> String {
    to_pairs(cfg).into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::ModelKind;

    #[test]
    fn comments_blank_lines_and_overrides() {
        let text = "# desk copy run\npreset = copy\n\nmodel = lstm  # baseline\nlr = 0.001\nseed = 5\n";
        let c = parse_with_seed_fallback(text, Some("99")).unwrap();
        assert_eq!(c.model, ModelKind::Lstm);
        assert_eq!(c.optimizer, OptimizerKind::RmsProp { lr: 0.001 });
        assert_eq!(c.seed, 5);
        assert_eq!(c.task.kind, TaskKind::Copy);
    }

    #[test]
    fn seed_falls_back_to_env_value() {
        assert_eq!(parse_with_seed_fallback("task = rar\n", Some("42")).unwrap().seed, 42);
        assert_eq!(parse_with_seed_fallback("task = rar\n", None).unwrap().seed, 0);
        assert!(parse_with_seed_fallback("task = rar\n", Some("x")).is_err());
    }

    #[test]
    fn bad_key_is_named() {
        let e = parse_with_seed_fallback("task = copy\nlearning_rate = 1\n", None).unwrap_err();
        assert!(
            matches!(&e, Error::Parse { line: 2, msg } if msg.contains("learning_rate")),
            "{e}"
        );
        let e = parse_with_seed_fallback("batch = many\n", None).unwrap_err();
        assert!(e.to_string().contains("batch"), "{e}");
        assert!(parse_with_seed_fallback("seed = 1\nseed = 2\n", None).is_err());
        assert!(parse_with_seed_fallback("no equals sign\n", None).is_err());
    }

    #[test]
    fn round_trip_through_text() {
        for p in RunConfig::PRESETS {
            let c = RunConfig::preset(p).unwrap();
            assert_eq!(parse_with_seed_fallback(&to_text(&c), Some("7")).unwrap(), c, "{p}");
        }
    }

    #[test]
    fn episodes_key_sets_iterations() {
        let c = parse_with_seed_fallback("batch = 32\nepisodes = 100\n", None).unwrap();
        assert_eq!(c.iterations, 4);
        assert!(parse_with_seed_fallback("episodes = 10\niterations = 3\n", None).is_err());
    }
}
