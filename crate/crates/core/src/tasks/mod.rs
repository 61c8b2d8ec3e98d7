//! Synthetic episode generators, each paired with an independent
//! brute-force oracle that re-derives the targets from the inputs alone.
//!
//! Generators are pure functions of `(TaskConfig, Rng)`. Batches draw each
//! episode from its own stream id, so the output does not depend on how many
//! workers produced it.

mod assoc;
mod io;
mod nth;
mod rar;
mod sequence;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

pub use assoc::{assoc_episode, gen_assoc_retrieval, ASSOC_IN_DIM, DIGITS, LETTERS, QUERY_TOKEN};
pub use io::{read_episodes, write_episodes, FORMAT_VERSION};
pub use nth::{gen_nth_farthest, nth_farthest_episode};
pub use rar::{gen_rar, rar_episode, rar_plateau, rar_select};
pub use sequence::{copy_episode, gen_copy, gen_priority_sort, priority_sort_episode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskKind {
    Copy,
    PrioritySort,
    AssocRetrieval,
    NthFarthest,
    Rar,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::Copy,
        TaskKind::PrioritySort,
        TaskKind::AssocRetrieval,
        TaskKind::NthFarthest,
        TaskKind::Rar,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::PrioritySort => "priority-sort",
            TaskKind::AssocRetrieval => "assoc",
            TaskKind::NthFarthest => "nth-farthest",
            TaskKind::Rar => "rar",
        }
    }

    /// Classification tasks score a single masked step with softmax
    /// cross-entropy; the rest are per-bit sigmoid tasks.
    pub fn is_classification(self) -> bool {
        matches!(self, TaskKind::AssocRetrieval | TaskKind::NthFarthest)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL.into_iter().find(|k| k.tag() == s).ok_or_else(|| {
            let known: Vec<&str> = TaskKind::ALL.iter().map(|k| k.tag()).collect();
            Error::Invalid(format!("unknown task '{s}' (known: {})", known.join(", ")))
        })
    }
}

/// Task sizes. Only the fields relevant to `kind` are read.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskConfig {
    pub kind: TaskKind,
    /// Bit width `w` of copy, sort and RAR vectors.
    pub bits: usize,
    /// Sequence length range for copy (`L`) and sort (`N`).
    pub min_len: usize,
    pub max_len: usize,
    /// Key-value pairs `R` for associative retrieval.
    pub pairs: usize,
    /// Vector count `m` and dimension `k` for Nth-farthest.
    pub m: usize,
    pub k: usize,
    /// Items `I` and vectors per item `V` for RAR.
    pub items: usize,
    pub vecs: usize,
}

impl TaskConfig {
    /// Desk-scale defaults.
    pub fn new(kind: TaskKind) -> Self {
        let (min_len, max_len) = match kind {
            TaskKind::PrioritySort => (2, 8),
            _ => (1, 10),
        };
        TaskConfig {
            kind,
            bits: 8,
            min_len,
            max_len,
            pairs: 4,
            m: 4,
            k: 8,
            items: 4,
            vecs: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("bits", self.bits),
            ("min_len", self.min_len),
            ("max_len", self.max_len),
            ("pairs", self.pairs),
            ("m", self.m),
            ("k", self.k),
            ("items", self.items),
            ("vecs", self.vecs),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Invalid(format!("task {name} must be positive")));
            }
        }
        match self.kind {
            TaskKind::Copy | TaskKind::PrioritySort if self.min_len > self.max_len => Err(Error::Invalid(format!(
                "min_len {} exceeds max_len {}",
                self.min_len, self.max_len
            ))),
            TaskKind::AssocRetrieval if self.pairs > LETTERS => Err(Error::Invalid(format!(
                "{} pairs exceed the {LETTERS}-letter key vocabulary",
                self.pairs
            ))),
            TaskKind::NthFarthest if self.m < 2 => Err(Error::Invalid("nth-farthest needs at least 2 vectors".into())),
            TaskKind::Rar if self.items < 2 || self.bits * self.vecs < 2 => {
                Err(Error::Invalid("rar needs at least 2 items and 2 bits per item".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn in_dim(&self) -> usize {
        match self.kind {
            TaskKind::Copy => self.bits + 2,
            TaskKind::PrioritySort => self.bits + 3,
            TaskKind::AssocRetrieval => ASSOC_IN_DIM,
            TaskKind::NthFarthest => self.k + 3 * self.m,
            TaskKind::Rar => self.bits + 3,
        }
    }

    pub fn n_o(&self) -> usize {
        match self.kind {
            TaskKind::Copy | TaskKind::PrioritySort | TaskKind::Rar => self.bits,
            TaskKind::AssocRetrieval => DIGITS,
            TaskKind::NthFarthest => self.m,
        }
    }
}

/// One supervised sequence. Targets of unmasked steps are all zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub task: TaskKind,
    pub inputs: Tensor,
    pub targets: Tensor,
    pub mask: Vec<f64>,
    pub meta: BTreeMap<String, String>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn in_dim(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn n_o(&self) -> usize {
        self.targets.shape()[1]
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        self.meta
            .get(key)
            .ok_or_else(|| Error::Invalid(format!("episode meta lacks '{key}'")))?
            .parse()
            .map_err(|_| Error::Invalid(format!("episode meta '{key}' is not an integer")))
    }

    /// Target class of a classification episode (argmax of the final masked
    /// row).
    pub fn target_class(&self) -> Option<usize> {
        let t = self.mask.iter().rposition(|&m| m != 0.0)?;
        let row = self.targets.index0(t);
        row.data().iter().position(|&v| v == 1.0)
    }

    /// Checks the structural invariants: matching lengths, binary mask and
    /// zero targets on unmasked steps.
    pub fn check_shape(&self) -> Result<()> {
        let t = self.mask.len();
        if self.inputs.rank() != 2 || self.targets.rank() != 2 {
            return Err(Error::Invalid("episode inputs and targets must be matrices".into()));
        }
        if self.inputs.shape()[0] != t || self.targets.shape()[0] != t {
            return Err(Error::Invalid(format!(
                "episode length mismatch: inputs {:?}, targets {:?}, mask {t}",
                self.inputs.shape(),
                self.targets.shape()
            )));
        }
        for (i, &m) in self.mask.iter().enumerate() {
            if m != 0.0 && m != 1.0 {
                return Err(Error::Invalid(format!("mask entry {i} is {m}, not 0 or 1")));
            }
            if m == 0.0 && self.targets.index0(i).data().iter().any(|&v| v != 0.0) {
                return Err(Error::Invalid(format!("unmasked step {i} has a nonzero target")));
            }
        }
        if !self.mask.iter().any(|&m| m != 0.0) {
            return Err(Error::Invalid("episode has no masked steps".into()));
        }
        Ok(())
    }
}

pub(crate) struct Builder {
    inputs: Vec<f64>,
    targets: Vec<f64>,
    mask: Vec<f64>,
    in_dim: usize,
    n_o: usize,
}

impl Builder {
    pub(crate) fn new(in_dim: usize, n_o: usize) -> Self {
        Builder {
            inputs: Vec::new(),
            targets: Vec::new(),
            mask: Vec::new(),
            in_dim,
            n_o,
        }
    }

    /// Appends a step; `target = None` leaves it unmasked with a zero target.
    pub(crate) fn step(&mut self, input: &[f64], target: Option<&[f64]>) {
        debug_assert_eq!(input.len(), self.in_dim);
        self.inputs.extend_from_slice(input);
        match target {
            Some(t) => {
                debug_assert_eq!(t.len(), self.n_o);
                self.targets.extend_from_slice(t);
                self.mask.push(1.0);
            }
            None => {
                self.targets.extend(std::iter::repeat_n(0.0, self.n_o));
                self.mask.push(0.0);
            }
        }
    }

    pub(crate) fn finish(self, task: TaskKind, meta: BTreeMap<String, String>) -> Episode {
        let t = self.mask.len();
        Episode {
            task,
            inputs: Tensor::from_parts(vec![t, self.in_dim], self.inputs),
            targets: Tensor::from_parts(vec![t, self.n_o], self.targets),
            mask: self.mask,
            meta,
        }
    }
}

pub(crate) fn meta(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

pub(crate) fn one_hot(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

pub(crate) fn random_bits(rng: &mut Rng, w: usize) -> Vec<f64> {
    (0..w).map(|_| if rng.bit() { 1.0 } else { 0.0 }).collect()
}

/// Draws one episode of `cfg.kind`.
pub fn generate(cfg: &TaskConfig, rng: &mut Rng) -> Result<Episode> {
    cfg.validate()?;
    match cfg.kind {
        TaskKind::Copy => gen_copy(cfg, rng),
        TaskKind::PrioritySort => gen_priority_sort(cfg, rng),
        TaskKind::AssocRetrieval => gen_assoc_retrieval(cfg, rng),
        TaskKind::NthFarthest => gen_nth_farthest(cfg, rng),
        TaskKind::Rar => gen_rar(cfg, rng),
    }
}

/// Recomputes the targets of `ep` from its inputs by brute force and
/// compares them with the stored ones.
pub fn validate(ep: &Episode) -> Result<()> {
    ep.check_shape()?;
    let want = match ep.task {
        TaskKind::Copy => sequence::oracle_copy(ep)?,
        TaskKind::PrioritySort => sequence::oracle_priority_sort(ep)?,
        TaskKind::AssocRetrieval => assoc::oracle(ep)?,
        TaskKind::NthFarthest => nth::oracle(ep)?,
        TaskKind::Rar => rar::oracle(ep)?,
    };
    if want != ep.targets {
        return Err(Error::Invalid(format!(
            "{} episode targets disagree with the oracle",
            ep.task
        )));
    }
    Ok(())
}

/// Generates `count` validated episodes; episode `i` uses stream
/// `stream_base + i`. `workers > 1` splits the indices across threads
/// without changing the result.
pub fn generate_batch(
    cfg: &TaskConfig,
    seed: u64,
    stream_base: u64,
    count: usize,
    workers: usize,
) -> Result<Vec<Episode>> {
    cfg.validate()?;
    let one = |i: usize| -> Result<Episode> {
        let mut rng = Rng::new(seed, stream_base + i as u64);
        let ep = generate(cfg, &mut rng)?;
        validate(&ep)?;
        Ok(ep)
    };
    let workers = workers.max(1).min(count.max(1));
    if workers == 1 {
        return (0..count).map(one).collect();
    }
    let chunk = count.div_ceil(workers);
    let parts: Vec<Result<Vec<Episode>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let one = &one;
                s.spawn(move || (w * chunk..((w + 1) * chunk).min(count)).map(one).collect())
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("episode worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(count);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_generator_passes_its_oracle() {
        for kind in TaskKind::ALL {
            let cfg = TaskConfig::new(kind);
            let eps = generate_batch(&cfg, 11, 0, 200, 1).unwrap();
            for ep in &eps {
                assert_eq!(ep.in_dim(), cfg.in_dim());
                assert_eq!(ep.n_o(), cfg.n_o());
                validate(ep).unwrap();
            }
        }
    }

    #[test]
    fn fixed_seed_reproduces_stream() {
        for kind in TaskKind::ALL {
            let cfg = TaskConfig::new(kind);
            let a = generate_batch(&cfg, 5, 100, 20, 1).unwrap();
            let b = generate_batch(&cfg, 5, 100, 20, 3).unwrap();
            assert_eq!(write_episodes(&a), write_episodes(&b));
        }
    }

    #[test]
    fn task_tags_round_trip() {
        for kind in TaskKind::ALL {
            assert_eq!(kind.tag().parse::<TaskKind>().unwrap(), kind);
        }
        assert!("bogus".parse::<TaskKind>().is_err());
    }

    #[test]
    fn tampered_targets_are_caught() {
        for kind in TaskKind::ALL {
            let mut ep = generate(&TaskConfig::new(kind), &mut Rng::new(1, 0)).unwrap();
            let t = ep.mask.iter().rposition(|&m| m == 1.0).unwrap();
            let n_o = ep.n_o();
            // move the single hot entry (classification) or flip a bit
            let row: Vec<f64> = ep.targets.index0(t).data().to_vec();
            let new_row: Vec<f64> = if kind.is_classification() {
                let hot = row.iter().position(|&v| v == 1.0).unwrap();
                one_hot(n_o, (hot + 1) % n_o)
            } else {
                let mut r = row.clone();
                r[0] = 1.0 - r[0];
                r
            };
            for (c, v) in new_row.iter().enumerate() {
                ep.targets.set(&[t, c], *v);
            }
            assert!(validate(&ep).is_err(), "{kind}");
        }
    }
}
