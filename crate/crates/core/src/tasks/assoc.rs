//! Character key-value recall: `k1 v1 k2 v2 ... ? q`, answer the digit bound
//! to letter `q` on the final step.
//!
//! Tokens are one-hot over 26 letters, 10 digits and the `?` marker.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tasks::{meta, one_hot, Builder, Episode, TaskConfig, TaskKind};
use crate::tensor::{Rng, Tensor};

pub const LETTERS: usize = 26;
pub const DIGITS: usize = 10;
pub const QUERY_TOKEN: usize = LETTERS + DIGITS;
pub const ASSOC_IN_DIM: usize = LETTERS + DIGITS + 1;

/// `pairs[i] = (letter, digit)` with distinct letters; `query` indexes the
/// pair being asked for.
pub fn assoc_episode(pairs: &[(usize, usize)], query: usize) -> Result<Episode> {
    if pairs.is_empty() || query >= pairs.len() {
        return Err(Error::Invalid("query must index one of the stored pairs".into()));
    }
    if pairs.len() > LETTERS {
        return Err(Error::Invalid(format!(
            "{} pairs exceed the {LETTERS}-letter key vocabulary",
            pairs.len()
        )));
    }
    for (i, &(k, v)) in pairs.iter().enumerate() {
        if k >= LETTERS || v >= DIGITS {
            return Err(Error::Invalid(format!("pair {i} = ({k}, {v}) is out of vocabulary")));
        }
        if pairs[..i].iter().any(|&(k2, _)| k2 == k) {
            return Err(Error::Invalid(format!("key {k} repeats")));
        }
    }
    let mut b = Builder::new(ASSOC_IN_DIM, DIGITS);
    for &(k, v) in pairs {
        b.step(&one_hot(ASSOC_IN_DIM, k), None);
        b.step(&one_hot(ASSOC_IN_DIM, LETTERS + v), None);
    }
    b.step(&one_hot(ASSOC_IN_DIM, QUERY_TOKEN), None);
    let (qk, qv) = pairs[query];
    b.step(&one_hot(ASSOC_IN_DIM, qk), Some(&one_hot(DIGITS, qv)));
    Ok(b.finish(
        TaskKind::AssocRetrieval,
        meta(&[("R", pairs.len().to_string()), ("query", query.to_string())]),
    ))
}

pub fn gen_assoc_retrieval(cfg: &TaskConfig, rng: &mut Rng) -> Result<Episode> {
    if cfg.pairs > LETTERS {
        return Err(Error::Invalid(format!(
            "{} pairs exceed the {LETTERS}-letter key vocabulary",
            cfg.pairs
        )));
    }
    let mut letters: Vec<usize> = (0..LETTERS).collect();
    rng.shuffle(&mut letters);
    let pairs: Vec<(usize, usize)> = letters[..cfg.pairs].iter().map(|&k| (k, rng.below(DIGITS))).collect();
    let query = rng.below(cfg.pairs);
    assoc_episode(&pairs, query)
}

fn token(row: &[f64]) -> Result<usize> {
    let hot: Vec<usize> = (0..row.len()).filter(|&i| row[i] == 1.0).collect();
    match hot.as_slice() {
        [i] => Ok(*i),
        _ => Err(Error::Invalid("assoc step is not one-hot".into())),
    }
}

/// Dictionary lookup over the decoded token stream.
pub(crate) fn oracle(ep: &Episode) -> Result<Tensor> {
    let t = ep.len();
    if t < 4 || !t.is_multiple_of(2) {
        return Err(Error::Invalid(format!("assoc episode has odd length {t}")));
    }
    let tokens: Vec<usize> = (0..t)
        .map(|i| token(ep.inputs.index0(i).data()))
        .collect::<Result<_>>()?;
    let mut table = HashMap::new();
    for pair in tokens[..t - 2].chunks(2) {
        table.insert(pair[0], pair[1] - LETTERS);
    }
    if tokens[t - 2] != QUERY_TOKEN {
        return Err(Error::Invalid("assoc episode lacks the query marker".into()));
    }
    let v = *table
        .get(&tokens[t - 1])
        .ok_or_else(|| Error::Invalid("query key was never stored".into()))?;
    let mut out = Tensor::zeros(ep.targets.shape());
    out.set(&[t - 1, v], 1.0);
    Ok(out)
}
