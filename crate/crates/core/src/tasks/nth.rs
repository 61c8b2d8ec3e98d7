//! Nth-farthest: `m` labelled vectors; report the label of the vector whose
//! Euclidean distance from the query-labelled vector ranks `n`-th from the
//! farthest. The candidate set includes the query vector itself (distance
//! 0), recorded as `self_included=true`.
//!
//! Each step is `vector (k) | label one-hot (m) | n one-hot (m) | query
//! label one-hot (m)`; the answer is scored on the final step.

use crate::error::{Error, Result};
use crate::tasks::{meta, one_hot, Builder, Episode, TaskConfig, TaskKind};
use crate::tensor::{Rng, Tensor};

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `labels` is a permutation of `0..m`; `n` is 1-based; `query_label` names
/// the reference vector. Fails when distances from the query tie.
pub fn nth_farthest_episode(vectors: &[Vec<f64>], labels: &[usize], n: usize, query_label: usize) -> Result<Episode> {
    build(vectors, labels, n, query_label)?.ok_or_else(|| Error::Invalid("distances from the query tie".into()))
}

fn build(vectors: &[Vec<f64>], labels: &[usize], n: usize, query_label: usize) -> Result<Option<Episode>> {
    let m = vectors.len();
    let k = vectors.first().map(|v| v.len()).unwrap_or(0);
    if m < 2 || k == 0 || vectors.iter().any(|v| v.len() != k) {
        return Err(Error::Invalid(
            "nth-farthest needs two or more equal-length vectors".into(),
        ));
    }
    let mut seen = vec![false; m];
    for &l in labels {
        if l >= m || std::mem::replace(&mut seen[l], true) {
            return Err(Error::Invalid("labels must be a permutation of 0..m".into()));
        }
    }
    if labels.len() != m || !(1..=m).contains(&n) || query_label >= m {
        return Err(Error::Invalid("n must lie in 1..=m and the query label in 0..m".into()));
    }
    let q = labels.iter().position(|&l| l == query_label).unwrap();
    let d: Vec<f64> = vectors.iter().map(|v| dist2(v, &vectors[q])).collect();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| d[b].total_cmp(&d[a]));
    if order.windows(2).any(|w| d[w[0]] == d[w[1]]) {
        return Ok(None);
    }
    let answer = labels[order[n - 1]];
    let mut b = Builder::new(k + 3 * m, m);
    for (t, v) in vectors.iter().enumerate() {
        let mut row = v.clone();
        row.extend(one_hot(m, labels[t]));
        row.extend(one_hot(m, n - 1));
        row.extend(one_hot(m, query_label));
        let target = one_hot(m, answer);
        b.step(&row, if t + 1 == m { Some(&target) } else { None });
    }
    Ok(Some(b.finish(
        TaskKind::NthFarthest,
        meta(&[
            ("m", m.to_string()),
            ("k", k.to_string()),
            ("n", n.to_string()),
            ("query", query_label.to_string()),
            ("self_included", "true".to_string()),
        ]),
    )))
}

pub fn gen_nth_farthest(cfg: &TaskConfig, rng: &mut Rng) -> Result<Episode> {
    loop {
        let vectors: Vec<Vec<f64>> = (0..cfg.m)
            .map(|_| (0..cfg.k).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .collect();
        let mut labels: Vec<usize> = (0..cfg.m).collect();
        rng.shuffle(&mut labels);
        let n = rng.range_inclusive(1, cfg.m);
        let query = rng.below(cfg.m);
        if let Some(ep) = build(&vectors, &labels, n, query)? {
            return Ok(ep);
        }
    }
}

/// Ranks every candidate by counting strictly farther vectors.
pub(crate) fn oracle(ep: &Episode) -> Result<Tensor> {
    let m = ep.n_o();
    let k = ep
        .in_dim()
        .checked_sub(3 * m)
        .ok_or_else(|| Error::Invalid("nth-farthest input width too small".into()))?;
    let rows: Vec<Vec<f64>> = (0..ep.len()).map(|t| ep.inputs.index0(t).data().to_vec()).collect();
    let hot = |r: &[f64]| r.iter().position(|&v| v == 1.0);
    let labels: Vec<usize> = rows
        .iter()
        .map(|r| hot(&r[k..k + m]))
        .collect::<Option<_>>()
        .ok_or_else(|| Error::Invalid("missing label one-hot".into()))?;
    let last = &rows[rows.len() - 1];
    let n = hot(&last[k + m..k + 2 * m]).ok_or_else(|| Error::Invalid("missing n one-hot".into()))? + 1;
    let ql = hot(&last[k + 2 * m..]).ok_or_else(|| Error::Invalid("missing query one-hot".into()))?;
    let q = labels
        .iter()
        .position(|&l| l == ql)
        .ok_or_else(|| Error::Invalid("query label not present".into()))?;
    let d = |i: usize| -> f64 { (0..k).map(|c| (rows[i][c] - rows[q][c]).powi(2)).sum::<f64>().sqrt() };
    let winner = (0..rows.len())
        .find(|&i| (0..rows.len()).filter(|&j| d(j) > d(i)).count() == n - 1)
        .ok_or_else(|| Error::Invalid("no candidate has the requested rank".into()))?;
    let mut out = Tensor::zeros(ep.targets.shape());
    out.set(&[rows.len() - 1, labels[winner]], 1.0);
    Ok(out)
}
