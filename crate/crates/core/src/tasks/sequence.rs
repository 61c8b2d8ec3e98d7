//! Copy and priority sort.
//!
//! Copy channels: `w` data bits, start delimiter, go delimiter. Layout:
//! start, `L` data steps, go, `L` zero decode steps.
//!
//! Priority sort channels: `w` data bits, priority, start, go. Layout as for
//! copy, with `N` items.

use crate::error::{Error, Result};
use crate::tasks::{meta, random_bits, Builder, Episode, TaskConfig, TaskKind};
use crate::tensor::{Rng, Tensor};

pub fn copy_episode(vectors: &[Vec<f64>]) -> Result<Episode> {
    let w = vectors.first().map(|v| v.len()).unwrap_or(0);
    if w == 0 || vectors.iter().any(|v| v.len() != w) {
        return Err(Error::Invalid("copy needs one or more equal-width vectors".into()));
    }
    let l = vectors.len();
    let mut b = Builder::new(w + 2, w);
    let mut row = vec![0.0; w + 2];
    row[w] = 1.0;
    b.step(&row, None);
    for v in vectors {
        let mut row = v.clone();
        row.extend([0.0, 0.0]);
        b.step(&row, None);
    }
    let mut row = vec![0.0; w + 2];
    row[w + 1] = 1.0;
    b.step(&row, None);
    for v in vectors {
        b.step(&vec![0.0; w + 2], Some(v));
    }
    Ok(b.finish(TaskKind::Copy, meta(&[("L", l.to_string())])))
}

pub fn gen_copy(cfg: &TaskConfig, rng: &mut Rng) -> Result<Episode> {
    let l = rng.range_inclusive(cfg.min_len, cfg.max_len);
    let vectors: Vec<Vec<f64>> = (0..l).map(|_| random_bits(rng, cfg.bits)).collect();
    copy_episode(&vectors)
}

/// Targets are the vectors in descending priority; equal priorities keep
/// input order.
pub fn priority_sort_episode(vectors: &[Vec<f64>], priorities: &[f64]) -> Result<Episode> {
    let w = vectors.first().map(|v| v.len()).unwrap_or(0);
    if w == 0 || vectors.iter().any(|v| v.len() != w) || priorities.len() != vectors.len() {
        return Err(Error::Invalid(
            "priority sort needs equal-width vectors with one priority each".into(),
        ));
    }
    let n = vectors.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| priorities[b].total_cmp(&priorities[a]));
    let mut b = Builder::new(w + 3, w);
    let mut row = vec![0.0; w + 3];
    row[w + 1] = 1.0;
    b.step(&row, None);
    for (v, &p) in vectors.iter().zip(priorities) {
        let mut row = v.clone();
        row.extend([p, 0.0, 0.0]);
        b.step(&row, None);
    }
    let mut row = vec![0.0; w + 3];
    row[w + 2] = 1.0;
    b.step(&row, None);
    for &i in &order {
        b.step(&vec![0.0; w + 3], Some(&vectors[i]));
    }
    Ok(b.finish(TaskKind::PrioritySort, meta(&[("N", n.to_string())])))
}

pub fn gen_priority_sort(cfg: &TaskConfig, rng: &mut Rng) -> Result<Episode> {
    let n = rng.range_inclusive(cfg.min_len, cfg.max_len);
    let vectors: Vec<Vec<f64>> = (0..n).map(|_| random_bits(rng, cfg.bits)).collect();
    let priorities: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
    priority_sort_episode(&vectors, &priorities)
}

/// Data rows between the start and go delimiters.
fn data_rows(ep: &Episode, start_ch: usize, go_ch: usize) -> Result<(Vec<Vec<f64>>, usize)> {
    let t = ep.len();
    let row = |i: usize| ep.inputs.index0(i).data().to_vec();
    if t == 0 || row(0)[start_ch] != 1.0 {
        return Err(Error::Invalid("episode does not open with a start delimiter".into()));
    }
    let go = (1..t)
        .find(|&i| row(i)[go_ch] == 1.0)
        .ok_or_else(|| Error::Invalid("episode has no go delimiter".into()))?;
    Ok(((1..go).map(row).collect(), go))
}

pub(crate) fn oracle_copy(ep: &Episode) -> Result<Tensor> {
    let w = ep.n_o();
    let (rows, go) = data_rows(ep, w, w + 1)?;
    let mut out = Tensor::zeros(ep.targets.shape());
    for (j, r) in rows.iter().enumerate() {
        for c in 0..w {
            out.set(&[go + 1 + j, c], r[c]);
        }
    }
    Ok(out)
}

pub(crate) fn oracle_priority_sort(ep: &Episode) -> Result<Tensor> {
    let w = ep.n_o();
    let (rows, go) = data_rows(ep, w + 1, w + 2)?;
    // insertion sort on (priority desc, position asc), independent of the
    // generator's library sort
    let mut sorted: Vec<usize> = Vec::new();
    for i in 0..rows.len() {
        let pos = sorted
            .iter()
            .position(|&j| rows[j][w] < rows[i][w])
            .unwrap_or(sorted.len());
        sorted.insert(pos, i);
    }
    let mut out = Tensor::zeros(ep.targets.shape());
    for (j, &i) in sorted.iter().enumerate() {
        for c in 0..w {
            out.set(&[go + 1 + j, c], rows[i][c]);
        }
    }
    Ok(out)
}
