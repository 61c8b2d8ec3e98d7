//! Relational associative recall: `I` items of `V` bit vectors, then a query
//! item whose last bit selects the mode (1: farthest, 0: closest). The
//! answer is the stored item at the extreme Euclidean distance from the
//! query, skipping items equal to it. The flag position is left out of every
//! distance.
//!
//! Channels: `w` data bits, item-start marker, query marker, go. Layout:
//! `I·V` item steps, `V` query steps, `V` decode steps.

use crate::error::{Error, Result};
use crate::tasks::{meta, random_bits, Builder, Episode, TaskConfig, TaskKind};
use crate::tensor::{Rng, Tensor};

fn flat(item: &[Vec<f64>]) -> Vec<f64> {
    item.concat()
}

/// Squared distance over every position except the last (the flag).
fn dist2(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() - 1;
    (0..n).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
}

/// Index of the selected item, or `None` when no item differs from the
/// query or the extreme distance is shared by several items.
pub fn rar_select(items: &[Vec<Vec<f64>>], query: &[Vec<f64>]) -> Option<usize> {
    let q = flat(query);
    let farthest = *q.last()? == 1.0;
    let d: Vec<(usize, f64)> = items
        .iter()
        .enumerate()
        .map(|(i, it)| (i, dist2(&flat(it), &q)))
        .filter(|&(_, d)| d > 0.0)
        .collect();
    let best = if farthest {
        d.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max)
    } else {
        d.iter().map(|p| p.1).fold(f64::INFINITY, f64::min)
    };
    let hits: Vec<usize> = d.iter().filter(|p| p.1 == best).map(|p| p.0).collect();
    match hits.as_slice() {
        [i] => Some(*i),
        _ => None,
    }
}

pub fn rar_episode(items: &[Vec<Vec<f64>>], query: &[Vec<f64>]) -> Result<Episode> {
    let v = query.len();
    let w = query.first().map(|r| r.len()).unwrap_or(0);
    let well_formed = items.len() >= 2
        && v > 0
        && w > 0
        && query.iter().all(|r| r.len() == w)
        && items.iter().all(|it| it.len() == v && it.iter().all(|r| r.len() == w));
    if !well_formed {
        return Err(Error::Invalid(
            "rar needs two or more items and a query of the same V×w shape".into(),
        ));
    }
    let target = rar_select(items, query)
        .ok_or_else(|| Error::Invalid("rar selection is ambiguous or every item equals the query".into()))?;
    let mut b = Builder::new(w + 3, w);
    for it in items {
        for (j, r) in it.iter().enumerate() {
            let mut row = r.clone();
            row.extend([if j == 0 { 1.0 } else { 0.0 }, 0.0, 0.0]);
            b.step(&row, None);
        }
    }
    for r in query {
        let mut row = r.clone();
        row.extend([0.0, 1.0, 0.0]);
        b.step(&row, None);
    }
    let mut go = vec![0.0; w + 3];
    go[w + 2] = 1.0;
    for r in &items[target] {
        b.step(&go, Some(r));
    }
    let flag = query[v - 1][w - 1];
    Ok(b.finish(
        TaskKind::Rar,
        meta(&[
            ("I", items.len().to_string()),
            ("V", v.to_string()),
            ("w", w.to_string()),
            ("flag", (flag as u8).to_string()),
            ("target", target.to_string()),
        ]),
    ))
}

/// Random items and query; redrawn until the selection is unambiguous.
pub fn gen_rar(cfg: &TaskConfig, rng: &mut Rng) -> Result<Episode> {
    let draw = |rng: &mut Rng| -> Vec<Vec<f64>> { (0..cfg.vecs).map(|_| random_bits(rng, cfg.bits)).collect() };
    loop {
        let items: Vec<Vec<Vec<f64>>> = (0..cfg.items).map(|_| draw(rng)).collect();
        let query = draw(rng);
        if rar_select(&items, &query).is_some() {
            return rar_episode(&items, &query);
        }
    }
}

struct Decoded {
    items: Vec<Vec<Vec<f64>>>,
    query: Vec<Vec<f64>>,
    decode_start: usize,
}

fn decode(ep: &Episode) -> Result<Decoded> {
    let w = ep.n_o();
    let rows: Vec<Vec<f64>> = (0..ep.len()).map(|t| ep.inputs.index0(t).data().to_vec()).collect();
    let mut items: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut query = Vec::new();
    let mut t = 0;
    while t < rows.len() && rows[t][w + 1] == 0.0 && rows[t][w + 2] == 0.0 {
        if rows[t][w] == 1.0 {
            items.push(Vec::new());
        }
        items
            .last_mut()
            .ok_or_else(|| Error::Invalid("rar data precedes the first item marker".into()))?
            .push(rows[t][..w].to_vec());
        t += 1;
    }
    while t < rows.len() && rows[t][w + 1] == 1.0 {
        query.push(rows[t][..w].to_vec());
        t += 1;
    }
    if items.is_empty() || query.is_empty() {
        return Err(Error::Invalid("rar episode lacks items or a query".into()));
    }
    Ok(Decoded {
        items,
        query,
        decode_start: t,
    })
}

/// Exhaustive distance ranking over the decoded items.
pub(crate) fn oracle(ep: &Episode) -> Result<Tensor> {
    let dec = decode(ep)?;
    let q: Vec<f64> = dec.query.concat();
    let n = q.len() - 1;
    let farthest = q[n] == 1.0;
    let mut best: Option<(usize, f64)> = None;
    let mut tied = false;
    for (i, it) in dec.items.iter().enumerate() {
        let x: Vec<f64> = it.concat();
        if x.len() != q.len() {
            return Err(Error::Invalid("rar item and query lengths differ".into()));
        }
        let d = (0..n).map(|c| (x[c] - q[c]).powi(2)).sum::<f64>().sqrt();
        if d == 0.0 {
            continue;
        }
        match best {
            None => best = Some((i, d)),
            Some((_, bd)) if d == bd => tied = true,
            Some((_, bd)) if (farthest && d > bd) || (!farthest && d < bd) => {
                best = Some((i, d));
                tied = false;
            }
            _ => {}
        }
    }
    let (sel, _) = best.ok_or_else(|| Error::Invalid("every rar item equals the query".into()))?;
    if tied {
        return Err(Error::Invalid("rar selection is ambiguous".into()));
    }
    let mut out = Tensor::zeros(ep.targets.shape());
    for (j, r) in dec.items[sel].iter().enumerate() {
        for (c, &v) in r.iter().enumerate() {
            out.set(&[dec.decode_start + j, c], v);
        }
    }
    Ok(out)
}

/// Bit error per sequence of a guesser that copies one of the wrong items:
/// the mean over episodes of the mean Hamming distance between the target
/// item and every other stored item.
pub fn rar_plateau(episodes: &[Episode]) -> Result<f64> {
    if episodes.is_empty() {
        return Err(Error::Invalid("no episodes".into()));
    }
    let mut total = 0.0;
    for ep in episodes {
        let dec = decode(ep)?;
        let sel =
            rar_select(&dec.items, &dec.query).ok_or_else(|| Error::Invalid("rar selection is ambiguous".into()))?;
        let target = dec.items[sel].concat();
        let others: Vec<f64> = dec
            .items
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != sel)
            .map(|(_, it)| it.concat().iter().zip(&target).filter(|(a, b)| a != b).count() as f64)
            .collect();
        total += others.iter().sum::<f64>() / others.len() as f64;
    }
    Ok(total / episodes.len() as f64)
}
