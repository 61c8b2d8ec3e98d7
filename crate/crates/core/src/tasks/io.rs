//! Line-oriented episode files (`.ep`).
//!
//! ```text
//! format-version: 1
//! task=copy T=4 in_dim=10 n_o=8 L=1
//! <in_dim input floats> <n_o target floats> <mask bit>
//! ...
//! ```
//!
//! One header line per episode followed by `T` step lines. Floats use the
//! shortest representation that parses back to the same value.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tasks::{Episode, TaskKind};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

const RESERVED: [&str; 4] = ["task", "T", "in_dim", "n_o"];

pub fn write_episodes(episodes: &[Episode]) -> String {
    let mut out = format!("format-version: {FORMAT_VERSION}\n");
    for ep in episodes {
        let _ = write!(
            out,
            "task={} T={} in_dim={} n_o={}",
            ep.task,
            ep.len(),
            ep.in_dim(),
            ep.n_o()
        );
        for (k, v) in &ep.meta {
            let _ = write!(out, " {k}={v}");
        }
        out.push('\n');
        for t in 0..ep.len() {
            let fields = ep
                .inputs
                .index0(t)
                .data()
                .iter()
                .chain(ep.targets.index0(t).data())
                .map(|v| v.to_string())
                .chain(std::iter::once((ep.mask[t] as u8).to_string()))
                .collect::<Vec<_>>();
            out.push_str(&fields.join(" "));
            out.push('\n');
        }
    }
    out
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

/// Task, `T`, `in_dim`, `n_o` and the remaining `key=value` metadata.
type Header = (TaskKind, usize, usize, usize, BTreeMap<String, String>);

fn parse_header(line_no: usize, line: &str) -> Result<Header> {
    let mut fixed: BTreeMap<&str, &str> = BTreeMap::new();
    let mut meta = BTreeMap::new();
    for tok in line.split_whitespace() {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| parse_err(line_no, format!("header field '{tok}' lacks '='")))?;
        if RESERVED.contains(&k) {
            if fixed.insert(k, v).is_some() {
                return Err(parse_err(line_no, format!("header field '{k}' repeats")));
            }
        } else if meta.insert(k.to_string(), v.to_string()).is_some() {
            return Err(parse_err(line_no, format!("meta key '{k}' repeats")));
        }
    }
    let get = |k: &str| {
        fixed
            .get(k)
            .copied()
            .ok_or_else(|| parse_err(line_no, format!("header lacks '{k}'")))
    };
    let task: TaskKind = get("task")?
        .parse()
        .map_err(|e: Error| parse_err(line_no, e.to_string()))?;
    let num = |k: &str| -> Result<usize> {
        let v = get(k)?;
        match v.parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(parse_err(
                line_no,
                format!("'{k}' must be a positive integer, got '{v}'"),
            )),
        }
    };
    Ok((task, num("T")?, num("in_dim")?, num("n_o")?, meta))
}

pub fn read_episodes(text: &str) -> Result<Vec<Episode>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (n, first) = lines.next().ok_or_else(|| parse_err(1, "empty episode file"))?;
    let version = first
        .strip_prefix("format-version:")
        .ok_or_else(|| parse_err(n, "missing 'format-version:' header"))?
        .trim();
    if version != FORMAT_VERSION.to_string() {
        return Err(parse_err(n, format!("unsupported format version '{version}'")));
    }
    let mut out = Vec::new();
    while let Some((n, header)) = lines.next() {
        if header.trim().is_empty() {
            continue;
        }
        let (task, t, in_dim, n_o, meta) = parse_header(n, header)?;
        let mut inputs = Vec::with_capacity(t * in_dim);
        let mut targets = Vec::with_capacity(t * n_o);
        let mut mask = Vec::with_capacity(t);
        for step in 0..t {
            let (n, line) = lines
                .next()
                .ok_or_else(|| parse_err(n + step + 1, format!("episode ends after {step} of {t} steps")))?;
            let vals: Vec<&str> = line.split_whitespace().collect();
            if vals.len() != in_dim + n_o + 1 {
                return Err(parse_err(
                    n,
                    format!("expected {} fields, found {}", in_dim + n_o + 1, vals.len()),
                ));
            }
            for (i, s) in vals[..in_dim + n_o].iter().enumerate() {
                let v: f64 = s
                    .parse()
                    .map_err(|_| parse_err(n, format!("field {} '{s}' is not a number", i + 1)))?;
                if i < in_dim {
                    inputs.push(v);
                } else {
                    targets.push(v);
                }
            }
            mask.push(match vals[in_dim + n_o] {
                "0" => 0.0,
                "1" => 1.0,
                other => return Err(parse_err(n, format!("mask bit '{other}' is not 0 or 1"))),
            });
        }
        let ep = Episode {
            task,
            inputs: Tensor::new(vec![t, in_dim], inputs)?,
            targets: Tensor::new(vec![t, n_o], targets)?,
            mask,
            meta,
        };
        ep.check_shape().map_err(|e| parse_err(n, e.to_string()))?;
        out.push(ep);
    }
    Ok(out)
}
