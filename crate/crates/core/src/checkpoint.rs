//! Named-tensor checkpoints: a plain-text header followed by a flat
//! little-endian `f64` payload.
//!
//! ```text
//! SAMSTM-CKPT 1
//! meta <key> <value>
//! count <N>
//! <name> <d0>x<d1>x... <byte offset>
//! ---
//! <payload>
//! ```
//!
//! Offsets are relative to the first payload byte and tensors are stored
//! back to back in header order.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &str = "SAMSTM-CKPT 1";
const SEPARATOR: &str = "---\n";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

impl Checkpoint {
    pub fn from_params(params: &dyn ParamSet, meta: Vec<(String, String)>) -> Self {
        Checkpoint {
            meta,
            tensors: params
                .named()
                .into_iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
        }
    }

    pub fn names(&self) -> Vec<&str> {
        self.tensors.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Like [`Self::get`] but the error lists the available names.
    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| {
            Error::Invalid(format!(
                "checkpoint has no parameter '{name}'; available: {}",
                self.names().join(", ")
            ))
        })
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Copies every tensor into `params`, which must hold exactly the same
    /// names and shapes.
    pub fn load_into(&self, params: &mut dyn ParamSet) -> Result<()> {
        let mut slots = params.named_mut();
        if slots.len() != self.tensors.len() {
            return Err(Error::Invalid(format!(
                "checkpoint holds {} tensors, model expects {}",
                self.tensors.len(),
                slots.len()
            )));
        }
        for (name, slot) in slots.iter_mut() {
            let t = self.require(name)?;
            if t.shape() != slot.shape() {
                return Err(Error::Shape {
                    op: "checkpoint_load",
                    lhs: t.shape().to_vec(),
                    rhs: slot.shape().to_vec(),
                });
            }
            **slot = t.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = format!("{MAGIC}\n");
        for (k, v) in &self.meta {
            let _ = writeln!(head, "meta {k} {v}");
        }
        let _ = writeln!(head, "count {}", self.tensors.len());
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            let _ = writeln!(head, "{name} {} {offset}", dims.join("x"));
            offset += t.numel() * 8;
        }
        head.push_str(SEPARATOR);
        let mut out = head.into_bytes();
        out.reserve(offset);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let sep = format!("\n{SEPARATOR}");
        let split = bytes
            .windows(sep.len())
            .position(|w| w == sep.as_bytes())
            .ok_or_else(|| parse_err(1, "checkpoint header lacks the '---' separator"))?;
        let head = std::str::from_utf8(&bytes[..split + 1]).map_err(|_| parse_err(1, "header is not UTF-8"))?;
        let payload = &bytes[split + sep.len()..];
        let mut lines = head.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, l)) if l == MAGIC => {}
            _ => return Err(parse_err(1, format!("expected '{MAGIC}'"))),
        }
        let mut ck = Checkpoint::default();
        let mut count = None;
        let mut expect_offset = 0usize;
        for (n, line) in lines {
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                ck.meta.push((k.to_string(), v.to_string()));
                continue;
            }
            if let Some(rest) = line.strip_prefix("count ") {
                count = Some(
                    rest.trim()
                        .parse::<usize>()
                        .map_err(|_| parse_err(n, "bad tensor count"))?,
                );
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 3 {
                return Err(parse_err(n, "expected '<name> <shape> <offset>'"));
            }
            let shape: Vec<usize> = f[1]
                .split('x')
                .map(|d| {
                    d.parse::<usize>()
                        .map_err(|_| parse_err(n, format!("bad shape '{}'", f[1])))
                })
                .collect::<Result<_>>()?;
            let offset: usize = f[2].parse().map_err(|_| parse_err(n, "bad offset"))?;
            if offset != expect_offset {
                return Err(parse_err(n, format!("offset {offset} should be {expect_offset}")));
            }
            let numel: usize = shape.iter().product();
            let end = offset + numel * 8;
            if end > payload.len() {
                return Err(parse_err(n, format!("tensor '{}' runs past the payload", f[0])));
            }
            let data = payload[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            ck.tensors.push((
                f[0].to_string(),
                Tensor::new(shape, data).map_err(|e| parse_err(n, e.to_string()))?,
            ));
            expect_offset = end;
        }
        if count != Some(ck.tensors.len()) {
            return Err(parse_err(
                1,
                format!("count {count:?} disagrees with {} tensors", ck.tensors.len()),
            ));
        }
        if expect_offset != payload.len() {
            return Err(parse_err(1, "payload has trailing bytes"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
