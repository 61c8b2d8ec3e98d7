//! Evaluation metrics and the per-eval log.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mismatched bits on masked rows after thresholding `probs` at 0.5.
pub fn bit_errors(probs: &Tensor, targets: &Tensor, mask: &[f64]) -> usize {
    let w = targets.shape()[1];
    let mut errs = 0;
    for (t, &m) in mask.iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        for c in 0..w {
            let bit = if probs.data()[t * w + c] > 0.5 { 1.0 } else { 0.0 };
            if bit != targets.data()[t * w + c] {
                errs += 1;
            }
        }
    }
    errs
}

/// Mean over sequences of the masked bit-error count.
pub fn bit_error_per_sequence(probs: &[Tensor], targets: &[Tensor], masks: &[Vec<f64>]) -> f64 {
    if probs.is_empty() {
        return 0.0;
    }
    let total: usize = probs
        .iter()
        .zip(targets)
        .zip(masks)
        .map(|((p, t), m)| bit_errors(p, t, m))
        .sum();
    total as f64 / probs.len() as f64
}

/// One evaluation record.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub iteration: usize,
    pub loss: f64,
    pub bit_error: f64,
    pub accuracy: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub records: Vec<Record>,
}

impl MetricsLog {
    pub const HEADER: &'static str = "iteration,loss,bit_error,accuracy,seconds";

    pub fn push(&mut self, r: Record) -> Result<()> {
        if let Some(last) = self.records.last() {
            if r.iteration <= last.iteration {
                return Err(Error::Invalid(format!(
                    "metrics iteration {} does not follow {}",
                    r.iteration, last.iteration
                )));
            }
        }
        self.records.push(r);
        Ok(())
    }

    pub fn last(&self) -> Option<&Record> {
        self.records.last()
    }

    pub fn best_accuracy(&self) -> f64 {
        self.records.iter().map(|r| r.accuracy).fold(0.0, f64::max)
    }

    pub fn best_bit_error(&self) -> f64 {
        self.records.iter().map(|r| r.bit_error).fold(f64::INFINITY, f64::min)
    }

    /// Equality ignoring wall-clock time.
    pub fn same_trajectory(&self, other: &MetricsLog) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                a.iteration == b.iteration
                    && a.loss.to_bits() == b.loss.to_bits()
                    && a.bit_error.to_bits() == b.bit_error.to_bits()
                    && a.accuracy.to_bits() == b.accuracy.to_bits()
            })
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.3}",
                r.iteration, r.loss, r.bit_error, r.accuracy, r.seconds
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == Self::HEADER => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("expected header '{}'", Self::HEADER),
                })
            }
        }
        let mut log = MetricsLog::default();
        for (i, line) in lines {
            let err = |msg: &str| Error::Parse {
                line: i + 1,
                msg: msg.to_string(),
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(err("expected 5 comma-separated fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| err("bad number"));
            log.push(Record {
                iteration: f[0].parse().map_err(|_| err("bad iteration"))?,
                loss: num(f[1])?,
                bit_error: num(f[2])?,
                accuracy: num(f[3])?,
                seconds: num(f[4])?,
            })
            .map_err(|e| err(&e.to_string()))?;
        }
        Ok(log)
    }
}
