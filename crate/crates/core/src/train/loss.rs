//! Value-level wrappers around the graph losses.

use crate::error::Result;
use crate::graph::Graph;
use crate::tensor::Tensor;

/// Mean sigmoid cross-entropy over the bits of masked rows of `logits`
/// (`T×w`).
pub fn loss_bits(logits: &Tensor, targets: &Tensor, mask: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let z = g.constant(logits.clone());
    let l = g.bce_with_logits(z, targets, mask)?;
    Ok(g.value(l).item())
}

/// Softmax cross-entropy of a logit vector against a class index.
pub fn loss_classify(logits: &Tensor, target: usize) -> Result<f64> {
    let mut g = Graph::new();
    let z = g.constant(logits.clone());
    let l = g.softmax_ce(z, target)?;
    Ok(g.value(l).item())
}
