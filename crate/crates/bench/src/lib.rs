//! Shared fixtures for the criterion benchmarks.

use samstm::tasks::{copy_episode, Episode};
use samstm::train::{Model, ModelKind, RunConfig};
use samstm::Rng;

/// Query, keys and values for one attention call.
pub fn qkv(n_kv: usize, d_qk: usize, d_v: usize) -> (samstm::Tensor, samstm::Tensor, samstm::Tensor) {
    let mut rng = Rng::new(0, n_kv as u64);
    (
        rng.uniform_tensor(&[d_qk], -1.0, 1.0),
        rng.uniform_tensor(&[n_kv, d_qk], -1.0, 1.0),
        rng.uniform_tensor(&[n_kv, d_v], -1.0, 1.0),
    )
}

/// A copy episode of `len` random 8-bit vectors (`2·len + 2` steps).
pub fn copy_fixture(len: usize) -> Episode {
    let mut rng = Rng::new(0, 0);
    let vectors: Vec<Vec<f64>> = (0..len)
        .map(|_| (0..8).map(|_| if rng.bit() { 1.0 } else { 0.0 }).collect())
        .collect();
    copy_episode(&vectors).expect("valid copy episode")
}

/// The copy preset's model of the given kind, freshly initialized.
pub fn copy_model(kind: ModelKind) -> Model {
    let mut cfg = RunConfig::preset("copy").expect("copy preset exists");
    cfg.model = kind;
    Model::init(&cfg).expect("preset model initializes")
}
