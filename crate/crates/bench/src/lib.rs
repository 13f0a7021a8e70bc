//! Shared fixtures for the criterion benchmarks.

use std::path::PathBuf;

use handlatent::handmodel::sample_within;
use handlatent::{HandBatch, HandSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Loads a hand shipped in the repository `hands/` directory.
pub fn hand(name: &str) -> HandSpec {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(format!("../../hands/{name}.json"));
    HandSpec::from_path(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn four_hands() -> Vec<HandSpec> {
    ["ability", "inspire", "xhand", "paxini"].into_iter().map(hand).collect()
}

/// `n` uniform poses per hand, deterministic in `seed`.
pub fn batch(specs: &[HandSpec], n: usize, seed: u64) -> Vec<HandBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    specs
        .iter()
        .map(|s| {
            let poses = (0..n).map(|_| sample_within(&s.actuated_limits(), &mut rng)).collect();
            HandBatch::deterministic(s.name(), poses)
        })
        .collect()
}
