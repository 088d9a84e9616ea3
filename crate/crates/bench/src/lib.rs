//! Shared fixtures for the benchmark suite.

use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use lspvar::panel::{build_panel, PanelData};
use lspvar::synthetic::{generate_truth, simulate_panel, DgpSpec};

/// Seeded dense Gaussian matrix.
pub fn gaussian(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Generated panel of the given shape, ready for fitting.
pub fn generated_panel(
    n_entities: usize,
    dim: usize,
    rank: usize,
    nnz: f64,
    horizon: usize,
    seed: u64,
) -> PanelData {
    let spec = DgpSpec::new(n_entities, dim, rank, nnz, horizon, seed);
    let truth = generate_truth(&spec).expect("stable truth");
    let raw = simulate_panel(&truth, horizon, 300, seed);
    build_panel(&raw).expect("panel")
}
