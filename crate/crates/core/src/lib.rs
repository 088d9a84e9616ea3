//! Estimation of panel vector autoregressions with a shared low-rank basis,
//! entity-specific diagonal rescaling weights, and sparse idiosyncratic
//! components.
//!
//! Each entity `m` follows `X_t = A_m X_{t-1} + noise` with transition matrix
//! `A_m = W_m * Phi + S_m`, where `Phi` is a basis common to the panel,
//! constrained to bounded rank, fixed nuclear norm, and equal row norms;
//! `W_m` is diagonal; and `S_m` is sparse. Parameters are estimated by a
//! multi-block ADMM with exact subproblem solutions, followed by an OLS
//! refinement on the recovered sparsity pattern. The crate also ships the
//! matching synthetic data generator, BIC-based penalty tuning, and recovery
//! diagnostics.

pub mod diagnostics;
pub mod error;
pub mod io;
pub mod panel;
pub mod projections;
pub mod solver;
pub mod sparse;
pub mod synthetic;
pub mod tuning;

pub use error::{Error, Result};
pub use panel::{build_panel, min_gram_eigen, EntityData, PanelData, RawEntity, RawPanel};
pub use projections::{
    project_equal_rows, project_intersection, project_low_rank, simplex_rank_project,
    ConstraintSpec, IntersectionOutcome, IntersectionState,
};
pub use solver::{
    evaluate_augmented, evaluate_penalized, fit, init_random, init_spectral, ols_refine,
    update_basis, update_dual, update_feasible_basis, update_weights_sparse, FitOutcome,
    LsPvarState, SolverConfig, SolverTrace, Termination, TraceRecord,
};
pub use sparse::SparseMatrix;
pub use synthetic::{generate_truth, simulate_panel, ClusterGroup, DgpSpec, GroundTruth};
pub use tuning::{bic, default_eta_grid, eta_max, grid_search_eta, BicRecord, GridOutcome};
