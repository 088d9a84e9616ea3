//! Penalty selection: BIC computation and a warm-started geometric grid
//! search over the lasso penalty.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::panel::PanelData;
use crate::projections::{singular_values, RANK_TOL};
use crate::solver::{fit, rss_per_entity, FitOutcome, LsPvarState, SolverConfig, Termination};

/// Guard against `log(0)` for exact fits.
const RSS_FLOOR: f64 = 1e-300;

/// BIC ingredients of one refined estimate.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct BicValue {
    /// Exact residual sum of squares, summed over entities.
    pub rss: f64,
    /// Detected rank of the basis estimate.
    pub rank: usize,
    /// Model degrees of freedom.
    pub dof: usize,
    pub bic: f64,
}

/// One grid-search row: the BIC value plus the solve summary.
#[derive(Debug, Clone, Serialize)]
pub struct BicRecord {
    pub eta: f64,
    pub rss: f64,
    pub rank: usize,
    pub dof: usize,
    pub bic: f64,
    pub iterations: usize,
    pub converged: bool,
    pub termination: Termination,
}

/// Computes the BIC of a refined estimate. The degrees of freedom combine
/// the low-rank part `(2p - rank) * rank`, the free weight diagonals
/// `p (M - 1)`, and the sparse support size; the sample size is the pooled
/// number of observations, so unbalanced panels aggregate per-entity
/// lengths.
pub fn bic(state: &LsPvarState, panel: &PanelData, cfg: &SolverConfig) -> Result<BicValue> {
    let p = panel.dim as f64;
    let rss: f64 = rss_per_entity(state, panel).iter().sum();
    let rank = singular_values(&state.basis)?
        .iter()
        .filter(|&&s| s > RANK_TOL * cfg.nuclear_norm)
        .count();
    let support: usize = state.sparse.iter().map(|s| s.nnz()).sum();
    let dof = (2 * panel.dim - rank) * rank + panel.dim * (panel.n_entities() - 1) + support;
    let pooled = panel.total_len() as f64;
    let n_obs = p * pooled;
    let bic = n_obs * (rss.max(RSS_FLOOR) / n_obs).ln() + dof as f64 * pooled.ln();
    Ok(BicValue {
        rss,
        rank,
        dof,
        bic,
    })
}

fn record(outcome: &FitOutcome, panel: &PanelData, cfg: &SolverConfig) -> Result<BicRecord> {
    let value = bic(&outcome.state, panel, cfg)?;
    Ok(BicRecord {
        eta: cfg.lasso_penalty,
        rss: value.rss,
        rank: value.rank,
        dof: value.dof,
        bic: value.bic,
        iterations: outcome.iterations,
        converged: outcome.converged,
        termination: outcome.termination,
    })
}

/// Smallest penalty that blanks every sparse row in the first lasso sweep of
/// an all-ones-weight start: the largest cross-moment magnitude.
pub fn eta_max(panel: &PanelData) -> f64 {
    panel
        .entities
        .iter()
        .map(|e| e.cross.iter().fold(0.0_f64, |a, &b| a.max(b.abs())))
        .fold(0.0, f64::max)
}

/// Default grid: `n` geometric points from `eta_max` down three decades.
/// Two decades leave the strongly regularized end of the path only; the
/// minimum-BIC penalty on generated panels sits near `eta_max / 500`.
pub fn default_eta_grid(panel: &PanelData, n: usize) -> Vec<f64> {
    let top = eta_max(panel);
    geometric_grid(top / 1000.0, top, n)
}

/// Geometric sequence between two positive endpoints, returned descending.
pub fn geometric_grid(low: f64, high: f64, n: usize) -> Vec<f64> {
    assert!(low > 0.0 && high >= low && n >= 1);
    if n == 1 {
        return vec![high];
    }
    let ratio = (low / high).powf(1.0 / (n - 1) as f64);
    (0..n).map(|k| high * ratio.powi(k as i32)).collect()
}

/// How grid points reuse information.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridMode {
    /// Fit penalties in descending order, warm-starting each solve from the
    /// previous solution.
    WarmStart,
    /// Fit every penalty independently from the supplied initialization, in
    /// parallel.
    ColdParallel,
}

/// Grid-search result: all records plus the minimum-BIC fit.
#[derive(Debug)]
pub struct GridOutcome {
    pub records: Vec<BicRecord>,
    /// Grid points whose solve failed, with the error text; they are skipped
    /// rather than fatal.
    pub failures: Vec<(f64, String)>,
    pub warnings: Vec<String>,
    /// Index into `records` of the minimum-BIC row.
    pub best_index: usize,
    pub best: FitOutcome,
}

impl GridOutcome {
    pub fn best_eta(&self) -> f64 {
        self.records[self.best_index].eta
    }
}

/// Fits the model over a geometric penalty grid and returns the minimum-BIC
/// solution. The grid is sorted descending internally, so permuted inputs
/// give identical results.
pub fn grid_search_eta(
    panel: &PanelData,
    cfg_base: &SolverConfig,
    etas: &[f64],
    init: &LsPvarState,
    mode: GridMode,
) -> Result<GridOutcome> {
    if etas.is_empty() {
        return Err(Error::EmptyInput("penalty grid".into()));
    }
    if etas.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
        return Err(Error::InvalidConfig(
            "penalty grid must be positive and finite".into(),
        ));
    }
    let mut grid = etas.to_vec();
    grid.sort_unstable_by(|a, b| b.partial_cmp(a).expect("finite penalties"));

    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut fits: Vec<FitOutcome> = Vec::new();

    match mode {
        GridMode::WarmStart => {
            let mut warm = init.clone();
            // Step-size escalations carry forward along the path.
            let mut warm_step = cfg_base.step_size;
            let mut have_solution = false;
            for &eta in &grid {
                let mut cfg = cfg_base.clone();
                cfg.lasso_penalty = eta;
                cfg.step_size = warm_step;
                cfg.proximal_weight = panel.n_entities() as f64 / warm_step;
                // Refresh a carried solution for this penalty: one block
                // pass adapts the sparse parts, and the dual is re-anchored
                // at its stationary value for the refreshed state. Handing
                // over the previous subproblem's dual (or a zero dual)
                // instead kicks the first dual ascent and can break the
                // descent certificate. The first point runs exactly like a
                // plain fit from `init`.
                let start = if have_solution {
                    let mut start = warm.clone();
                    crate::solver::update_weights_sparse(&mut start, panel, &cfg)?;
                    start.dual =
                        crate::solver::penalized_basis_gradient(&start, panel) / -warm_step;
                    start.inner =
                        crate::projections::IntersectionState::cold(&start.basis_feasible);
                    start
                } else {
                    warm.clone()
                };
                match fit(panel, &cfg, &start) {
                    Ok(outcome) => {
                        records.push(record(&outcome, panel, &cfg)?);
                        warm = outcome.state.clone();
                        warm_step = outcome.step_size_used;
                        have_solution = true;
                        fits.push(outcome);
                    }
                    Err(e) => failures.push((eta, e.to_string())),
                }
            }
        }
        GridMode::ColdParallel => {
            let results: Vec<(f64, Result<FitOutcome>)> = grid
                .par_iter()
                .map(|&eta| {
                    let mut cfg = cfg_base.clone();
                    cfg.lasso_penalty = eta;
                    (eta, fit(panel, &cfg, init))
                })
                .collect();
            for (eta, result) in results {
                match result {
                    Ok(outcome) => {
                        let mut cfg = cfg_base.clone();
                        cfg.lasso_penalty = eta;
                        records.push(record(&outcome, panel, &cfg)?);
                        fits.push(outcome);
                    }
                    Err(e) => failures.push((eta, e.to_string())),
                }
            }
        }
    }

    if records.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "every grid point failed; first error: {}",
            failures
                .first()
                .map(|(_, e)| e.as_str())
                .unwrap_or("unknown")
        )));
    }

    let mut warnings = Vec::new();
    let supports: Vec<usize> = fits
        .iter()
        .map(|f| f.state.sparse.iter().map(|s| s.nnz()).sum())
        .collect();
    if supports.windows(2).any(|w| w[1] < w[0]) {
        warnings.push(
            "sparse support shrank while the penalty decreased; path may be unstable".into(),
        );
    }

    let best_index = records
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.bic.partial_cmp(&b.bic).expect("finite BIC"))
        .map(|(i, _)| i)
        .expect("records nonempty");
    let best = fits.swap_remove(best_index);
    Ok(GridOutcome {
        records,
        failures,
        warnings,
        best_index,
        best,
    })
}
