//! Multi-block ADMM for the panel model.
//!
//! Each iteration updates, in order: the (weights, sparse) pair entity by
//! entity (closed-form weight step, then a lasso solved by cyclic coordinate
//! descent), the feasible basis copy (inner projection onto the constraint
//! intersection of a proximal target), the unconstrained basis (row-wise
//! symmetric positive definite solves), and finally the dual matrix by
//! ascent on the basis gap. The recorded objective sequence must be
//! nonincreasing; a violation signals a too-small step size and triggers one
//! automatic restart at five times the step before failing.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::PanelData;
use crate::projections::{project_intersection, ConstraintSpec, IntersectionState};
use crate::sparse::{SparseMatrix, SPARSE_DROP_TOL};

/// Tuning knobs of the ADMM. `auto` fills every default recommended for the
/// model: step size `M/10`, proximal weight `M/step`, nuclear norm
/// `sqrt(max_rank * dim)`, tolerance `5e-6`, iteration budget `4e5`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Maximum admissible rank of the shared basis.
    pub max_rank: usize,
    /// Nuclear norm pinned by the constraint set.
    pub nuclear_norm: f64,
    /// L1 penalty on the sparse components.
    pub lasso_penalty: f64,
    /// ADMM step size coupling the basis to its feasible copy.
    pub step_size: f64,
    /// Proximal weight of the feasible-basis subproblem.
    pub proximal_weight: f64,
    /// Convergence tolerance on the objective delta and the basis step.
    pub tol: f64,
    /// Outer iteration budget.
    pub max_iter: usize,
    /// Sweep budget for each row lasso.
    pub lasso_sweeps: usize,
    /// Stop a row lasso when no coefficient moves more than this.
    pub lasso_tol: f64,
    /// Sweep budget for the inner intersection projection.
    pub inner_sweeps: usize,
    /// Relative gap tolerance of the inner projection.
    pub inner_tol: f64,
    /// Automatic step-size restarts (each multiplies the step by five)
    /// allowed before a nonmonotone objective becomes an error.
    pub max_restarts: usize,
}

impl SolverConfig {
    /// Recommended defaults for a panel of `n_entities` series of dimension
    /// `dim`, with the basis rank capped at `max_rank`. The lasso penalty
    /// defaults to zero; set it directly or via the tuning grid.
    pub fn auto(dim: usize, n_entities: usize, max_rank: usize) -> Self {
        let m = n_entities.max(1) as f64;
        let step_size = m / 10.0;
        Self {
            max_rank,
            nuclear_norm: ((max_rank * dim) as f64).sqrt(),
            lasso_penalty: 0.0,
            step_size,
            proximal_weight: m / step_size,
            tol: 5e-6,
            max_iter: 400_000,
            lasso_sweeps: 200,
            lasso_tol: 1e-8,
            inner_sweeps: 500,
            inner_tol: 1e-8,
            max_restarts: 3,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.max_rank == 0 || self.max_rank > dim {
            return Err(Error::InvalidConfig(format!(
                "max_rank must be in 1..={dim}, got {}",
                self.max_rank
            )));
        }
        for (name, value) in [
            ("nuclear_norm", self.nuclear_norm),
            ("step_size", self.step_size),
            ("proximal_weight", self.proximal_weight),
            ("tol", self.tol),
        ] {
            if !(value > 0.0) || !value.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be positive and finite, got {value}"
                )));
            }
        }
        if self.lasso_penalty < 0.0 || !self.lasso_penalty.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "lasso_penalty must be nonnegative, got {}",
                self.lasso_penalty
            )));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidConfig("max_iter must be at least 1".into()));
        }
        Ok(())
    }

    pub fn constraint(&self, dim: usize) -> Result<ConstraintSpec> {
        ConstraintSpec::new(dim, self.max_rank, self.nuclear_norm)
    }
}

/// Current ADMM iterate.
#[derive(Debug, Clone)]
pub struct LsPvarState {
    /// Diagonals of the rescaling weights, one vector per entity.
    pub weights: Vec<DVector<f64>>,
    /// Sparse idiosyncratic components, one per entity.
    pub sparse: Vec<SparseMatrix>,
    /// Unconstrained shared basis.
    pub basis: DMatrix<f64>,
    /// Feasible copy of the basis (member of both constraint sets).
    pub basis_feasible: DMatrix<f64>,
    /// Dual matrix coupling the basis to its feasible copy.
    pub dual: DMatrix<f64>,
    /// Warm cache for the inner intersection projection.
    pub inner: IntersectionState,
}

impl LsPvarState {
    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn n_entities(&self) -> usize {
        self.weights.len()
    }

    /// Transition matrix of entity `m`: diagonal-scaled basis plus sparse part.
    pub fn transition(&self, m: usize) -> DMatrix<f64> {
        let mut a = self.basis.clone();
        for j in 0..a.nrows() {
            let w = self.weights[m][j];
            a.row_mut(j).scale_mut(w);
            for &(k, v) in self.sparse[m].row(j) {
                a[(j, k)] += v;
            }
        }
        a
    }

    fn check_panel(&self, panel: &PanelData) -> Result<()> {
        let p = panel.dim;
        if self.basis.nrows() != p
            || self.basis.ncols() != p
            || self.basis_feasible.nrows() != p
            || self.dual.nrows() != p
            || self.weights.len() != panel.n_entities()
            || self.sparse.len() != panel.n_entities()
            || self.weights.iter().any(|w| w.len() != p)
            || self.sparse.iter().any(|s| s.dim() != p)
        {
            return Err(Error::DimensionMismatch(
                "state does not match panel dimensions".into(),
            ));
        }
        Ok(())
    }
}

/// One recorded outer iteration.
#[derive(Debug, Clone, Serialize)]
pub struct TraceRecord {
    pub iteration: usize,
    /// Augmented objective G.
    pub augmented: f64,
    /// Penalized least squares objective F.
    pub penalized: f64,
    /// `||basis - basis_feasible||_F / nuclear_norm`.
    pub primal_residual: f64,
    pub step_w_sq: f64,
    pub step_s_sq: f64,
    pub step_basis_sq: f64,
    pub step_feasible_sq: f64,
    /// Seconds since the solver started; excluded from serialized CSVs'
    /// determinism guarantees.
    pub wall_time_s: f64,
}

/// Per-iteration record of the solve, including the initial point as
/// iteration zero.
#[derive(Debug, Clone, Default)]
pub struct SolverTrace {
    pub records: Vec<TraceRecord>,
}

impl SolverTrace {
    pub fn augmented_values(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.augmented).collect()
    }

    /// Largest relative increase between consecutive objective values;
    /// negative when strictly decreasing throughout.
    pub fn max_relative_increase(&self) -> f64 {
        self.records
            .windows(2)
            .map(|w| (w[1].augmented - w[0].augmented) / w[0].augmented.abs().max(f64::MIN_POSITIVE))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Why the outer loop stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Objective delta dropped below tolerance.
    ObjectiveDelta,
    /// Relative basis step dropped below tolerance.
    BasisStep,
    /// Iteration budget exhausted.
    IterationBudget,
}

/// Fit result: final state, trace, and solve diagnostics.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub state: LsPvarState,
    pub trace: SolverTrace,
    pub termination: Termination,
    pub converged: bool,
    pub iterations: usize,
    /// Automatic step-size restarts taken.
    pub restarts: usize,
    pub step_size_used: f64,
    pub proximal_weight_used: f64,
    pub warnings: Vec<String>,
    /// Worst lasso stationarity violation before refinement.
    pub kkt_residual: f64,
    /// Per-entity residual sum of squares before the OLS refinement.
    pub rss_before_refine: Vec<f64>,
    /// Per-entity residual sum of squares after the OLS refinement.
    pub rss_per_entity: Vec<f64>,
}

impl FitOutcome {
    pub fn rss(&self) -> f64 {
        self.rss_per_entity.iter().sum()
    }
}

/// Penalized least squares objective F: per-entity scaled residual norms
/// plus the L1 penalty, computed through the cached Gram statistics.
pub fn evaluate_penalized(state: &LsPvarState, panel: &PanelData, lasso_penalty: f64) -> f64 {
    let terms: Vec<f64> = panel
        .entities
        .par_iter()
        .enumerate()
        .map(|(m, entity)| {
            let a = state.transition(m);
            let quad = (&a * &entity.gram).dot(&a);
            let lin = a.dot(&entity.cross);
            0.5 * (entity.y_sq_scaled - 2.0 * lin + quad) + lasso_penalty * state.sparse[m].l1_norm()
        })
        .collect();
    terms.iter().sum()
}

/// Augmented objective G: F plus the quadratic coupling and dual term on the
/// basis gap.
pub fn evaluate_augmented(state: &LsPvarState, panel: &PanelData, cfg: &SolverConfig) -> f64 {
    let f = evaluate_penalized(state, panel, cfg.lasso_penalty);
    f + augmentation(state, cfg.step_size)
}

fn augmentation(state: &LsPvarState, step_size: f64) -> f64 {
    let gap = &state.basis - &state.basis_feasible;
    0.5 * step_size * gap.norm_squared() + step_size * state.dual.dot(&gap)
}

/// `||basis - basis_feasible||_F / nuclear_norm`.
pub fn primal_residual(state: &LsPvarState, nuclear_norm: f64) -> f64 {
    (&state.basis - &state.basis_feasible).norm() / nuclear_norm
}

/// Gradient of the penalized least squares objective with respect to the
/// basis: `sum_m W_m ((W_m basis + S_m) gram_m - cross_m)`. At a converged
/// solve the dual equals this gradient divided by minus the step size,
/// which is how warm starts across penalty changes stay consistent.
pub fn penalized_basis_gradient(state: &LsPvarState, panel: &PanelData) -> DMatrix<f64> {
    let p = panel.dim;
    let mut gradient = DMatrix::<f64>::zeros(p, p);
    for (m, entity) in panel.entities.iter().enumerate() {
        let residual_moment = state.transition(m) * &entity.gram - &entity.cross;
        for j in 0..p {
            let w = state.weights[m][j];
            if w == 0.0 {
                continue;
            }
            for k in 0..p {
                gradient[(j, k)] += w * residual_moment[(j, k)];
            }
        }
    }
    gradient
}

/// Updates the (weights, sparse) block: per entity and per row, the weight
/// gets its closed-form least squares value, then the sparse row is fit by a
/// cyclic coordinate descent lasso warm-started at the previous iterate.
/// Rows whose basis direction carries no design energy get weight zero and a
/// warning.
pub fn update_weights_sparse(
    state: &mut LsPvarState,
    panel: &PanelData,
    cfg: &SolverConfig,
) -> Result<Vec<String>> {
    let p = panel.dim;
    let basis = &state.basis;
    let results: Vec<(DVector<f64>, SparseMatrix, Vec<String>)> = panel
        .entities
        .par_iter()
        .enumerate()
        .map(|(m, entity)| {
            let mut warnings = Vec::new();
            let mut w_new = state.weights[m].clone();
            let mut s_new = state.sparse[m].clone();
            // Row j of basis * gram is both phi_j * gram and (gram * phi_j')'.
            let basis_gram = basis * &entity.gram;
            let mut phi_row = vec![0.0; p];
            let mut phi_gram = vec![0.0; p];
            let mut s_row = vec![0.0; p];
            let mut grad = vec![0.0; p];
            let mut response = vec![0.0; p];
            for j in 0..p {
                for k in 0..p {
                    phi_row[k] = basis[(j, k)];
                    phi_gram[k] = basis_gram[(j, k)];
                }
                let denom: f64 = (0..p).map(|k| phi_row[k] * phi_gram[k]).sum();
                let cross_phi: f64 = (0..p).map(|k| entity.cross[(j, k)] * phi_row[k]).sum();

                s_new.densify_row_into(j, &mut s_row);
                let s_gram_phi: f64 = (0..p).map(|k| s_row[k] * phi_gram[k]).sum();
                let w = if denom > f64::MIN_POSITIVE {
                    (cross_phi - s_gram_phi) / denom
                } else {
                    warnings.push(format!(
                        "entity `{}` row {j}: degenerate weight design, weight set to 0",
                        entity.id
                    ));
                    0.0
                };
                w_new[j] = w;

                for k in 0..p {
                    response[k] = entity.cross[(j, k)] - w * phi_gram[k];
                }
                lasso_row(
                    &mut s_row,
                    &mut grad,
                    &entity.gram,
                    &response,
                    cfg.lasso_penalty,
                    cfg.lasso_sweeps,
                    cfg.lasso_tol,
                );
                s_new.set_row_from_dense(j, &s_row, SPARSE_DROP_TOL);
            }
            (w_new, s_new, warnings)
        })
        .collect();

    let mut warnings = Vec::new();
    for (m, (w, s, mut warns)) in results.into_iter().enumerate() {
        state.weights[m] = w;
        state.sparse[m] = s;
        warnings.append(&mut warns);
    }
    Ok(warnings)
}

/// Cyclic coordinate descent for one row lasso in covariance form:
/// minimize `0.5 s' gram s - s' response + penalty * |s|_1`.
///
/// `coeffs` is the warm start and the output; `grad_buf` holds `gram * s`.
/// Full sweeps alternate with sweeps over the active set until no update
/// exceeds `tol` on a full sweep or the budget runs out.
fn lasso_row(
    coeffs: &mut [f64],
    grad_buf: &mut [f64],
    gram: &DMatrix<f64>,
    response: &[f64],
    penalty: f64,
    max_sweeps: usize,
    tol: f64,
) {
    let p = coeffs.len();
    // Column-major storage makes gram columns contiguous; symmetry makes a
    // column equal to the matching row.
    let gram_data = gram.as_slice();
    for k in 0..p {
        grad_buf[k] = 0.0;
    }
    for l in 0..p {
        let c = coeffs[l];
        if c != 0.0 {
            let col = &gram_data[l * p..(l + 1) * p];
            for k in 0..p {
                grad_buf[k] += c * col[k];
            }
        }
    }

    fn sweep_coords(
        coeffs: &mut [f64],
        grad_buf: &mut [f64],
        gram_data: &[f64],
        response: &[f64],
        penalty: f64,
        active_only: bool,
    ) -> f64 {
        let p = coeffs.len();
        let mut max_delta = 0.0_f64;
        for k in 0..p {
            let old = coeffs[k];
            if active_only && old == 0.0 {
                continue;
            }
            let col = &gram_data[k * p..(k + 1) * p];
            let diag = col[k];
            if diag <= 0.0 {
                continue;
            }
            let partial = response[k] - (grad_buf[k] - old * diag);
            let new = soft_threshold(partial, penalty) / diag;
            let delta = new - old;
            if delta != 0.0 {
                for l in 0..p {
                    grad_buf[l] += delta * col[l];
                }
                coeffs[k] = new;
                max_delta = max_delta.max(delta.abs());
            }
        }
        max_delta
    }

    let mut sweeps = 0;
    while sweeps < max_sweeps {
        let full_delta = sweep_coords(coeffs, grad_buf, gram_data, response, penalty, false);
        sweeps += 1;
        if full_delta <= tol {
            return;
        }
        while sweeps < max_sweeps {
            let active_delta = sweep_coords(coeffs, grad_buf, gram_data, response, penalty, true);
            sweeps += 1;
            if active_delta <= tol {
                break;
            }
        }
    }
}

fn soft_threshold(value: f64, penalty: f64) -> f64 {
    if value > penalty {
        value - penalty
    } else if value < -penalty {
        value + penalty
    } else {
        0.0
    }
}

/// Diagnostics of one feasible-basis update.
#[derive(Debug, Clone)]
pub struct FeasibleUpdateInfo {
    pub converged: bool,
    pub sweeps: usize,
    pub residual: f64,
    /// Candidate rejected because it did not improve the proximal distance;
    /// the previous feasible point was kept.
    pub rejected: bool,
    pub warnings: Vec<String>,
}

/// Updates the feasible basis copy by projecting the proximal target
/// `(basis + dual + weight * feasible) / (1 + weight)` onto the constraint
/// intersection, warm-started from the previous inner state. The candidate
/// is accepted only if it is at least as close to the target as the current
/// feasible point, which preserves the outer descent certificate.
pub fn update_feasible_basis(
    state: &mut LsPvarState,
    cfg: &SolverConfig,
) -> Result<FeasibleUpdateInfo> {
    let spec = cfg.constraint(state.dim())?;
    let kappa = cfg.proximal_weight;
    let target = (&state.basis + &state.dual + &state.basis_feasible * kappa) / (1.0 + kappa);
    let outcome = project_intersection(
        &target,
        &spec,
        Some(state.inner.clone()),
        cfg.inner_sweeps,
        cfg.inner_tol,
    )?;

    let mut warnings = Vec::new();
    if outcome.degenerate {
        warnings.push("inner projection hit a degenerate (zero) target".into());
    }
    if outcome.perturbed_rows > 0 {
        warnings.push(format!(
            "inner projection perturbed {} zero row(s)",
            outcome.perturbed_rows
        ));
    }
    if !outcome.converged {
        warnings.push(format!(
            "inner projection stopped at residual {:.3e} after {} sweeps",
            outcome.residual, outcome.sweeps
        ));
    }

    let candidate_dist = (&outcome.projected - &target).norm();
    let current_dist = (&state.basis_feasible - &target).norm();
    let rejected = candidate_dist > current_dist + 1e-12 * spec.nuclear_norm;
    if rejected {
        warnings.push(format!(
            "feasible-basis candidate rejected ({candidate_dist:.3e} > {current_dist:.3e})"
        ));
        state.inner = IntersectionState::cold(&state.basis_feasible);
    } else {
        state.basis_feasible = outcome.projected;
        state.inner = outcome.state;
    }
    Ok(FeasibleUpdateInfo {
        converged: outcome.converged,
        sweeps: outcome.sweeps,
        residual: outcome.residual,
        rejected,
        warnings,
    })
}

/// Updates the unconstrained basis row by row: row `j` solves the symmetric
/// positive definite system
/// `(step I + sum_m w_{m,j}^2 gram_m) x = step (feasible - dual)_j
///  + sum_m w_{m,j} (cross_m - S_m gram_m)_j`.
pub fn update_basis(state: &mut LsPvarState, panel: &PanelData, cfg: &SolverConfig) -> Result<()> {
    let p = panel.dim;
    let rho = cfg.step_size;
    let rows: Vec<Result<DVector<f64>>> = (0..p)
        .into_par_iter()
        .map(|j| {
            let mut lhs = DMatrix::<f64>::identity(p, p) * rho;
            let mut rhs = DVector::<f64>::zeros(p);
            for k in 0..p {
                rhs[k] = rho * (state.basis_feasible[(j, k)] - state.dual[(j, k)]);
            }
            for (m, entity) in panel.entities.iter().enumerate() {
                let w = state.weights[m][j];
                if w == 0.0 {
                    continue;
                }
                let gram_data = entity.gram.as_slice();
                let w2 = w * w;
                for (target, &source) in lhs.as_mut_slice().iter_mut().zip(gram_data) {
                    *target += w2 * source;
                }
                let mut data_term = vec![0.0; p];
                for k in 0..p {
                    data_term[k] = entity.cross[(j, k)];
                }
                for &(l, v) in state.sparse[m].row(j) {
                    let col = &gram_data[l * p..(l + 1) * p];
                    for k in 0..p {
                        data_term[k] -= v * col[k];
                    }
                }
                for k in 0..p {
                    rhs[k] += w * data_term[k];
                }
            }
            lhs.cholesky()
                .map(|chol| chol.solve(&rhs))
                .ok_or_else(|| {
                    Error::SolveFailure(format!("basis row {j} system not positive definite"))
                })
        })
        .collect();

    for (j, row) in rows.into_iter().enumerate() {
        let row = row?;
        for k in 0..p {
            state.basis[(j, k)] = row[k];
        }
    }
    Ok(())
}

/// Dual ascent: accumulate the basis gap.
pub fn update_dual(state: &mut LsPvarState) {
    state.dual += &state.basis - &state.basis_feasible;
}

/// All-ones weights, empty sparse parts, zero dual, and a feasible basis
/// obtained by projecting a seeded standard Gaussian matrix onto the
/// constraint intersection. Identical seeds give bit-identical states.
pub fn init_random(
    dim: usize,
    n_entities: usize,
    cfg: &SolverConfig,
    seed: u64,
) -> Result<LsPvarState> {
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    cfg.validate(dim)?;
    let spec = cfg.constraint(dim)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut gaussian = DMatrix::<f64>::zeros(dim, dim);
    for j in 0..dim {
        for i in 0..dim {
            gaussian[(i, j)] = rng.sample(StandardNormal);
        }
    }
    let outcome = project_intersection(&gaussian, &spec, None, cfg.inner_sweeps, cfg.inner_tol)?;
    Ok(LsPvarState {
        weights: vec![DVector::repeat(dim, 1.0); n_entities],
        sparse: vec![SparseMatrix::zeros(dim); n_entities],
        basis: outcome.projected.clone(),
        basis_feasible: outcome.projected.clone(),
        dual: DMatrix::zeros(dim, dim),
        inner: outcome.state,
    })
}

/// Data-driven initialization: per-entity ridge-guarded least squares fits,
/// then for each row index the top right singular vector of the stacked
/// per-entity rows (sign fixed so its loadings sum is nonnegative), rescaled
/// to the nuclear norm budget; the feasible copy is its projection.
pub fn init_spectral(panel: &PanelData, cfg: &SolverConfig) -> Result<LsPvarState> {
    let p = panel.dim;
    cfg.validate(p)?;
    let spec = cfg.constraint(p)?;
    let n = panel.n_entities();

    let fits: Vec<Result<DMatrix<f64>>> = panel
        .entities
        .par_iter()
        .map(|entity| {
            let chol = entity.gram.clone().cholesky().or_else(|| {
                let ridge = 1e-8 * entity.gram.trace() / p as f64;
                (entity.gram.clone() + DMatrix::identity(p, p) * ridge).cholesky()
            });
            let chol = chol.ok_or_else(|| {
                Error::SolveFailure(format!("entity `{}` gram not invertible", entity.id))
            })?;
            Ok(chol.solve(&entity.cross.transpose()).transpose())
        })
        .collect();
    let fits = fits.into_iter().collect::<Result<Vec<_>>>()?;

    let mut basis = DMatrix::<f64>::zeros(p, p);
    for i in 0..p {
        let stacked = DMatrix::from_fn(n, p, |m, k| fits[m][(i, k)]);
        let (_, _, v) = crate::projections::svd_parts(&stacked)?;
        let mut direction = v.column(0).into_owned();
        let loading_sum: f64 = (0..n).map(|m| stacked.row(m).transpose().dot(&direction)).sum();
        if loading_sum < 0.0 {
            direction.neg_mut();
        }
        for k in 0..p {
            basis[(i, k)] = direction[k];
        }
    }

    let nuclear = crate::projections::nuclear_norm(&basis)?;
    if nuclear <= 0.0 {
        return Err(Error::SolveFailure(
            "spectral initialization produced a zero basis".into(),
        ));
    }
    basis *= cfg.nuclear_norm / nuclear;
    let outcome = project_intersection(&basis, &spec, None, cfg.inner_sweeps, cfg.inner_tol)?;
    Ok(LsPvarState {
        weights: vec![DVector::repeat(p, 1.0); n],
        sparse: vec![SparseMatrix::zeros(p); n],
        basis,
        basis_feasible: outcome.projected,
        dual: DMatrix::zeros(p, p),
        inner: outcome.state,
    })
}

/// Exact residual sum of squares per entity, `||Y - A X||_F^2`, computed
/// from the stored data matrices rather than the Gram caches.
pub fn rss_per_entity(state: &LsPvarState, panel: &PanelData) -> Vec<f64> {
    panel
        .entities
        .par_iter()
        .enumerate()
        .map(|(m, entity)| {
            let residual = &entity.y - state.transition(m) * &entity.x;
            residual.norm_squared()
        })
        .collect()
}

/// Worst stationarity violation of the row lassos at the current state:
/// on the support the gradient must cancel the penalty subgradient, off the
/// support it must stay within the penalty.
pub fn lasso_kkt_residual(state: &LsPvarState, panel: &PanelData, cfg: &SolverConfig) -> f64 {
    lasso_kkt_residual_at(state, &state.basis, panel, cfg)
}

/// Like [`lasso_kkt_residual`], but against an explicit basis. Block
/// optimality holds for the basis the (weights, sparse) block was solved
/// with, which is one block update older than the final basis.
pub fn lasso_kkt_residual_at(
    state: &LsPvarState,
    basis: &DMatrix<f64>,
    panel: &PanelData,
    cfg: &SolverConfig,
) -> f64 {
    let p = panel.dim;
    let eta = cfg.lasso_penalty;
    let per_entity: Vec<f64> = panel
        .entities
        .par_iter()
        .enumerate()
        .map(|(m, entity)| {
            let mut worst = 0.0_f64;
            let mut s_row = vec![0.0; p];
            for j in 0..p {
                let w = state.weights[m][j];
                state.sparse[m].densify_row_into(j, &mut s_row);
                for k in 0..p {
                    let mut grad = -entity.cross[(j, k)];
                    let col = entity.gram.column(k);
                    for l in 0..p {
                        grad += (w * basis[(j, l)] + s_row[l]) * col[l];
                    }
                    let violation = if s_row[k] != 0.0 {
                        (grad + eta * s_row[k].signum()).abs()
                    } else {
                        (grad.abs() - eta).max(0.0)
                    };
                    worst = worst.max(violation);
                }
            }
            worst
        })
        .collect();
    per_entity.into_iter().fold(0.0, f64::max)
}

/// Joint unpenalized least squares refinement of (weight, active sparse
/// entries) per entity row, with the basis and the sparsity pattern fixed.
/// Zero entries stay exactly zero; per-row residuals cannot increase. Rows
/// whose active set outgrows the sample length fall back to the minimum-norm
/// solution with a warning.
pub fn ols_refine(
    state: &mut LsPvarState,
    panel: &PanelData,
    _cfg: &SolverConfig,
) -> Result<Vec<String>> {
    let p = panel.dim;
    let basis = &state.basis;
    let results: Vec<Result<(DVector<f64>, SparseMatrix, Vec<String>)>> = panel
        .entities
        .par_iter()
        .enumerate()
        .map(|(m, entity)| {
            let mut warnings = Vec::new();
            let mut w_new = state.weights[m].clone();
            let mut s_new = state.sparse[m].clone();
            for j in 0..p {
                let active: Vec<usize> =
                    state.sparse[m].row(j).iter().map(|&(k, _)| k).collect();
                let k = active.len();
                let phi_row: Vec<f64> = (0..p).map(|l| basis[(j, l)]).collect();
                let phi_gram: Vec<f64> = (0..p)
                    .map(|c| {
                        let col = entity.gram.column(c);
                        (0..p).map(|l| phi_row[l] * col[l]).sum()
                    })
                    .collect();

                let mut design = DMatrix::<f64>::zeros(k + 1, k + 1);
                let mut rhs = DVector::<f64>::zeros(k + 1);
                design[(0, 0)] = (0..p).map(|l| phi_row[l] * phi_gram[l]).sum();
                rhs[0] = (0..p).map(|l| entity.cross[(j, l)] * phi_row[l]).sum();
                for (a, &ca) in active.iter().enumerate() {
                    design[(0, a + 1)] = phi_gram[ca];
                    design[(a + 1, 0)] = phi_gram[ca];
                    rhs[a + 1] = entity.cross[(j, ca)];
                    for (b, &cb) in active.iter().enumerate() {
                        design[(a + 1, b + 1)] = entity.gram[(ca, cb)];
                    }
                }

                let solution = match design.clone().cholesky() {
                    Some(chol) if k + 1 <= entity.t_len => chol.solve(&rhs),
                    _ => {
                        warnings.push(format!(
                            "entity `{}` row {j}: rank-deficient refinement ({} coefficients, \
                             {} samples); minimum-norm solution used",
                            entity.id,
                            k + 1,
                            entity.t_len
                        ));
                        let svd = design
                            .clone()
                            .try_svd(true, true, f64::EPSILON, 0)
                            .ok_or(Error::SvdFailure)?;
                        svd.solve(&rhs, 1e-12).map_err(|e| {
                            Error::SolveFailure(format!("refinement row {j}: {e}"))
                        })?
                    }
                };

                w_new[j] = solution[0];
                let triplets: Vec<(usize, usize, f64)> = active
                    .iter()
                    .enumerate()
                    .map(|(a, &c)| (j, c, solution[a + 1]))
                    .collect();
                let mut dense = vec![0.0; p];
                for &(_, c, v) in &triplets {
                    dense[c] = v;
                }
                s_new.set_row_from_dense(j, &dense, 0.0);
            }
            Ok((w_new, s_new, warnings))
        })
        .collect();

    let mut warnings = Vec::new();
    for (m, result) in results.into_iter().enumerate() {
        let (w, s, mut warns) = result?;
        state.weights[m] = w;
        state.sparse[m] = s;
        warnings.append(&mut warns);
    }
    Ok(warnings)
}

/// Runs the full solve: block iterations to convergence (objective delta or
/// basis step below tolerance, with the primal gap within ten times the
/// tolerance), then the OLS refinement. A nonmonotone objective triggers one
/// restart at five times the step size before surfacing the failure.
pub fn fit(panel: &PanelData, cfg: &SolverConfig, init: &LsPvarState) -> Result<FitOutcome> {
    cfg.validate(panel.dim)?;
    init.check_panel(panel)?;

    let mut attempt_cfg = cfg.clone();
    let mut restarts = 0;
    let run = loop {
        match run_admm(panel, &attempt_cfg, init) {
            Ok(run) => break run,
            Err(Error::NonDescent { step_size, .. }) if restarts < cfg.max_restarts => {
                restarts += 1;
                let m = panel.n_entities() as f64;
                attempt_cfg.step_size = step_size * 5.0;
                attempt_cfg.proximal_weight = m / attempt_cfg.step_size;
            }
            Err(e) => return Err(e),
        }
    };

    let RunOutput {
        mut state,
        trace,
        termination,
        converged,
        iterations,
        mut warnings,
        ws_basis,
    } = run;
    if restarts > 0 {
        warnings.insert(
            0,
            format!(
                "objective increased with step size {}; restarted {} time(s), final step size {}",
                cfg.step_size, restarts, attempt_cfg.step_size
            ),
        );
    }

    let kkt_residual = lasso_kkt_residual_at(&state, &ws_basis, panel, &attempt_cfg);
    let rss_before_refine = rss_per_entity(&state, panel);
    let mut refine_warnings = ols_refine(&mut state, panel, &attempt_cfg)?;
    warnings.append(&mut refine_warnings);
    let rss_after = rss_per_entity(&state, panel);

    Ok(FitOutcome {
        state,
        trace,
        termination,
        converged,
        iterations,
        restarts,
        step_size_used: attempt_cfg.step_size,
        proximal_weight_used: attempt_cfg.proximal_weight,
        warnings,
        kkt_residual,
        rss_before_refine,
        rss_per_entity: rss_after,
    })
}

struct RunOutput {
    state: LsPvarState,
    trace: SolverTrace,
    termination: Termination,
    converged: bool,
    iterations: usize,
    warnings: Vec<String>,
    /// Basis the final (weights, sparse) update was solved against.
    ws_basis: DMatrix<f64>,
}

fn run_admm(panel: &PanelData, cfg: &SolverConfig, init: &LsPvarState) -> Result<RunOutput> {
    let started = Instant::now();
    let mut state = init.clone();
    let ell = cfg.nuclear_norm;
    let mut warnings = Vec::new();

    let f0 = evaluate_penalized(&state, panel, cfg.lasso_penalty);
    let g0 = f0 + augmentation(&state, cfg.step_size);
    let mut trace = SolverTrace::default();
    trace.records.push(TraceRecord {
        iteration: 0,
        augmented: g0,
        penalized: f0,
        primal_residual: primal_residual(&state, ell),
        step_w_sq: 0.0,
        step_s_sq: 0.0,
        step_basis_sq: 0.0,
        step_feasible_sq: 0.0,
        wall_time_s: started.elapsed().as_secs_f64(),
    });

    // Slack for the descent check: relative to the previous value with a
    // tiny absolute floor so perfect fits do not trip on float dust.
    let descent_slack =
        |previous: f64| 1e-9 * previous.abs() + 1e-12 * (1.0 + g0.abs());

    let mut g_prev = g0;
    let mut termination = Termination::IterationBudget;
    let mut converged = false;
    let mut iterations = 0;
    let mut rejected_feasible = 0usize;
    let mut inner_unconverged = 0usize;
    let mut degenerate_rows = std::collections::BTreeSet::new();
    let mut degenerate_row_events = 0usize;
    let mut ws_basis = init.basis.clone();

    for iteration in 1..=cfg.max_iter {
        iterations = iteration;
        let weights_prev = state.weights.clone();
        let sparse_prev = state.sparse.clone();
        let basis_prev = state.basis.clone();
        let feasible_prev = state.basis_feasible.clone();

        let ws_warnings = update_weights_sparse(&mut state, panel, cfg)?;
        degenerate_row_events += ws_warnings.len();
        for warning in ws_warnings {
            if degenerate_rows.len() < 16 {
                degenerate_rows.insert(warning);
            }
        }
        let feasible_info = update_feasible_basis(&mut state, cfg)?;
        if feasible_info.rejected {
            rejected_feasible += 1;
        }
        if !feasible_info.converged {
            inner_unconverged += 1;
        }
        update_basis(&mut state, panel, cfg)?;
        update_dual(&mut state);

        let f = evaluate_penalized(&state, panel, cfg.lasso_penalty);
        let g = f + augmentation(&state, cfg.step_size);

        let step_w_sq: f64 = state
            .weights
            .iter()
            .zip(&weights_prev)
            .map(|(a, b)| (a - b).norm_squared())
            .sum();
        let step_s_sq: f64 = state
            .sparse
            .iter()
            .zip(&sparse_prev)
            .map(|(a, b)| a.frob_sq_diff(b))
            .sum();
        let step_basis_sq = (&state.basis - &basis_prev).norm_squared();
        let step_feasible_sq = (&state.basis_feasible - &feasible_prev).norm_squared();
        let primal = primal_residual(&state, ell);
        ws_basis = basis_prev;

        trace.records.push(TraceRecord {
            iteration,
            augmented: g,
            penalized: f,
            primal_residual: primal,
            step_w_sq,
            step_s_sq,
            step_basis_sq,
            step_feasible_sq,
            wall_time_s: started.elapsed().as_secs_f64(),
        });

        if g > g_prev + descent_slack(g_prev) {
            return Err(Error::NonDescent {
                iteration,
                previous: g_prev,
                current: g,
                step_size: cfg.step_size,
            });
        }

        let objective_met = (g_prev - g).abs() < cfg.tol;
        let basis_met = step_basis_sq.sqrt() / ell < cfg.tol;
        // The stated stopping rules alone can fire while the basis and its
        // feasible copy still disagree; gate them on near-feasibility.
        if (objective_met || basis_met) && primal <= 10.0 * cfg.tol {
            termination = if objective_met {
                Termination::ObjectiveDelta
            } else {
                Termination::BasisStep
            };
            converged = true;
            break;
        }
        g_prev = g;
    }

    if rejected_feasible > 0 {
        warnings.push(format!(
            "feasible-basis candidate rejected in {rejected_feasible} iteration(s)"
        ));
    }
    if inner_unconverged > 0 {
        warnings.push(format!(
            "inner projection under-converged in {inner_unconverged} iteration(s)"
        ));
    }
    if degenerate_row_events > 0 {
        warnings.push(format!("{degenerate_row_events} degenerate weight-row event(s)"));
        warnings.extend(degenerate_rows);
    }

    Ok(RunOutput {
        state,
        trace,
        termination,
        converged,
        iterations,
        warnings,
        ws_basis,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{EntityData, PanelData};
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    fn randn(rows: usize, cols: usize, rng: &mut ChaCha12Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    /// Panel assembled directly from regression pairs (columns of `y` need
    /// not be lag shifts of `x`), mirroring the Gram caching of ingestion.
    fn panel_from_pairs(pairs: Vec<(DMatrix<f64>, DMatrix<f64>)>) -> PanelData {
        let dim = pairs[0].0.nrows();
        let entities = pairs
            .into_iter()
            .enumerate()
            .map(|(m, (x, y))| {
                let t_len = x.ncols();
                let scale = 1.0 / t_len as f64;
                EntityData {
                    id: format!("e{m:02}"),
                    gram: &x * x.transpose() * scale,
                    cross: &y * x.transpose() * scale,
                    y_sq_scaled: y.iter().map(|v| v * v).sum::<f64>() * scale,
                    x,
                    y,
                    t_len,
                }
            })
            .collect();
        PanelData { entities, dim }
    }

    /// Noiseless panel generated by exact transition matrices on random
    /// regressors.
    fn exact_panel(transitions: &[DMatrix<f64>], t_len: usize, seed: u64) -> PanelData {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let pairs = transitions
            .iter()
            .map(|a| {
                let x = randn(a.nrows(), t_len, &mut rng);
                let y = a * &x;
                (x, y)
            })
            .collect();
        panel_from_pairs(pairs)
    }

    fn noisy_panel(
        transitions: &[DMatrix<f64>],
        t_len: usize,
        noise: f64,
        seed: u64,
    ) -> PanelData {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let pairs = transitions
            .iter()
            .map(|a| {
                let x = randn(a.nrows(), t_len, &mut rng);
                let y = a * &x + randn(a.nrows(), t_len, &mut rng) * noise;
                (x, y)
            })
            .collect();
        panel_from_pairs(pairs)
    }

    fn truth_state(basis: &DMatrix<f64>, n_entities: usize) -> LsPvarState {
        let p = basis.nrows();
        LsPvarState {
            weights: vec![DVector::repeat(p, 1.0); n_entities],
            sparse: vec![SparseMatrix::zeros(p); n_entities],
            basis: basis.clone(),
            basis_feasible: basis.clone(),
            dual: DMatrix::zeros(p, p),
            inner: IntersectionState::cold(basis),
        }
    }

    /// Direct re-implementation of the penalized objective with explicit
    /// loops over time points and entries.
    fn oracle_penalized(state: &LsPvarState, panel: &PanelData, eta: f64) -> f64 {
        let mut total = 0.0;
        for (m, entity) in panel.entities.iter().enumerate() {
            let a = state.transition(m);
            let p = panel.dim;
            let mut rss = 0.0;
            for t in 0..entity.t_len {
                for i in 0..p {
                    let mut r = entity.y[(i, t)];
                    for l in 0..p {
                        r -= a[(i, l)] * entity.x[(l, t)];
                    }
                    rss += r * r;
                }
            }
            total += rss / (2.0 * entity.t_len as f64);
            total += eta * state.sparse[m].l1_norm();
        }
        total
    }

    #[test]
    fn objective_zero_on_exact_model() {
        let basis = DMatrix::identity(3, 3);
        let panel = exact_panel(&[basis.clone(), basis.clone()], 12, 1);
        let mut cfg = SolverConfig::auto(3, 2, 3);
        cfg.lasso_penalty = 0.2;
        let state = truth_state(&basis, 2);
        assert!(evaluate_penalized(&state, &panel, cfg.lasso_penalty).abs() <= 1e-12);
        assert!(evaluate_augmented(&state, &panel, &cfg).abs() <= 1e-12);
    }

    #[test]
    fn objective_penalty_linearity() {
        let basis = DMatrix::identity(3, 3);
        let panel = exact_panel(&[basis.clone()], 9, 2);
        let mut cfg = SolverConfig::auto(3, 1, 3);
        cfg.lasso_penalty = 0.4;
        let base = truth_state(&basis, 1);
        let mut bumped = base.clone();
        bumped.sparse[0] = SparseMatrix::from_triplets(3, &[(0, 1, 1.0)]);
        let delta = evaluate_augmented(&bumped, &panel, &cfg) - evaluate_augmented(&base, &panel, &cfg);
        let ls_change =
            oracle_penalized(&bumped, &panel, 0.0) - oracle_penalized(&base, &panel, 0.0);
        assert_relative_eq!(delta, cfg.lasso_penalty + ls_change, epsilon = 1e-10);
    }

    #[test]
    fn objective_matches_loop_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let a = randn(2, 2, &mut rng);
        let panel = noisy_panel(&[a], 3, 0.5, 4);
        let mut state = truth_state(&randn(2, 2, &mut rng), 1);
        state.weights[0] = DVector::from_vec(vec![0.7, -1.2]);
        state.sparse[0] = SparseMatrix::from_triplets(2, &[(0, 1, 0.3), (1, 0, -0.9)]);
        let eta = 0.25;
        assert_relative_eq!(
            evaluate_penalized(&state, &panel, eta),
            oracle_penalized(&state, &panel, eta),
            max_relative = 1e-12
        );
    }

    #[test]
    fn weights_sparse_saturating_penalty_gives_row_ols() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let a = randn(3, 3, &mut rng);
        let panel = noisy_panel(&[a], 30, 0.3, 6);
        let mut cfg = SolverConfig::auto(3, 2, 3);
        cfg.lasso_penalty = 1e12;
        let basis = crate::projections::project_intersection(
            &randn(3, 3, &mut rng),
            &cfg.constraint(3).unwrap(),
            None,
            500,
            1e-9,
        )
        .unwrap()
        .projected;
        let mut state = truth_state(&basis, 1);
        update_weights_sparse(&mut state, &panel, &cfg).unwrap();
        assert_eq!(state.sparse[0].nnz(), 0);
        let entity = &panel.entities[0];
        for j in 0..3 {
            let phi_j = basis.row(j).transpose();
            let denom = (entity.gram.clone() * &phi_j).dot(&phi_j);
            let num = entity.cross.row(j).transpose().dot(&phi_j);
            assert_relative_eq!(state.weights[0][j], num / denom, epsilon = 1e-10);
        }
    }

    #[test]
    fn weights_sparse_scalar_sequential_update() {
        // p = 1: one weight and one sparse scalar, unpenalized.
        let x = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let y = DMatrix::from_row_slice(1, 2, &[2.0, 3.0]);
        let panel = panel_from_pairs(vec![(x.clone(), y.clone())]);
        let mut cfg = SolverConfig::auto(1, 1, 1);
        cfg.lasso_penalty = 0.0;
        cfg.lasso_tol = 0.0;
        let phi = 1.0;
        let mut state = truth_state(&DMatrix::from_element(1, 1, phi), 1);
        let s0 = 0.5;
        state.sparse[0] = SparseMatrix::from_triplets(1, &[(0, 0, s0)]);
        update_weights_sparse(&mut state, &panel, &cfg).unwrap();

        // Weight given the old sparse value, then sparse OLS on the residual,
        // then further exact alternation until the pair stabilizes.
        let sum_xx: f64 = x.iter().map(|v| v * v).sum();
        let mut w_hand = 0.0;
        let mut s_hand = s0;
        for _ in 0..200 {
            let num: f64 = (0..2).map(|t| (y[(0, t)] - s_hand * x[(0, t)]) * phi * x[(0, t)]).sum();
            w_hand = num / (phi * phi * sum_xx);
            let res_num: f64 = (0..2).map(|t| (y[(0, t)] - w_hand * phi * x[(0, t)]) * x[(0, t)]).sum();
            s_hand = res_num / sum_xx;
        }
        // First half-step by hand: w given s0.
        let num0: f64 = (0..2).map(|t| (y[(0, t)] - s0 * x[(0, t)]) * phi * x[(0, t)]).sum();
        let w_first = num0 / (phi * phi * sum_xx);
        let s_first = (0..2)
            .map(|t| (y[(0, t)] - w_first * phi * x[(0, t)]) * x[(0, t)])
            .sum::<f64>()
            / sum_xx;
        // The lasso iterates its single coordinate to stationarity given w,
        // which for one coordinate is exactly the residual OLS.
        assert_relative_eq!(state.weights[0][0], w_first, epsilon = 1e-12);
        assert_relative_eq!(
            state.sparse[0].row(0)[0].1,
            s_first,
            epsilon = 1e-12
        );
        // Repeated block updates approach the alternating fixed point.
        for _ in 0..200 {
            update_weights_sparse(&mut state, &panel, &cfg).unwrap();
        }
        assert_relative_eq!(state.weights[0][0], w_hand, epsilon = 1e-9);
        assert_relative_eq!(state.sparse[0].row(0)[0].1, s_hand, epsilon = 1e-9);
    }

    #[test]
    fn weights_sparse_satisfies_lasso_kkt() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let a0 = randn(3, 3, &mut rng) * 0.4;
        let a1 = randn(3, 3, &mut rng) * 0.4;
        let panel = noisy_panel(&[a0, a1], 50, 0.3, 8);
        let mut cfg = SolverConfig::auto(3, 2, 2);
        cfg.lasso_penalty = 0.05;
        cfg.lasso_tol = 1e-12;
        cfg.lasso_sweeps = 10_000;
        let mut state = init_random(3, 2, &cfg, 11).unwrap();
        update_weights_sparse(&mut state, &panel, &cfg).unwrap();
        assert!(lasso_kkt_residual(&state, &panel, &cfg) <= 1e-6);
    }

    #[test]
    fn weights_sparse_never_increases_objective() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let a = randn(4, 4, &mut rng) * 0.4;
        let panel = noisy_panel(&[a], 40, 0.5, 10);
        let mut cfg = SolverConfig::auto(4, 1, 2);
        cfg.lasso_penalty = 0.08;
        let mut state = init_random(4, 1, &cfg, 13).unwrap();
        let before = evaluate_augmented(&state, &panel, &cfg);
        update_weights_sparse(&mut state, &panel, &cfg).unwrap();
        let after = evaluate_augmented(&state, &panel, &cfg);
        assert!(after <= before + 1e-12 * before.abs());
    }

    #[test]
    fn feasible_basis_fixed_point() {
        let cfg = SolverConfig::auto(3, 2, 2);
        let spec = cfg.constraint(3).unwrap();
        let point = crate::projections::project_intersection(
            &DMatrix::from_fn(3, 3, |i, j| ((i * 3 + j) as f64).sin()),
            &spec,
            None,
            2000,
            1e-10,
        )
        .unwrap()
        .projected;
        let mut state = truth_state(&point, 1);
        let info = update_feasible_basis(&mut state, &cfg).unwrap();
        assert!(!info.rejected);
        assert!((&state.basis_feasible - &point).norm() <= 1e-8 * cfg.nuclear_norm);
    }

    #[test]
    fn feasible_basis_proximal_limit_is_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        let mut cfg = SolverConfig::auto(3, 2, 2);
        cfg.proximal_weight = 1e12;
        let spec = cfg.constraint(3).unwrap();
        let feasible = crate::projections::project_intersection(
            &randn(3, 3, &mut rng),
            &spec,
            None,
            2000,
            1e-10,
        )
        .unwrap()
        .projected;
        let mut state = truth_state(&feasible, 1);
        state.basis = randn(3, 3, &mut rng);
        let before = state.basis_feasible.clone();
        update_feasible_basis(&mut state, &cfg).unwrap();
        assert!((&state.basis_feasible - &before).norm() <= 1e-5 * cfg.nuclear_norm);
    }

    #[test]
    fn feasible_basis_random_within_tolerance() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let cfg = SolverConfig::auto(3, 2, 2);
        let spec = cfg.constraint(3).unwrap();
        for _ in 0..20 {
            let mut state = init_random(3, 1, &cfg, rng.random()).unwrap();
            state.basis = randn(3, 3, &mut rng);
            state.dual = randn(3, 3, &mut rng) * 0.1;
            update_feasible_basis(&mut state, &cfg).unwrap();
            let tol = spec.feasibility_tol();
            assert!(spec.in_low_rank_set(&state.basis_feasible, tol));
            assert!(spec.in_equal_row_set(&state.basis_feasible, tol));
        }
    }

    #[test]
    fn basis_update_zero_weights_copies_feasible_minus_dual() {
        let mut rng = ChaCha12Rng::seed_from_u64(19);
        let a = randn(3, 3, &mut rng) * 0.3;
        let panel = noisy_panel(&[a], 20, 0.4, 20);
        let cfg = SolverConfig::auto(3, 2, 2);
        let mut state = init_random(3, 1, &cfg, 21).unwrap();
        state.weights[0] = DVector::zeros(3);
        state.dual = randn(3, 3, &mut rng) * 0.2;
        update_basis(&mut state, &panel, &cfg).unwrap();
        let expected = &state.basis_feasible - &state.dual;
        assert!((&state.basis - expected).norm() <= 1e-12);
    }

    #[test]
    fn basis_update_identity_gram_closed_form() {
        // X = sqrt(p) I makes gram exactly the identity.
        let p = 3;
        let x = DMatrix::identity(p, p) * (p as f64).sqrt();
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let y = randn(p, p, &mut rng);
        let panel = panel_from_pairs(vec![(x, y)]);
        let cfg = SolverConfig::auto(p, 1, p);
        let mut state = init_random(p, 1, &cfg, 25).unwrap();
        let rho = cfg.step_size;
        let expected = (state.basis_feasible.clone() * rho + &panel.entities[0].cross) / (rho + 1.0);
        update_basis(&mut state, &panel, &cfg).unwrap();
        assert!((&state.basis - expected).norm() <= 1e-12);
    }

    #[test]
    fn basis_update_matches_kronecker_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(27);
        let p = 3;
        let a0 = randn(p, p, &mut rng) * 0.4;
        let a1 = randn(p, p, &mut rng) * 0.4;
        let panel = noisy_panel(&[a0, a1], 25, 0.5, 28);
        let cfg = SolverConfig::auto(p, 2, 2);
        let mut state = init_random(p, 2, &cfg, 29).unwrap();
        state.weights[0] = DVector::from_vec(vec![0.5, -1.0, 2.0]);
        state.weights[1] = DVector::from_vec(vec![1.5, 0.0, -0.7]);
        state.sparse[0] = SparseMatrix::from_triplets(p, &[(0, 2, 0.4), (2, 1, -0.6)]);
        state.dual = randn(p, p, &mut rng) * 0.1;

        // Oracle: one dense solve of the stacked first-order condition in
        // row-major vectorization, where the operator is
        // rho I + sum_m kron(diag(w_m)^2, gram_m).
        let n = p * p;
        let mut big = DMatrix::<f64>::identity(n, n) * cfg.step_size;
        for (m, entity) in panel.entities.iter().enumerate() {
            for j in 0..p {
                let w2 = state.weights[m][j] * state.weights[m][j];
                for k in 0..p {
                    for l in 0..p {
                        big[(j * p + k, j * p + l)] += w2 * entity.gram[(l, k)];
                    }
                }
            }
        }
        let mut rhs = DVector::<f64>::zeros(n);
        for j in 0..p {
            for k in 0..p {
                rhs[j * p + k] =
                    cfg.step_size * (state.basis_feasible[(j, k)] - state.dual[(j, k)]);
            }
        }
        for (m, entity) in panel.entities.iter().enumerate() {
            let s_dense = state.sparse[m].to_dense();
            let data = &entity.cross - &s_dense * &entity.gram;
            for j in 0..p {
                for k in 0..p {
                    rhs[j * p + k] += state.weights[m][j] * data[(j, k)];
                }
            }
        }
        let solution = big.lu().solve(&rhs).unwrap();

        update_basis(&mut state, &panel, &cfg).unwrap();
        for j in 0..p {
            for k in 0..p {
                assert_relative_eq!(state.basis[(j, k)], solution[j * p + k], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn dual_update_accumulates_gap() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let cfg = SolverConfig::auto(2, 1, 2);
        let mut state = init_random(2, 1, &cfg, 33).unwrap();
        state.basis = state.basis_feasible.clone();
        update_dual(&mut state);
        assert_eq!(state.dual, DMatrix::zeros(2, 2));

        let gap = randn(2, 2, &mut rng);
        state.basis = &state.basis_feasible + &gap;
        update_dual(&mut state);
        assert!((state.dual.clone() - &gap).norm() <= 1e-15);
        update_dual(&mut state);
        update_dual(&mut state);
        assert!((state.dual.clone() - &gap * 3.0).norm() <= 1e-12);
    }

    #[test]
    fn init_random_deterministic_and_feasible() {
        let cfg = SolverConfig::auto(4, 3, 2);
        let spec = cfg.constraint(4).unwrap();
        let a = init_random(4, 3, &cfg, 99).unwrap();
        let b = init_random(4, 3, &cfg, 99).unwrap();
        assert_eq!(a.basis_feasible, b.basis_feasible);
        assert_eq!(a.basis, a.basis_feasible);
        assert!(a.weights.iter().all(|w| w.iter().all(|&v| v == 1.0)));
        assert!(a.sparse.iter().all(SparseMatrix::is_empty));
        let tol = spec.feasibility_tol();
        assert!(spec.in_low_rank_set(&a.basis_feasible, tol));
        assert!(spec.in_equal_row_set(&a.basis_feasible, tol));
        let c = init_random(4, 3, &cfg, 100).unwrap();
        assert!((&a.basis_feasible - &c.basis_feasible).norm() > 1e-6);
    }

    #[test]
    fn init_spectral_recovers_rank_one_directions() {
        let p = 4;
        let ones = DMatrix::from_element(p, p, 1.0 / p as f64);
        let panel = exact_panel(&[ones.clone(), ones.clone(), ones.clone()], 20, 35);
        let cfg = SolverConfig::auto(p, 1, 1);
        let state = init_spectral(&panel, &cfg).unwrap();
        for i in 0..p {
            let row = state.basis.row(i).transpose();
            let truth = ones.row(i).transpose();
            let cosine = row.dot(&truth) / (row.norm() * truth.norm());
            assert!(cosine > 1.0 - 1e-8, "row {i} cosine {cosine}");
        }
    }

    #[test]
    fn init_spectral_single_entity_uses_fit_rows() {
        let mut rng = ChaCha12Rng::seed_from_u64(37);
        let a = randn(3, 3, &mut rng) * 0.5;
        let panel = exact_panel(&[a.clone()], 30, 38);
        let cfg = SolverConfig::auto(3, 2, 3);
        let state = init_spectral(&panel, &cfg).unwrap();
        for i in 0..3 {
            let row = state.basis.row(i).transpose();
            let fit_row = a.row(i).transpose();
            let cosine = row.dot(&fit_row).abs() / (row.norm() * fit_row.norm());
            assert!(cosine > 1.0 - 1e-8, "row {i} cosine {cosine}");
        }
    }

    #[test]
    fn fit_noiseless_truth_is_fixed_point() {
        let p = 3;
        let basis = DMatrix::identity(p, p);
        let panel = exact_panel(&[basis.clone(), basis.clone()], 15, 41);
        let mut cfg = SolverConfig::auto(p, 2, p);
        cfg.lasso_penalty = 0.05;
        let init = truth_state(&basis, 2);
        let out = fit(&panel, &cfg, &init).unwrap();
        assert!(out.converged);
        assert!(out.iterations <= 2, "took {} iterations", out.iterations);
        assert!(out.trace.records.last().unwrap().augmented.abs() <= 1e-10);
        assert_eq!(out.restarts, 0);
    }

    #[test]
    fn fit_tiny_step_size_fails_non_descent() {
        let mut rng = ChaCha12Rng::seed_from_u64(43);
        let a0 = randn(3, 3, &mut rng) * 0.5;
        let a1 = randn(3, 3, &mut rng) * 0.5;
        let panel = noisy_panel(&[a0, a1], 30, 0.5, 44);
        let mut cfg = SolverConfig::auto(3, 2, 2);
        cfg.lasso_penalty = 0.05;
        cfg.step_size = 1e-8;
        cfg.proximal_weight = 2.0 / cfg.step_size;
        cfg.max_iter = 3000;
        let init = init_random(3, 2, &cfg, 45).unwrap();
        let result = fit(&panel, &cfg, &init);
        assert!(
            matches!(result, Err(Error::NonDescent { .. })),
            "expected NonDescent, got {result:?}"
        );
    }

    #[test]
    fn fit_deterministic_traces() {
        let mut rng = ChaCha12Rng::seed_from_u64(47);
        let a = randn(3, 3, &mut rng) * 0.5;
        let panel = noisy_panel(&[a], 40, 0.4, 48);
        let mut cfg = SolverConfig::auto(3, 2, 2);
        cfg.lasso_penalty = 0.03;
        cfg.max_iter = 500;
        let init = init_random(3, 1, &cfg, 49).unwrap();
        let out1 = fit(&panel, &cfg, &init).unwrap();
        let out2 = fit(&panel, &cfg, &init).unwrap();
        let g1 = out1.trace.augmented_values();
        let g2 = out2.trace.augmented_values();
        assert_eq!(g1, g2);
        assert_eq!(out1.state.basis, out2.state.basis);
        assert_eq!(out1.state.weights, out2.state.weights);
    }

    #[test]
    fn fit_descent_certificate_and_feasibility() {
        let mut rng = ChaCha12Rng::seed_from_u64(51);
        let a0 = randn(4, 4, &mut rng) * 0.4;
        let a1 = randn(4, 4, &mut rng) * 0.4;
        let a2 = randn(4, 4, &mut rng) * 0.4;
        let panel = noisy_panel(&[a0, a1, a2], 60, 0.4, 52);
        let mut cfg = SolverConfig::auto(4, 2, 2);
        cfg.lasso_penalty = 0.05;
        cfg.max_iter = 5000;
        let init = init_random(4, 3, &cfg, 53).unwrap();
        let out = fit(&panel, &cfg, &init).unwrap();
        assert!(out.converged, "termination {:?}", out.termination);
        for w in out.trace.records.windows(2) {
            assert!(
                w[1].augmented <= w[0].augmented + 1e-9 * w[0].augmented.abs(),
                "objective increased at iteration {}",
                w[1].iteration
            );
        }
        let spec = cfg.constraint(4).unwrap();
        let tol = spec.feasibility_tol();
        assert!(spec.in_low_rank_set(&out.state.basis_feasible, tol));
        assert!(spec.in_equal_row_set(&out.state.basis_feasible, tol));
        assert!(primal_residual(&out.state, cfg.nuclear_norm) <= 10.0 * cfg.tol);
        assert!(out.kkt_residual <= 1e-5, "kkt {}", out.kkt_residual);
        for (before, after) in out.rss_before_refine.iter().zip(&out.rss_per_entity) {
            assert!(after <= &(before * (1.0 + 1e-12)));
        }
    }

    #[test]
    fn fit_permutation_equivariance() {
        let mut rng = ChaCha12Rng::seed_from_u64(55);
        let a0 = randn(3, 3, &mut rng) * 0.5;
        let a1 = randn(3, 3, &mut rng) * 0.3;
        let panel = noisy_panel(&[a0, a1], 30, 0.4, 56);
        let mut swapped = panel.clone();
        swapped.entities.reverse();

        let mut cfg = SolverConfig::auto(3, 2, 2);
        cfg.lasso_penalty = 0.05;
        cfg.max_iter = 2000;
        let init = init_random(3, 2, &cfg, 57).unwrap();
        let mut init_swapped = init.clone();
        init_swapped.weights.reverse();
        init_swapped.sparse.reverse();

        let out = fit(&panel, &cfg, &init).unwrap();
        let out_swapped = fit(&swapped, &cfg, &init_swapped).unwrap();
        assert!((&out.state.basis - &out_swapped.state.basis).norm() <= 1e-9);
        assert!((&out.state.weights[0] - &out_swapped.state.weights[1]).norm() <= 1e-9);
        assert!((&out.state.weights[1] - &out_swapped.state.weights[0]).norm() <= 1e-9);
        let g_a = out.trace.records.last().unwrap().augmented;
        let g_b = out_swapped.trace.records.last().unwrap().augmented;
        assert_relative_eq!(g_a, g_b, max_relative = 1e-9);
    }

    #[test]
    fn refine_empty_support_is_weight_regression() {
        let mut rng = ChaCha12Rng::seed_from_u64(59);
        let a = randn(3, 3, &mut rng) * 0.5;
        let panel = noisy_panel(&[a], 25, 0.3, 60);
        let cfg = SolverConfig::auto(3, 2, 2);
        let mut state = init_random(3, 1, &cfg, 61).unwrap();
        state.weights[0] = DVector::from_vec(vec![9.0, 9.0, 9.0]);
        ols_refine(&mut state, &panel, &cfg).unwrap();
        let entity = &panel.entities[0];
        for j in 0..3 {
            let phi_j = state.basis.row(j).transpose();
            let denom = (entity.gram.clone() * &phi_j).dot(&phi_j);
            let num = entity.cross.row(j).transpose().dot(&phi_j);
            assert_relative_eq!(state.weights[0][j], num / denom, epsilon = 1e-10);
        }
    }

    #[test]
    fn refine_full_support_matches_direct_ols() {
        let mut rng = ChaCha12Rng::seed_from_u64(63);
        let p = 3;
        let a = randn(p, p, &mut rng) * 0.4;
        let panel = noisy_panel(&[a], 30, 0.4, 64);
        let cfg = SolverConfig::auto(p, 2, 2);
        let mut state = init_random(p, 1, &cfg, 65).unwrap();
        let mut triplets = Vec::new();
        for i in 0..p {
            for j in 0..p {
                triplets.push((i, j, 0.1));
            }
        }
        state.sparse[0] = SparseMatrix::from_triplets(p, &triplets);
        ols_refine(&mut state, &panel, &cfg).unwrap();

        // With full support, phi_j X is an exact combination of the rows of
        // X, so coefficients are not unique; fitted values are. Compare the
        // achieved residual against a direct least squares on [phi_j X; X].
        let entity = &panel.entities[0];
        let refined_rss = rss_per_entity(&state, &panel)[0];
        let mut direct_rss = 0.0;
        for j in 0..p {
            let phi_x = state.basis.row(j) * &entity.x;
            let mut design = DMatrix::<f64>::zeros(p + 1, entity.t_len);
            design.row_mut(0).copy_from(&phi_x);
            for l in 0..p {
                design.row_mut(1 + l).copy_from(&entity.x.row(l));
            }
            let svd = design.transpose().svd(true, true);
            let coef = svd.solve(&entity.y.row(j).transpose(), 1e-12).unwrap();
            let fitted = design.transpose() * coef;
            direct_rss += (entity.y.row(j).transpose() - fitted).norm_squared();
        }
        assert_relative_eq!(refined_rss, direct_rss, max_relative = 1e-9);
    }
}
