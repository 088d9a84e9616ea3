//! Projections onto the two nonconvex constraint sets that identify the
//! shared basis, and the inner ADMM that targets their intersection.
//!
//! The basis must live in the set of matrices with rank at most `max_rank`
//! and nuclear norm exactly `nuclear_norm` (a simplex over singular values),
//! intersected with the set of matrices whose rows all share the same nonzero
//! Euclidean norm. Both projections have closed forms: the first reduces to a
//! projection of singular values onto a cardinality-constrained simplex, the
//! second rescales rows to their average norm.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Rank detection threshold, relative to the nuclear norm budget.
pub const RANK_TOL: f64 = 1e-8;

/// The constraint pair for the shared basis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintSpec {
    /// Matrix dimension `p`.
    pub dim: usize,
    /// Maximum admissible rank, `1 <= max_rank <= dim`.
    pub max_rank: usize,
    /// Required nuclear norm, `> 0`.
    pub nuclear_norm: f64,
}

impl ConstraintSpec {
    pub fn new(dim: usize, max_rank: usize, nuclear_norm: f64) -> Result<Self> {
        if dim == 0 || max_rank == 0 || max_rank > dim {
            return Err(Error::InvalidConfig(format!(
                "need 1 <= max_rank <= dim, got max_rank={max_rank}, dim={dim}"
            )));
        }
        if !(nuclear_norm > 0.0) || !nuclear_norm.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "nuclear norm must be positive and finite, got {nuclear_norm}"
            )));
        }
        Ok(Self {
            dim,
            max_rank,
            nuclear_norm,
        })
    }

    /// Default feasibility tolerance for membership tests.
    pub fn feasibility_tol(&self) -> f64 {
        1e-6 * self.nuclear_norm
    }

    /// Membership test for the rank/nuclear-norm set: rank at most
    /// `max_rank` (singular values above `RANK_TOL * nuclear_norm`) and
    /// nuclear norm within `tol` of the budget.
    pub fn in_low_rank_set(&self, m: &DMatrix<f64>, tol: f64) -> bool {
        let Ok(sv) = singular_values(m) else {
            return false;
        };
        let rank = sv
            .iter()
            .filter(|&&s| s > RANK_TOL * self.nuclear_norm)
            .count();
        let nuclear: f64 = sv.iter().sum();
        rank <= self.max_rank && (nuclear - self.nuclear_norm).abs() <= tol
    }

    /// Membership test for the equal-row-norm set: all row norms within
    /// `tol` of each other and bounded away from zero.
    pub fn in_equal_row_set(&self, m: &DMatrix<f64>, tol: f64) -> bool {
        let norms: Vec<f64> = (0..m.nrows()).map(|i| m.row(i).norm()).collect();
        let max = norms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = norms.iter().cloned().fold(f64::INFINITY, f64::min);
        max - min <= tol && min > tol
    }

    /// Deterministic feasible point used when the projection input is zero.
    /// For `max_rank == dim` this is the uniformly scaled identity; below
    /// full rank the identity leaves the set, so a rank-one matrix of ones
    /// (equal row norms, nuclear norm equal to the budget) is used instead.
    pub fn degenerate_point(&self) -> DMatrix<f64> {
        let p = self.dim;
        let c = self.nuclear_norm / p as f64;
        if self.max_rank == p {
            DMatrix::identity(p, p) * c
        } else {
            DMatrix::from_element(p, p, c)
        }
    }
}

/// Iterates of the inner ADMM over the constraint intersection, kept for
/// warm starts across outer iterations.
#[derive(Debug, Clone)]
pub struct IntersectionState {
    /// Iterate feasible for the rank/nuclear-norm set.
    pub low_rank: DMatrix<f64>,
    /// Iterate feasible for the equal-row-norm set.
    pub equal_rows: DMatrix<f64>,
    /// Dual variable coupling the two iterates.
    pub dual: DMatrix<f64>,
}

impl IntersectionState {
    /// Cold-start state anchored at `point` with zero dual.
    pub fn cold(point: &DMatrix<f64>) -> Self {
        Self {
            low_rank: point.clone(),
            equal_rows: point.clone(),
            dual: DMatrix::zeros(point.nrows(), point.ncols()),
        }
    }
}

/// Result of the inner projection ADMM.
#[derive(Debug, Clone)]
pub struct IntersectionOutcome {
    /// Point returned as the projection; feasible for both sets within the
    /// reported residual.
    pub projected: DMatrix<f64>,
    /// Final iterates for warm starting the next call.
    pub state: IntersectionState,
    /// Whether the residual dropped below tolerance within the sweep budget.
    pub converged: bool,
    pub sweeps: usize,
    /// `||low_rank - equal_rows||_F / nuclear_norm` of the returned point.
    pub residual: f64,
    /// Input was zero (or collapsed to zero); the deterministic fallback
    /// feasible point was returned.
    pub degenerate: bool,
    /// Number of zero rows replaced by a tiny deterministic perturbation
    /// before row rescaling.
    pub perturbed_rows: usize,
    /// Inner objective value after each sweep, for descent monitoring.
    pub objective_history: Vec<f64>,
}

/// Projects nonincreasing nonnegative `theta` onto the simplex
/// `{ d >= 0, sum d = ell, at most max_rank nonzeros }`, minimizing
/// `sum_i (d_i^2 - 2 theta_i d_i)`.
///
/// The support is a prefix: with `cs(j) = (theta_1 + .. + theta_j - ell)/j`,
/// the split index is the largest `j <= max_rank` with `cs(j) <= theta_j`,
/// and the projection subtracts `cs` from the prefix.
pub fn simplex_rank_project(theta: &[f64], ell: f64, max_rank: usize) -> Result<Vec<f64>> {
    if theta.is_empty() {
        return Err(Error::EmptyInput("simplex projection input".into()));
    }
    if !(ell > 0.0) || !ell.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "simplex budget must be positive, got {ell}"
        )));
    }
    if max_rank == 0 || max_rank > theta.len() {
        return Err(Error::InvalidConfig(format!(
            "need 1 <= max_rank <= {}, got {max_rank}",
            theta.len()
        )));
    }
    let slack = 1e-12 * theta[0].abs().max(1.0);
    for i in 0..theta.len() {
        if theta[i] < -slack || (i + 1 < theta.len() && theta[i + 1] > theta[i] + slack) {
            return Err(Error::UnsortedInput);
        }
    }

    let mut prefix = 0.0;
    let mut split = 1;
    let mut split_cs = theta[0] - ell;
    for j in 1..=max_rank {
        prefix += theta[j - 1].max(0.0);
        let cs = (prefix - ell) / j as f64;
        if cs <= theta[j - 1] {
            split = j;
            split_cs = cs;
        }
    }
    let mut d = vec![0.0; theta.len()];
    for i in 0..split {
        d[i] = (theta[i].max(0.0) - split_cs).max(0.0);
    }
    Ok(d)
}

/// Projects onto the rank/nuclear-norm set: replaces the singular values of
/// `x` with their simplex projection, keeping the singular vectors.
///
/// Returns the projected matrix and a flag marking the degenerate zero-input
/// fallback (`ConstraintSpec::degenerate_point` restricted to this set).
pub fn project_low_rank(x: &DMatrix<f64>, spec: &ConstraintSpec) -> Result<(DMatrix<f64>, bool)> {
    check_dims(x, spec.dim)?;
    if x.iter().all(|&v| v == 0.0) {
        let p = spec.dim;
        let mut out = DMatrix::zeros(p, p);
        let c = spec.nuclear_norm / spec.max_rank as f64;
        for i in 0..spec.max_rank {
            out[(i, i)] = c;
        }
        return Ok((out, true));
    }
    let (u, sigma, v) = svd_parts(x)?;
    let d = simplex_rank_project(&sigma, spec.nuclear_norm, spec.max_rank)?;
    let support = d.iter().take_while(|&&v| v > 0.0).count().max(1);
    let mut scaled_u = u.columns(0, support).into_owned();
    for (k, mut col) in scaled_u.column_iter_mut().enumerate() {
        col *= d[k];
    }
    let out = &scaled_u * v.columns(0, support).transpose();
    Ok((out, false))
}

/// Projects onto the equal-row-norm set: every row is rescaled to the mean
/// row norm of `x`, preserving row directions.
pub fn project_equal_rows(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = x.nrows();
    let norms: Vec<f64> = (0..p).map(|i| x.row(i).norm()).collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::ZeroRow(i));
    }
    let mean = norms.iter().sum::<f64>() / p as f64;
    let mut out = x.clone();
    for i in 0..p {
        let scale = mean / norms[i];
        out.row_mut(i).scale_mut(scale);
    }
    Ok(out)
}

/// Projects `target` onto the intersection of the two constraint sets by an
/// ADMM sweep pair: project the averaged point onto the rank/nuclear set,
/// project the dual-shifted result onto the equal-row-norm set, then take a
/// dual ascent step on their gap.
///
/// Stops when `||low_rank - equal_rows||_F / nuclear_norm <= tol`. The dual
/// sweeps converge in the solver's warm-started, proximal-dominated regime
/// but can cycle from cold starts far outside the intersection; if the sweep
/// budget runs out, a plain alternating-projection phase (whose set gap is
/// monotone by construction) polishes the best iterate within the same
/// budget. Zero rows hit during row rescaling are replaced by a
/// deterministic tiny-first-coordinate perturbation and counted.
pub fn project_intersection(
    target: &DMatrix<f64>,
    spec: &ConstraintSpec,
    warm: Option<IntersectionState>,
    max_sweeps: usize,
    tol: f64,
) -> Result<IntersectionOutcome> {
    check_dims(target, spec.dim)?;
    let p = spec.dim;
    let ell = spec.nuclear_norm;
    if target.iter().all(|&v| v == 0.0) {
        let point = spec.degenerate_point();
        return Ok(IntersectionOutcome {
            projected: point.clone(),
            state: IntersectionState::cold(&point),
            converged: true,
            sweeps: 0,
            residual: 0.0,
            degenerate: true,
            perturbed_rows: 0,
            objective_history: Vec::new(),
        });
    }

    let mut state = match warm {
        Some(w) => {
            check_dims(&w.low_rank, p)?;
            check_dims(&w.equal_rows, p)?;
            check_dims(&w.dual, p)?;
            w
        }
        None => IntersectionState::cold(target),
    };

    let mut history = Vec::new();
    let mut perturbed_rows = 0;
    let mut degenerate = false;
    let mut best: Option<(f64, DMatrix<f64>)> = None;
    let mut sweeps = 0;
    let mut converged = false;

    let perturb_zero_rows = |m: &mut DMatrix<f64>, count: &mut usize| {
        for i in 0..p {
            if m.row(i).norm() == 0.0 {
                m[(i, 0)] = 1e-12 * ell;
                *count += 1;
            }
        }
    };

    // Dual sweeps orbit once they reach the fixed-point neighborhood; stop
    // after this many sweeps without a new best residual and let the
    // monotone polish phase finish the job.
    const STALL_SWEEPS: usize = 10;
    let mut best_sweep = 0;

    for sweep in 1..=max_sweeps {
        sweeps = sweep;
        let mid = (target + &state.equal_rows + &state.dual) * 0.5;
        let (low_rank, deg) = project_low_rank(&mid, spec)?;
        degenerate |= deg;
        state.low_rank = low_rank;

        let mut shifted = &state.low_rank - &state.dual;
        perturb_zero_rows(&mut shifted, &mut perturbed_rows);
        state.equal_rows = project_equal_rows(&shifted)?;
        state.dual += &state.equal_rows - &state.low_rank;

        let gap = (&state.low_rank - &state.equal_rows).norm();
        let residual = gap / ell;
        history.push(inner_objective(target, &state));
        if best.as_ref().is_none_or(|(r, _)| residual < *r) {
            best = Some((residual, state.low_rank.clone()));
            best_sweep = sweep;
        }
        if residual <= tol {
            converged = true;
            break;
        }
        if sweep - best_sweep >= STALL_SWEEPS {
            break;
        }
    }

    if !converged {
        let start = best.as_ref().expect("at least one sweep").1.clone();
        let mut between = start;
        perturb_zero_rows(&mut between, &mut perturbed_rows);
        let mut z = project_equal_rows(&between)?;
        for polish in 1..=max_sweeps {
            let (low_rank, deg) = project_low_rank(&z, spec)?;
            degenerate |= deg;
            let residual = (&low_rank - &z).norm() / ell;
            if best.as_ref().is_none_or(|(r, _)| residual < *r) {
                best = Some((residual, low_rank.clone()));
            }
            if residual <= tol {
                sweeps += polish;
                converged = true;
                state = IntersectionState {
                    equal_rows: z.clone(),
                    dual: DMatrix::zeros(p, p),
                    low_rank,
                };
                break;
            }
            let mut shifted = low_rank;
            perturb_zero_rows(&mut shifted, &mut perturbed_rows);
            z = project_equal_rows(&shifted)?;
        }
        if !converged {
            sweeps += max_sweeps;
            state = IntersectionState {
                low_rank: best.as_ref().expect("at least one sweep").1.clone(),
                equal_rows: z,
                dual: DMatrix::zeros(p, p),
            };
        }
    }

    let (residual, projected) = best.expect("at least one sweep");
    Ok(IntersectionOutcome {
        projected,
        state,
        converged,
        sweeps,
        residual,
        degenerate,
        perturbed_rows,
        objective_history: history,
    })
}

/// Inner ADMM objective: squared distance to the target plus the coupling
/// penalty and dual term.
fn inner_objective(target: &DMatrix<f64>, state: &IntersectionState) -> f64 {
    let gap = &state.equal_rows - &state.low_rank;
    0.5 * (target - &state.low_rank).norm_squared() + 0.5 * gap.norm_squared()
        + state.dual.dot(&gap)
}

/// Sum of singular values.
pub fn nuclear_norm(m: &DMatrix<f64>) -> Result<f64> {
    Ok(singular_values(m)?.iter().sum())
}

/// Singular values of `m`, sorted nonincreasing.
pub fn singular_values(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    Ok(svd_parts(m)?.1)
}

/// Full thin SVD `m = U diag(sigma) V'` with `sigma` sorted nonincreasing
/// and the columns of `U`, `V` permuted to match.
///
/// The fast bidiagonalization backend miscomputes exactly rank-deficient
/// inputs (repeated or zero singular values), so its factorization is
/// verified on probe vectors and a one-sided Jacobi decomposition is used
/// whenever the check fails.
pub fn svd_parts(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>, DMatrix<f64>)> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("svd input".into()));
    }
    if let Some(parts) = fast_svd_checked(m) {
        return Ok(parts);
    }
    jacobi_svd(m)
}

fn fast_svd_checked(m: &DMatrix<f64>) -> Option<(DMatrix<f64>, Vec<f64>, DMatrix<f64>)> {
    let svd = m.clone().try_svd(true, true, f64::EPSILON, 0)?;
    let u = svd.u?;
    let v_t = svd.v_t?;
    let raw: Vec<f64> = svd.singular_values.iter().cloned().collect();
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| raw[b].partial_cmp(&raw[a]).expect("finite singular values"));
    let sigma: Vec<f64> = order.iter().map(|&k| raw[k]).collect();
    let u_sorted = DMatrix::from_fn(u.nrows(), order.len(), |i, j| u[(i, order[j])]);
    let v_sorted = DMatrix::from_fn(v_t.ncols(), order.len(), |i, j| v_t[(order[j], i)]);

    let scale = m.norm().max(f64::MIN_POSITIVE);
    for phase in [0.0_f64, 0.7] {
        let probe = nalgebra::DVector::from_fn(m.ncols(), |k, _| {
            (k as f64 * 0.9 + phase).sin() + 0.5
        });
        let direct = m * &probe;
        let mut projected = v_sorted.transpose() * &probe;
        for (k, value) in projected.iter_mut().enumerate() {
            *value *= sigma[k];
        }
        let reconstructed = &u_sorted * projected;
        if (direct - reconstructed).norm() > 1e-9 * scale * probe.norm() {
            return None;
        }
    }
    Some((u_sorted, sigma, v_sorted))
}

/// One-sided Jacobi SVD: rotates column pairs until mutual orthogonality,
/// reads singular values off the column norms, and completes the left basis
/// deterministically on the null space. Slow but reliable on degenerate
/// spectra.
fn jacobi_svd(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>, DMatrix<f64>)> {
    let (rows, cols) = m.shape();
    if rows < cols {
        let (u, sigma, v) = jacobi_svd(&m.transpose())?;
        return Ok((v, sigma, u));
    }
    let mut work = m.clone();
    let mut v = DMatrix::<f64>::identity(cols, cols);
    let tol = 1e-14;
    // Columns below this norm are numerically zero; rotating them would
    // chase float dust forever since dust stays self-correlated.
    let floor_sq = {
        let floor = m.norm() * f64::EPSILON;
        floor * floor
    };
    let mut converged = false;
    for _sweep in 0..64 {
        let mut max_off = 0.0_f64;
        for a in 0..cols.saturating_sub(1) {
            for b in a + 1..cols {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..rows {
                    let (wa, wb) = (work[(i, a)], work[(i, b)]);
                    alpha += wa * wa;
                    beta += wb * wb;
                    gamma += wa * wb;
                }
                if alpha <= floor_sq || beta <= floor_sq {
                    continue;
                }
                let denom = (alpha * beta).sqrt();
                if gamma.abs() <= tol * denom {
                    continue;
                }
                max_off = max_off.max(gamma.abs() / denom);
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let (wa, wb) = (work[(i, a)], work[(i, b)]);
                    work[(i, a)] = c * wa - s * wb;
                    work[(i, b)] = s * wa + c * wb;
                }
                for i in 0..cols {
                    let (va, vb) = (v[(i, a)], v[(i, b)]);
                    v[(i, a)] = c * va - s * vb;
                    v[(i, b)] = s * va + c * vb;
                }
            }
        }
        if max_off <= tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::SvdFailure);
    }

    let mut order: Vec<usize> = (0..cols).collect();
    let norms: Vec<f64> = (0..cols).map(|j| work.column(j).norm()).collect();
    order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).expect("finite norms"));
    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let v_sorted = DMatrix::from_fn(cols, cols, |i, j| v[(i, order[j])]);

    let scale = m.norm();
    let mut u = DMatrix::<f64>::zeros(rows, cols);
    let mut filled = vec![false; cols];
    for (k, &j) in order.iter().enumerate() {
        if norms[j] > scale * 1e-14 {
            let inv = 1.0 / norms[j];
            for i in 0..rows {
                u[(i, k)] = work[(i, j)] * inv;
            }
            filled[k] = true;
        }
    }
    // Deterministic completion of the left basis on zero singular values:
    // take the standard basis vector with the largest residual after
    // orthogonalization against the accepted columns.
    for k in 0..cols {
        if filled[k] {
            continue;
        }
        let mut best: Option<(f64, DVector<f64>)> = None;
        for e in 0..rows {
            let mut candidate = DVector::<f64>::zeros(rows);
            candidate[e] = 1.0;
            for _pass in 0..2 {
                for other in 0..cols {
                    if other == k || !filled[other] {
                        continue;
                    }
                    let proj = u.column(other).dot(&candidate);
                    for i in 0..rows {
                        candidate[i] -= proj * u[(i, other)];
                    }
                }
            }
            let norm = candidate.norm();
            if best.as_ref().is_none_or(|(b, _)| norm > *b) {
                best = Some((norm, candidate));
            }
        }
        let (norm, candidate) = best.expect("candidate set is nonempty");
        if norm <= 1e-8 {
            return Err(Error::SvdFailure);
        }
        for i in 0..rows {
            u[(i, k)] = candidate[i] / norm;
        }
        filled[k] = true;
    }
    Ok((u, sigma, v_sorted))
}

fn check_dims(m: &DMatrix<f64>, dim: usize) -> Result<()> {
    if m.nrows() != dim || m.ncols() != dim {
        return Err(Error::DimensionMismatch(format!(
            "expected {dim}x{dim}, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("projection input".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    fn random_matrix(p: usize, rng: &mut ChaCha12Rng) -> DMatrix<f64> {
        DMatrix::from_fn(p, p, |_, _| rng.sample(StandardNormal))
    }

    /// Quadratic objective of the constrained simplex problem.
    fn simplex_objective(d: &[f64], theta: &[f64]) -> f64 {
        d.iter()
            .zip(theta)
            .map(|(&di, &ti)| di * di - 2.0 * ti * di)
            .sum()
    }

    /// Independent oracle: enumerate every support of size <= max_rank and
    /// solve the equality-constrained quadratic program on that face,
    /// keeping the best feasible candidate.
    fn simplex_oracle(theta: &[f64], ell: f64, max_rank: usize) -> (Vec<f64>, f64) {
        let p = theta.len();
        let mut best: Option<(Vec<f64>, f64)> = None;
        for mask in 1u32..(1 << p) {
            let support: Vec<usize> = (0..p).filter(|&i| mask & (1 << i) != 0).collect();
            if support.len() > max_rank {
                continue;
            }
            let k = support.len() as f64;
            let shift = (support.iter().map(|&i| theta[i]).sum::<f64>() - ell) / k;
            let mut d = vec![0.0; p];
            let mut feasible = true;
            for &i in &support {
                d[i] = theta[i] - shift;
                if d[i] < -1e-12 {
                    feasible = false;
                    break;
                }
                d[i] = d[i].max(0.0);
            }
            if !feasible {
                continue;
            }
            let obj = simplex_objective(&d, theta);
            if best.as_ref().is_none_or(|(_, b)| obj < *b) {
                best = Some((d, obj));
            }
        }
        best.expect("oracle always finds the single-support candidates")
    }

    #[test]
    fn simplex_worked_example() {
        let d = simplex_rank_project(&[3.0, 1.0], 2.0, 2).unwrap();
        assert_relative_eq!(d[0], 2.0);
        assert_relative_eq!(d[1], 0.0);
        let (oracle, obj) = simplex_oracle(&[3.0, 1.0], 2.0, 2);
        assert_relative_eq!(simplex_objective(&d, &[3.0, 1.0]), obj, epsilon = 1e-12);
        assert_relative_eq!(d[0], oracle[0], epsilon = 1e-12);
    }

    #[test]
    fn simplex_feasible_point_is_fixed() {
        let theta = [0.5, 0.3, 0.2];
        let d = simplex_rank_project(&theta, 1.0, 3).unwrap();
        for (a, b) in d.iter().zip(theta.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn simplex_single_support() {
        let d = simplex_rank_project(&[5.0, 0.0, 0.0], 1.0, 1).unwrap();
        assert_eq!(d, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn simplex_rejects_bad_input() {
        assert!(matches!(
            simplex_rank_project(&[], 1.0, 1),
            Err(Error::EmptyInput(_))
        ));
        assert!(matches!(
            simplex_rank_project(&[1.0, 2.0], 1.0, 2),
            Err(Error::UnsortedInput)
        ));
        assert!(matches!(
            simplex_rank_project(&[1.0, -0.5], 1.0, 2),
            Err(Error::UnsortedInput)
        ));
    }

    #[test]
    fn simplex_matches_oracle_on_random_inputs() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..400 {
            let p = rng.random_range(1..=5);
            let max_rank = rng.random_range(1..=p);
            let ell = rng.random_range(0.1..5.0);
            let mut theta: Vec<f64> = (0..p).map(|_| rng.random_range(0.0..4.0)).collect();
            theta.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let d = simplex_rank_project(&theta, ell, max_rank).unwrap();
            assert!(d.iter().all(|&v| v >= 0.0));
            assert_relative_eq!(d.iter().sum::<f64>(), ell, epsilon = 1e-9);
            assert!(d.iter().filter(|&&v| v > 0.0).count() <= max_rank);
            let (_, oracle_obj) = simplex_oracle(&theta, ell, max_rank);
            let gap = simplex_objective(&d, &theta) - oracle_obj;
            assert!(gap <= 1e-9, "objective gap {gap} vs oracle");
        }
    }

    #[test]
    fn low_rank_projection_fixes_feasible_scaled_identity() {
        let spec = ConstraintSpec::new(3, 3, 2.0).unwrap();
        let x = DMatrix::identity(3, 3) * (2.0 / 3.0);
        let (out, degenerate) = project_low_rank(&x, &spec).unwrap();
        assert!(!degenerate);
        assert_relative_eq!((out - x).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn low_rank_projection_diagonal_example() {
        let spec = ConstraintSpec::new(2, 2, 2.0).unwrap();
        let x = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![3.0, 1.0]));
        let (out, _) = project_low_rank(&x, &spec).unwrap();
        // Grid-search oracle over diagonal candidates d1 + d2 = 2.
        let mut best = f64::INFINITY;
        let mut best_d = (0.0, 0.0);
        for k in 0..=4000 {
            let d1 = 2.0 * k as f64 / 4000.0;
            let cand = (3.0 - d1).powi(2) + (1.0 - (2.0 - d1)).powi(2);
            if cand < best {
                best = cand;
                best_d = (d1, 2.0 - d1);
            }
        }
        assert_relative_eq!(out[(0, 0)], best_d.0, epsilon = 1e-3);
        assert_relative_eq!(out[(1, 1)], best_d.1, epsilon = 1e-3);
        assert_relative_eq!(out[(0, 0)], 2.0, epsilon = 1e-12);
        assert_relative_eq!(out[(1, 1)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn low_rank_projection_zero_fallback() {
        let spec = ConstraintSpec::new(3, 3, 2.0).unwrap();
        let (out, degenerate) = project_low_rank(&DMatrix::zeros(3, 3), &spec).unwrap();
        assert!(degenerate);
        assert_relative_eq!((out - DMatrix::identity(3, 3) * (2.0 / 3.0)).norm(), 0.0);

        let spec = ConstraintSpec::new(3, 2, 2.0).unwrap();
        let (out, degenerate) = project_low_rank(&DMatrix::zeros(3, 3), &spec).unwrap();
        assert!(degenerate);
        assert!(spec.in_low_rank_set(&out, spec.feasibility_tol()));
    }

    #[test]
    fn low_rank_projection_feasible_on_random_inputs() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for case in 0..1000 {
            let p = rng.random_range(1..=6);
            let max_rank = rng.random_range(1..=p);
            let ell = rng.random_range(0.2..4.0);
            let spec = ConstraintSpec::new(p, max_rank, ell).unwrap();
            let x = random_matrix(p, &mut rng);
            let (out, _) = project_low_rank(&x, &spec).unwrap();
            let sv = singular_values(&out).unwrap();
            let rank = sv.iter().filter(|&&s| s > RANK_TOL * ell).count();
            assert!(rank <= max_rank, "case {case}: rank {rank} > {max_rank}");
            assert_relative_eq!(sv.iter().sum::<f64>(), ell, epsilon = 1e-8);
        }
    }

    #[test]
    fn equal_rows_worked_example() {
        let x = DMatrix::from_row_slice(2, 2, &[3.0, 4.0, 0.0, 1.0]);
        let out = project_equal_rows(&x).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[1.8, 2.4, 0.0, 3.0]);
        assert_relative_eq!((out.clone() - expected).norm(), 0.0, epsilon = 1e-12);

        // Numeric oracle: among equal-row-norm matrices with rows parallel to
        // the input rows, scan the common norm on a fine grid.
        let ours = (&x - &out).norm_squared();
        let mut best = f64::INFINITY;
        for k in 0..=5000 {
            let norm = 6.0 * k as f64 / 5000.0;
            let cand = (5.0 - norm).powi(2) + (1.0 - norm).powi(2);
            best = best.min(cand);
        }
        assert!(ours <= best + 1e-6);
    }

    #[test]
    fn equal_rows_idempotent() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..50 {
            let x = random_matrix(4, &mut rng);
            let once = project_equal_rows(&x).unwrap();
            let twice = project_equal_rows(&once).unwrap();
            assert!((once - twice).norm() <= 1e-12);
        }
    }

    #[test]
    fn equal_rows_zero_row_rejected() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 0.0]);
        assert!(matches!(project_equal_rows(&x), Err(Error::ZeroRow(1))));
    }

    #[test]
    fn equal_rows_three_point_property() {
        let mut rng = ChaCha12Rng::seed_from_u64(19);
        for _ in 0..200 {
            let p = rng.random_range(2..=5);
            let x = random_matrix(p, &mut rng);
            if (0..p).any(|i| x.row(i).norm() < 1e-6) {
                continue;
            }
            let y0 = project_equal_rows(&x).unwrap();
            let mean = (0..p).map(|i| x.row(i).norm()).sum::<f64>() / p as f64;
            let k_b = (0..p)
                .map(|i| x.row(i).norm() / mean)
                .fold(f64::INFINITY, f64::min)
                .min(1.0);
            let y = project_equal_rows(&random_matrix(p, &mut rng)).unwrap();
            let lhs = (&x - &y).norm_squared() - (&x - &y0).norm_squared();
            let rhs = k_b * (&y - &y0).norm_squared();
            assert!(lhs >= rhs - 1e-9, "three-point property violated");
        }
    }

    #[test]
    fn intersection_fixed_point_one_sweep() {
        let spec = ConstraintSpec::new(3, 3, 2.0).unwrap();
        let point = spec.degenerate_point();
        let out = project_intersection(
            &point,
            &spec,
            Some(IntersectionState::cold(&point)),
            500,
            1e-8,
        )
        .unwrap();
        assert!(out.converged);
        assert_eq!(out.sweeps, 1);
        assert!((out.projected - point).norm() <= 1e-12);
    }

    #[test]
    fn intersection_matches_alternating_projection_oracle() {
        let spec = ConstraintSpec::new(2, 1, 2.0).unwrap();
        let target = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 1.0]);
        let out = project_intersection(&target, &spec, None, 500, 1e-10).unwrap();
        assert!(out.converged);
        assert!(out.residual <= 1e-10);
        let tol = spec.feasibility_tol();
        assert!(spec.in_low_rank_set(&out.projected, tol));
        assert!(spec.in_equal_row_set(&out.projected, tol));
        assert_relative_eq!(nuclear_norm(&out.projected).unwrap(), 2.0, epsilon = 1e-8);
        assert_relative_eq!(
            out.projected.row(0).norm(),
            out.projected.row(1).norm(),
            epsilon = 1e-8
        );

        // Reference: plain alternating projections run to a vast budget,
        // starting from the zero-row-perturbed first low-rank projection.
        let (lr0, _) = project_low_rank(&target, &spec).unwrap();
        let mut z = lr0;
        if z.row(1).norm() == 0.0 {
            z[(1, 0)] = 1e-12 * 2.0;
        }
        z = project_equal_rows(&z).unwrap();
        for _ in 0..1_000_000 {
            let (lr, _) = project_low_rank(&z, &spec).unwrap();
            z = project_equal_rows(&lr).unwrap();
        }
        let ours = (&target - &out.projected).norm();
        let reference = (&target - &z).norm();
        assert!(
            ours <= reference * 1.05 + 1e-9,
            "distance {ours} much worse than alternating-projection reference {reference}"
        );
    }

    #[test]
    fn intersection_zero_input_returns_fallback() {
        for max_rank in [1, 2, 3] {
            let spec = ConstraintSpec::new(3, max_rank, 2.0).unwrap();
            let out = project_intersection(&DMatrix::zeros(3, 3), &spec, None, 100, 1e-8).unwrap();
            assert!(out.degenerate);
            let tol = spec.feasibility_tol();
            assert!(spec.in_low_rank_set(&out.projected, tol));
            assert!(spec.in_equal_row_set(&out.projected, tol));
        }
    }

    #[test]
    fn intersection_feasible_on_random_cold_starts() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        for case in 0..60 {
            let p = rng.random_range(2..=6);
            let max_rank = rng.random_range(1..=p);
            let ell = rng.random_range(0.5..3.0);
            let spec = ConstraintSpec::new(p, max_rank, ell).unwrap();
            let target = random_matrix(p, &mut rng);
            let out = project_intersection(&target, &spec, None, 2000, 1e-8).unwrap();
            let tol = spec.feasibility_tol();
            assert!(out.converged, "case {case}: residual {}", out.residual);
            assert!(
                spec.in_low_rank_set(&out.projected, tol),
                "case {case}: low-rank membership failed"
            );
            assert!(
                spec.in_equal_row_set(&out.projected, tol),
                "case {case}: equal-row membership failed"
            );
        }
    }

    /// In the solver's regime the target is proximal-dominated (close to the
    /// current feasible iterate) and the sweeps are warm-started there; the
    /// inner objective must then be nonincreasing.
    #[test]
    fn intersection_descends_in_proximal_regime() {
        let mut rng = ChaCha12Rng::seed_from_u64(29);
        let kappa = 10.0;
        for case in 0..40 {
            let p = rng.random_range(2..=6);
            let max_rank = rng.random_range(1..=p);
            let ell = rng.random_range(0.5..3.0);
            let spec = ConstraintSpec::new(p, max_rank, ell).unwrap();
            let anchor = project_intersection(&random_matrix(p, &mut rng), &spec, None, 2000, 1e-10)
                .unwrap()
                .projected;
            let pull = random_matrix(p, &mut rng) * (0.3 * ell / p as f64);
            let target = (&pull + &anchor * kappa) / (1.0 + kappa);
            let out = project_intersection(
                &target,
                &spec,
                Some(IntersectionState::cold(&anchor)),
                2000,
                1e-9,
            )
            .unwrap();
            assert!(out.converged, "case {case} did not converge");
            // Tiny dual-ascent overshoots at the convergence tail are
            // tolerated; net descent must hold.
            for w in out.objective_history.windows(2) {
                assert!(
                    w[1] <= w[0] + 1e-7 * (w[0].abs() + 1.0),
                    "case {case}: inner objective increased {} -> {}",
                    w[0],
                    w[1]
                );
            }
            if let (Some(first), Some(last)) =
                (out.objective_history.first(), out.objective_history.last())
            {
                assert!(last <= first, "case {case}: no net descent");
            }
        }
    }

    #[test]
    fn svd_parts_sorted_and_recomposes() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let m = random_matrix(5, &mut rng);
        let (u, sigma, v) = svd_parts(&m).unwrap();
        for w in sigma.windows(2) {
            assert!(w[0] >= w[1]);
        }
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(sigma));
        assert!((&u * d * v.transpose() - &m).norm() <= 1e-10);
    }
}
