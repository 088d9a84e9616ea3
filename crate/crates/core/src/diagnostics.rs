//! Recovery metrics against a known truth, PCA summarization of the fitted
//! weights, rank-sparsity incoherence quantities, and the VAR stability
//! check.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::projections::{nuclear_norm, svd_parts, RANK_TOL};
use crate::solver::LsPvarState;
use crate::sparse::SparseMatrix;
use crate::synthetic::GroundTruth;

/// Dense matrices up to this size use an exact eigenvalue solve for the
/// spectral radius; larger ones fall back to power iteration.
const DENSE_EIGEN_LIMIT: usize = 500;

/// Per-entity recovery metrics. Relative errors are undefined for an
/// all-zero truth; sensitivity (specificity) is undefined when the true
/// support (its complement) is empty.
#[derive(Debug, Clone, Serialize)]
pub struct EntityMetrics {
    pub entity: usize,
    pub rel_frob_a: Option<f64>,
    pub abs_frob_w: f64,
    pub abs_frob_s: f64,
    pub accuracy: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

/// Panel-wide recovery metrics.
#[derive(Debug, Clone, Serialize)]
pub struct RecoveryMetrics {
    pub per_entity: Vec<EntityMetrics>,
}

impl RecoveryMetrics {
    pub fn mean_rel_frob_a(&self) -> Option<f64> {
        mean(self.per_entity.iter().filter_map(|e| e.rel_frob_a))
    }

    pub fn mean_accuracy(&self) -> f64 {
        mean(self.per_entity.iter().map(|e| e.accuracy)).unwrap_or(f64::NAN)
    }
}

/// Group means of the per-entity metrics.
#[derive(Debug, Clone, Serialize)]
pub struct ClusterSummary {
    pub label: String,
    pub entities: usize,
    pub mean_rel_frob_a: Option<f64>,
    pub mean_abs_frob_w: f64,
    pub mean_abs_frob_s: f64,
    pub mean_accuracy: f64,
    pub mean_sensitivity: Option<f64>,
    pub mean_specificity: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let collected: Vec<f64> = values.collect();
    if collected.is_empty() {
        None
    } else {
        Some(collected.iter().sum::<f64>() / collected.len() as f64)
    }
}

/// Compares an estimate against the generating truth. Both bases are first
/// rescaled to nuclear norm `ell_norm` with the weights rescaled inversely,
/// which fixes the scale ambiguity of the weight/basis product before weight
/// errors are measured.
pub fn compute_metrics(
    est: &LsPvarState,
    truth: &GroundTruth,
    ell_norm: f64,
) -> Result<RecoveryMetrics> {
    let p = truth.dim();
    let n = truth.n_entities();
    if est.dim() != p || est.n_entities() != n {
        return Err(Error::DimensionMismatch(format!(
            "estimate is {}x{} entities={}, truth is {}x{} entities={}",
            est.dim(),
            est.dim(),
            est.n_entities(),
            p,
            p,
            n
        )));
    }
    if !(ell_norm > 0.0) {
        return Err(Error::InvalidConfig("ell_norm must be positive".into()));
    }
    let est_nuclear = nuclear_norm(&est.basis)?;
    let truth_nuclear = nuclear_norm(&truth.basis)?;
    if est_nuclear <= 0.0 || truth_nuclear <= 0.0 {
        return Err(Error::InvalidConfig(
            "cannot normalize a zero basis for comparison".into(),
        ));
    }
    let est_weight_scale = est_nuclear / ell_norm;
    let truth_weight_scale = truth_nuclear / ell_norm;

    let cells = (p * p) as f64;
    let per_entity = (0..n)
        .map(|m| {
            let a_hat = est.transition(m);
            let a_star = &truth.transitions[m];
            let a_norm = a_star.norm();
            let rel_frob_a = if a_norm > 0.0 {
                Some((a_hat - a_star).norm() / a_norm)
            } else {
                None
            };
            let w_diff: f64 = (0..p)
                .map(|j| {
                    let d = est.weights[m][j] * est_weight_scale
                        - truth.weights[m][j] * truth_weight_scale;
                    d * d
                })
                .sum();
            let abs_frob_s = est.sparse[m].frob_sq_diff(&truth.sparse[m]).sqrt();

            let mut tp = 0usize;
            let mut fp = 0usize;
            let mut fneg = 0usize;
            for j in 0..p {
                let est_row = est.sparse[m].row(j);
                let true_row = truth.sparse[m].row(j);
                let (mut a, mut b) = (0, 0);
                while a < est_row.len() || b < true_row.len() {
                    match (est_row.get(a), true_row.get(b)) {
                        (Some(&(ka, _)), Some(&(kb, _))) if ka == kb => {
                            tp += 1;
                            a += 1;
                            b += 1;
                        }
                        (Some(&(ka, _)), Some(&(kb, _))) if ka < kb => {
                            fp += 1;
                            a += 1;
                        }
                        (Some(_), Some(_)) => {
                            fneg += 1;
                            b += 1;
                        }
                        (Some(_), None) => {
                            fp += 1;
                            a += 1;
                        }
                        (None, Some(_)) => {
                            fneg += 1;
                            b += 1;
                        }
                        (None, None) => unreachable!(),
                    }
                }
            }
            let tn = p * p - tp - fp - fneg;
            let sensitivity = (tp + fneg > 0).then(|| tp as f64 / (tp + fneg) as f64);
            let specificity = (tn + fp > 0).then(|| tn as f64 / (tn + fp) as f64);
            EntityMetrics {
                entity: m,
                rel_frob_a,
                abs_frob_w: w_diff.sqrt(),
                abs_frob_s,
                accuracy: (tp + tn) as f64 / cells,
                sensitivity,
                specificity,
            }
        })
        .collect();
    Ok(RecoveryMetrics { per_entity })
}

/// Arithmetic means of the per-entity metrics within each labeled group, in
/// order of first appearance; unlabeled entities aggregate under `none`.
pub fn aggregate_by_cluster(
    metrics: &RecoveryMetrics,
    labels: &[Option<String>],
) -> Vec<ClusterSummary> {
    let mut order: Vec<String> = Vec::new();
    let mut buckets: std::collections::HashMap<String, Vec<&EntityMetrics>> =
        std::collections::HashMap::new();
    for entry in &metrics.per_entity {
        let label = labels
            .get(entry.entity)
            .and_then(|l| l.clone())
            .unwrap_or_else(|| "none".into());
        if !buckets.contains_key(&label) {
            order.push(label.clone());
        }
        buckets.entry(label).or_default().push(entry);
    }
    order
        .into_iter()
        .map(|label| {
            let group = &buckets[&label];
            ClusterSummary {
                entities: group.len(),
                mean_rel_frob_a: mean(group.iter().filter_map(|e| e.rel_frob_a)),
                mean_abs_frob_w: mean(group.iter().map(|e| e.abs_frob_w)).unwrap_or(f64::NAN),
                mean_abs_frob_s: mean(group.iter().map(|e| e.abs_frob_s)).unwrap_or(f64::NAN),
                mean_accuracy: mean(group.iter().map(|e| e.accuracy)).unwrap_or(f64::NAN),
                mean_sensitivity: mean(group.iter().filter_map(|e| e.sensitivity)),
                mean_specificity: mean(group.iter().filter_map(|e| e.specificity)),
                label,
            }
        })
        .collect()
}

/// Column-centered PCA of the fitted weight diagonals (entities as rows).
/// Returns the score matrix (`n x k`) and the explained variance ratios.
/// Component signs follow the convention that each loading vector's largest
/// absolute coordinate is positive.
pub fn pca_weights(w_hat: &DMatrix<f64>, k: usize) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let n = w_hat.nrows();
    let p = w_hat.ncols();
    if k == 0 || k > n.min(p) {
        return Err(Error::InvalidConfig(format!(
            "component count must be in 1..={}, got {k}",
            n.min(p)
        )));
    }
    let mut centered = w_hat.clone();
    for j in 0..p {
        let mean = centered.column(j).sum() / n as f64;
        for i in 0..n {
            centered[(i, j)] -= mean;
        }
    }
    let (u, sigma, v) = svd_parts(&centered)?;
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    let mut scores = DMatrix::<f64>::zeros(n, k);
    let mut explained = Vec::with_capacity(k);
    for comp in 0..k {
        let sv = sigma.get(comp).copied().unwrap_or(0.0);
        explained.push(if total > 0.0 { sv * sv / total } else { 0.0 });
        let loadings = v.column(comp);
        let lead = (0..p)
            .max_by(|&a, &b| {
                loadings[a]
                    .abs()
                    .partial_cmp(&loadings[b].abs())
                    .expect("finite loadings")
            })
            .unwrap_or(0);
        let flip = if loadings[lead] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            scores[(i, comp)] = flip * u[(i, comp)] * sv;
        }
    }
    Ok((scores, explained))
}

/// Incoherence curve of one entity over a balancing-parameter grid.
#[derive(Debug, Clone, Serialize)]
pub struct IncoherencePoint {
    pub varsigma: f64,
    /// Sparse-side quantity: worst scaled operator norm of the sign pattern.
    pub mu: f64,
    /// Basis-side quantity from the singular subspaces.
    pub nu: f64,
    pub product: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct IncoherenceCurve {
    pub points: Vec<IncoherencePoint>,
    pub min_product: f64,
    /// The identifiability heuristic asks for a product below one somewhere
    /// on the grid; flagged entities never get there.
    pub flagged: bool,
}

/// Default balancing grid: 21 logarithmic points spanning [1/10, 10].
pub fn default_varsigma_grid() -> Vec<f64> {
    let n = 21;
    (0..n)
        .map(|i| 10f64.powf(-1.0 + 2.0 * i as f64 / (n - 1) as f64))
        .collect()
}

/// Evaluates the incoherence product between one sparse component and the
/// basis over a grid of balancing parameters.
pub fn incoherence(
    sparse: &SparseMatrix,
    basis: &DMatrix<f64>,
    varsigma_grid: &[f64],
) -> Result<IncoherenceCurve> {
    if varsigma_grid.is_empty() || varsigma_grid.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidConfig(
            "balancing grid must be nonempty and positive".into(),
        ));
    }
    let p = basis.nrows();
    let nuclear = nuclear_norm(basis)?;
    if nuclear <= 0.0 {
        return Err(Error::InvalidConfig("basis must be nonzero".into()));
    }
    let (u, sigma, v) = svd_parts(basis)?;
    let rank = sigma.iter().filter(|&&s| s > RANK_TOL * nuclear).count().max(1);
    let u_r = u.columns(0, rank);
    let v_r = v.columns(0, rank);
    let uu = &u_r * u_r.transpose();
    let vv = &v_r * v_r.transpose();
    let uu_inf = uu.iter().fold(0.0_f64, |a, &b| a.max(b.abs()));
    let vv_inf = vv.iter().fold(0.0_f64, |a, &b| a.max(b.abs()));
    let u_2inf = (0..p).map(|i| u_r.row(i).norm()).fold(0.0_f64, f64::max);
    let v_2inf = (0..p).map(|i| v_r.row(i).norm()).fold(0.0_f64, f64::max);

    // Operator norms of the sign pattern: max column and row support counts.
    let mut col_counts = vec![0usize; p];
    let mut row_counts = vec![0usize; p];
    for (i, j, _) in sparse.triplets() {
        row_counts[i] += 1;
        col_counts[j] += 1;
    }
    let col_max = *col_counts.iter().max().unwrap_or(&0) as f64;
    let row_max = *row_counts.iter().max().unwrap_or(&0) as f64;

    let points: Vec<IncoherencePoint> = varsigma_grid
        .iter()
        .map(|&varsigma| {
            let mu = (varsigma * col_max).max(row_max / varsigma);
            let nu = uu_inf / varsigma + varsigma * vv_inf + u_2inf * v_2inf;
            IncoherencePoint {
                varsigma,
                mu,
                nu,
                product: mu * nu,
            }
        })
        .collect();
    let min_product = points
        .iter()
        .map(|pt| pt.product)
        .fold(f64::INFINITY, f64::min);
    Ok(IncoherenceCurve {
        flagged: min_product >= 1.0,
        min_product,
        points,
    })
}

/// Stability verdict for one transition matrix.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Stability {
    pub spectral_radius: f64,
    pub is_stable: bool,
    /// False when the power-iteration fallback hit its budget; the radius is
    /// then the best available estimate.
    pub converged: bool,
}

/// Largest eigenvalue magnitude; stability requires it below one. Small
/// matrices use a dense eigenvalue solve, large ones power iteration.
pub fn stability_check(a: &DMatrix<f64>) -> Stability {
    let (radius, converged) = if a.nrows() <= DENSE_EIGEN_LIMIT {
        (spectral_radius(a), true)
    } else {
        spectral_radius_power(a, 5000, 1e-10)
    };
    Stability {
        spectral_radius: radius,
        is_stable: radius < 1.0,
        converged,
    }
}

/// Spectral radius by dense eigenvalue computation.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Orthogonal-iteration estimate of the spectral radius: a small block of
/// vectors is repeatedly multiplied and re-orthonormalized, and the largest
/// eigenvalue magnitude of the projected block matrix is tracked until it
/// stabilizes. Handles complex dominant pairs, unlike single-vector power
/// iteration.
pub fn spectral_radius_power(a: &DMatrix<f64>, max_iter: usize, tol: f64) -> (f64, bool) {
    let p = a.nrows();
    let block = 6.min(p);
    let mut basis = DMatrix::<f64>::from_fn(p, block, |i, j| {
        1.0 + ((i * block + j + 1) as f64).sin()
    });
    basis = basis.qr().q();
    let mut previous = f64::NAN;
    let mut stable_checks = 0;
    for iter in 0..max_iter {
        let image = a * &basis;
        if image.norm() < 1e-300 {
            return (0.0, true);
        }
        let projected = basis.transpose() * &image;
        basis = image.qr().q();
        if basis.ncols() < block {
            // Rank collapse of the block; restart from a shifted basis.
            basis = DMatrix::from_fn(p, block, |i, j| {
                1.0 + ((i * block + j + 2 + iter) as f64).cos()
            })
            .qr()
            .q();
            continue;
        }
        let estimate = projected
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0_f64, f64::max);
        if (estimate - previous).abs() <= tol * estimate.max(1e-300) {
            stable_checks += 1;
            if stable_checks >= 3 {
                return (estimate, true);
            }
        } else {
            stable_checks = 0;
        }
        previous = estimate;
    }
    (previous, false)
}
