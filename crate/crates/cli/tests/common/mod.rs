//! Shared support for the acceptance suite: a deterministic k-means, the
//! independent simplex-projection oracle, and instance generators.

use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

/// Lloyd's k-means with seeded k-means++ starts and multiple restarts;
/// deterministic for a fixed seed. Returns the best assignment by inertia.
pub fn kmeans(points: &DMatrix<f64>, k: usize, seed: u64) -> Vec<usize> {
    let n = points.nrows();
    let dim = points.ncols();
    assert!(k >= 1 && k <= n);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<usize>)> = None;

    for _restart in 0..20 {
        // k-means++ seeding.
        let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
        let first = rng.random_range(0..n);
        centers.push(points.row(first).iter().cloned().collect());
        while centers.len() < k {
            let dists: Vec<f64> = (0..n)
                .map(|i| {
                    centers
                        .iter()
                        .map(|c| sq_dist(points, i, c))
                        .fold(f64::INFINITY, f64::min)
                })
                .collect();
            let total: f64 = dists.iter().sum();
            let next = if total > 0.0 {
                let mut target = rng.random::<f64>() * total;
                let mut chosen = n - 1;
                for (i, &d) in dists.iter().enumerate() {
                    if target <= d {
                        chosen = i;
                        break;
                    }
                    target -= d;
                }
                chosen
            } else {
                rng.random_range(0..n)
            };
            centers.push(points.row(next).iter().cloned().collect());
        }

        // Lloyd iterations.
        let mut assignment = vec![0usize; n];
        for _iter in 0..200 {
            let mut changed = false;
            for i in 0..n {
                let nearest = (0..k)
                    .min_by(|&a, &b| {
                        sq_dist(points, i, &centers[a])
                            .partial_cmp(&sq_dist(points, i, &centers[b]))
                            .unwrap()
                    })
                    .unwrap();
                if assignment[i] != nearest {
                    assignment[i] = nearest;
                    changed = true;
                }
            }
            for (c, center) in centers.iter_mut().enumerate() {
                let members: Vec<usize> = (0..n).filter(|&i| assignment[i] == c).collect();
                if members.is_empty() {
                    continue;
                }
                for (j, value) in center.iter_mut().enumerate().take(dim) {
                    *value = members.iter().map(|&i| points[(i, j)]).sum::<f64>()
                        / members.len() as f64;
                }
            }
            if !changed {
                break;
            }
        }
        let inertia: f64 = (0..n).map(|i| sq_dist(points, i, &centers[assignment[i]])).sum();
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, assignment));
        }
    }
    best.expect("at least one restart").1
}

fn sq_dist(points: &DMatrix<f64>, row: usize, center: &[f64]) -> f64 {
    (0..points.ncols())
        .map(|j| {
            let d = points[(row, j)] - center[j];
            d * d
        })
        .sum()
}

/// True when two cluster assignments induce the same partition (labels may
/// be permuted).
pub fn same_partition(a: &[usize], b: &[usize]) -> bool {
    assert_eq!(a.len(), b.len());
    let mut forward = std::collections::HashMap::new();
    let mut backward = std::collections::HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        if *forward.entry(x).or_insert(y) != y {
            return false;
        }
        if *backward.entry(y).or_insert(x) != x {
            return false;
        }
    }
    true
}

/// Independent oracle for the cardinality-constrained simplex projection:
/// enumerate every support of size at most `max_rank`, solve the equality-
/// constrained quadratic program on that face, and keep the best feasible
/// objective.
pub fn simplex_oracle_objective(theta: &[f64], ell: f64, max_rank: usize) -> f64 {
    let p = theta.len();
    let mut best = f64::INFINITY;
    for mask in 1u32..(1 << p) {
        let support: Vec<usize> = (0..p).filter(|&i| mask & (1 << i) != 0).collect();
        if support.len() > max_rank {
            continue;
        }
        let k = support.len() as f64;
        let shift = (support.iter().map(|&i| theta[i]).sum::<f64>() - ell) / k;
        let mut objective = 0.0;
        let mut feasible = true;
        for &i in &support {
            let d = theta[i] - shift;
            if d < -1e-12 {
                feasible = false;
                break;
            }
            let d = d.max(0.0);
            objective += d * d - 2.0 * theta[i] * d;
        }
        if feasible && objective < best {
            best = objective;
        }
    }
    best
}

pub fn simplex_objective(d: &[f64], theta: &[f64]) -> f64 {
    d.iter()
        .zip(theta)
        .map(|(&di, &ti)| di * di - 2.0 * ti * di)
        .sum()
}
