//! Synthetic data generation matching the model structure, plus the
//! heterogeneous-cluster scenarios used for evaluation.
//!
//! The shared basis is built from random orthonormal factors with
//! Dirichlet-distributed singular values; each entity gets a Poisson-sized
//! sparse component and uniform weights scaled by the spectral radius of the
//! basis-plus-sparse sum, redrawing until the transition matrix is stable.
//! Entity draws use independent RNG substreams keyed by the entity index, so
//! enlarging a panel never perturbs earlier entities.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Exp, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::spectral_radius;
use crate::error::{Error, Result};
use crate::panel::{RawEntity, RawPanel};
use crate::sparse::SparseMatrix;

/// Substream carrying the shared-basis draws.
const STREAM_BASIS: u64 = 0;
/// Substream base for per-entity parameter draws.
const STREAM_TRUTH: u64 = 1;
/// Substream base for per-entity simulation noise.
const STREAM_SIMULATION: u64 = 1 << 32;

fn substream(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One planned group of entities sharing structure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterGroup {
    pub label: String,
    /// Entity indices belonging to the group.
    pub entities: Vec<usize>,
    /// All entities reuse one weight draw.
    pub shared_w: bool,
    /// Weights are exactly zero; the transition is purely sparse, rescaled
    /// to spectral radius 0.9.
    pub zero_w: bool,
    /// Sparse components are exactly zero.
    pub zero_s: bool,
}

impl ClusterGroup {
    pub fn new(label: &str, entities: Vec<usize>) -> Self {
        Self {
            label: label.into(),
            entities,
            shared_w: false,
            zero_w: false,
            zero_s: false,
        }
    }

    pub fn shared_w(mut self) -> Self {
        self.shared_w = true;
        self
    }

    pub fn zero_w(mut self) -> Self {
        self.zero_w = true;
        self
    }

    pub fn zero_s(mut self) -> Self {
        self.zero_s = true;
        self
    }
}

/// Data generating process parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub n_entities: usize,
    pub dim: usize,
    /// Rank of the shared basis.
    pub rank: usize,
    /// Expected nonzero count of each sparse component (Poisson mean).
    pub expected_nonzeros: f64,
    /// Series length T; each entity emits T+1 observations.
    pub horizon: usize,
    pub seed: u64,
    /// Inverse-gamma shape for the innovation variances.
    pub sigma_shape: f64,
    /// Inverse-gamma scale for the innovation variances.
    pub sigma_scale: f64,
    pub burn_in: usize,
    /// Nuclear norm of the generated basis.
    pub nuclear_scale: f64,
    pub clusters: Option<Vec<ClusterGroup>>,
}

impl DgpSpec {
    pub fn new(n_entities: usize, dim: usize, rank: usize, expected_nonzeros: f64, horizon: usize, seed: u64) -> Self {
        Self {
            n_entities,
            dim,
            rank,
            expected_nonzeros,
            horizon,
            seed,
            sigma_shape: 3.0,
            sigma_scale: 0.5,
            burn_in: 500,
            nuclear_scale: 1.0,
            clusters: None,
        }
    }

    /// Twenty entities in six groups: two shared-weight clusters, one
    /// zero-weight (purely sparse) cluster, one zero-sparse cluster, and two
    /// isolates.
    pub fn example1(seed: u64) -> Self {
        let mut spec = Self::new(20, 40, 5, 30.0, 400, seed);
        spec.clusters = Some(vec![
            ClusterGroup::new("cluster1", (0..5).collect()).shared_w(),
            ClusterGroup::new("cluster2", (5..10).collect()).shared_w(),
            ClusterGroup::new("singular_w", (10..14).collect()).zero_w(),
            ClusterGroup::new("singular_s", (14..18).collect()).shared_w().zero_s(),
            ClusterGroup::new("isolate1", vec![18]),
            ClusterGroup::new("isolate2", vec![19]),
        ]);
        spec
    }

    /// Larger heterogeneous panel: two 19-entity shared-weight clusters,
    /// five purely sparse entities, five zero-sparse entities, two isolates.
    pub fn large(seed: u64) -> Self {
        let mut spec = Self::new(50, 80, 5, 100.0, 2000, seed);
        spec.clusters = Some(vec![
            ClusterGroup::new("cluster1", (0..19).collect()).shared_w(),
            ClusterGroup::new("cluster2", (19..38).collect()).shared_w(),
            ClusterGroup::new("singular_w", (38..43).collect()).zero_w(),
            ClusterGroup::new("singular_s", (43..48).collect()).shared_w().zero_s(),
            ClusterGroup::new("isolate1", vec![48]),
            ClusterGroup::new("isolate2", vec![49]),
        ]);
        spec
    }

    /// Homogeneously drawn panel used for the rank and step-size study.
    pub fn rank_study(seed: u64) -> Self {
        Self::new(20, 40, 5, 30.0, 400, seed)
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "example1" => Ok(Self::example1(seed)),
            "large" => Ok(Self::large(seed)),
            "rankstudy" => Ok(Self::rank_study(seed)),
            other => Err(Error::InvalidConfig(format!(
                "unknown preset `{other}`; expected example1, large, or rankstudy"
            ))),
        }
    }

    /// Group label per entity; `None` for entities outside every group.
    pub fn entity_labels(&self) -> Vec<Option<String>> {
        let mut labels = vec![None; self.n_entities];
        if let Some(clusters) = &self.clusters {
            for group in clusters {
                for &m in &group.entities {
                    labels[m] = Some(group.label.clone());
                }
            }
        }
        labels
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.n_entities == 0 {
            return Err(Error::InvalidConfig("need dim >= 1 and entities >= 1".into()));
        }
        if self.rank == 0 || self.rank > self.dim {
            return Err(Error::InvalidConfig(format!(
                "rank must be in 1..={}, got {}",
                self.dim, self.rank
            )));
        }
        if self.expected_nonzeros < 0.0
            || self.expected_nonzeros > (self.dim * self.dim) as f64
        {
            return Err(Error::InvalidConfig(format!(
                "expected_nonzeros must be in [0, {}], got {}",
                self.dim * self.dim,
                self.expected_nonzeros
            )));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidConfig("horizon must be at least 1".into()));
        }
        if !(self.nuclear_scale > 0.0) || !(self.sigma_shape > 0.0) || !(self.sigma_scale > 0.0) {
            return Err(Error::InvalidConfig(
                "nuclear_scale, sigma_shape, sigma_scale must be positive".into(),
            ));
        }
        if let Some(clusters) = &self.clusters {
            let mut seen = vec![false; self.n_entities];
            for group in clusters {
                if group.zero_w && group.zero_s {
                    return Err(Error::InvalidConfig(format!(
                        "group `{}` cannot be both zero_w and zero_s",
                        group.label
                    )));
                }
                for &m in &group.entities {
                    if m >= self.n_entities {
                        return Err(Error::InvalidConfig(format!(
                            "group `{}` references entity {m} out of range",
                            group.label
                        )));
                    }
                    if seen[m] {
                        return Err(Error::InvalidConfig(format!(
                            "entity {m} appears in more than one group"
                        )));
                    }
                    seen[m] = true;
                }
            }
        }
        Ok(())
    }
}

/// Generated model parameters.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub basis: DMatrix<f64>,
    /// Weight diagonals, one per entity.
    pub weights: Vec<DVector<f64>>,
    /// Sparse components, already scaled by the weights.
    pub sparse: Vec<SparseMatrix>,
    /// Transition matrices `W_m * basis + S_m`, all stable.
    pub transitions: Vec<DMatrix<f64>>,
    /// Innovation variances per entity.
    pub sigma_sq: Vec<f64>,
}

impl GroundTruth {
    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn n_entities(&self) -> usize {
        self.weights.len()
    }
}

const MAX_DRAWS: usize = 100;

/// Draws the shared basis and per-entity parameters.
pub fn generate_truth(spec: &DgpSpec) -> Result<GroundTruth> {
    spec.validate()?;
    let p = spec.dim;

    let mut basis_rng = substream(spec.seed, STREAM_BASIS);
    let left = random_orthonormal(p, spec.rank, &mut basis_rng);
    let right = random_orthonormal(p, spec.rank, &mut basis_rng);
    let mut singulars = dirichlet_flat(spec.rank, &mut basis_rng);
    singulars.sort_unstable_by(|a, b| b.partial_cmp(a).unwrap());
    let mut basis = DMatrix::<f64>::zeros(p, p);
    for (k, &d) in singulars.iter().enumerate() {
        let scaled = d * spec.nuclear_scale;
        let u_k = left.column(k);
        let v_k = right.column(k);
        for j in 0..p {
            for i in 0..p {
                basis[(i, j)] += scaled * u_k[i] * v_k[j];
            }
        }
    }
    let basis_max = basis.iter().fold(0.0_f64, |a, &b| a.max(b.abs()));
    let sparse_sd = (p as f64).sqrt() * basis_max;

    // Entity roles from the cluster plan.
    #[derive(Clone, Copy, Default)]
    struct Role {
        group: Option<usize>,
        shared_w: bool,
        zero_w: bool,
        zero_s: bool,
        first_of_group: bool,
    }
    let mut roles = vec![Role::default(); spec.n_entities];
    if let Some(clusters) = &spec.clusters {
        for (g, group) in clusters.iter().enumerate() {
            for (pos, &m) in group.entities.iter().enumerate() {
                roles[m] = Role {
                    group: Some(g),
                    shared_w: group.shared_w,
                    zero_w: group.zero_w,
                    zero_s: group.zero_s,
                    first_of_group: pos == 0,
                };
            }
        }
    }

    let mut shared_weights: HashMap<usize, DVector<f64>> = HashMap::new();
    let mut weights = Vec::with_capacity(spec.n_entities);
    let mut sparse = Vec::with_capacity(spec.n_entities);
    let mut transitions = Vec::with_capacity(spec.n_entities);
    let mut sigma_sq = Vec::with_capacity(spec.n_entities);

    for m in 0..spec.n_entities {
        let role = roles[m];
        let mut rng = substream(spec.seed, STREAM_TRUTH + m as u64);
        sigma_sq.push(inverse_gamma(spec.sigma_shape, spec.sigma_scale, &mut rng));

        let mut accepted = None;
        for _attempt in 0..MAX_DRAWS {
            let raw_sparse = if role.zero_s {
                SparseMatrix::zeros(p)
            } else {
                draw_sparse(p, spec.expected_nonzeros, sparse_sd, &mut rng)
            };

            if role.zero_w {
                let mut scaled = raw_sparse;
                let dense = scaled.to_dense();
                let radius = spectral_radius(&dense);
                if radius > 1e-12 {
                    scaled.scale(0.9 / radius);
                }
                let transition = scaled.to_dense();
                accepted = Some((DVector::zeros(p), scaled, transition));
                break;
            }

            let reuse_shared = role.shared_w && !role.first_of_group;
            let weight = if reuse_shared {
                match role.group.and_then(|g| shared_weights.get(&g)) {
                    Some(w) => w.clone(),
                    None => {
                        return Err(Error::InvalidConfig(format!(
                            "entity {m}: shared weight group not yet drawn; order the \
                             group's entity list with its representative first"
                        )))
                    }
                }
            } else {
                let base = &basis + raw_sparse.to_dense();
                let radius = spectral_radius(&base);
                if radius <= 1e-12 {
                    continue;
                }
                DVector::from_fn(p, |_, _| (0.5 + 0.5 * rng.random::<f64>()) / radius)
            };

            let mut scaled_sparse = raw_sparse;
            for j in 0..p {
                scaled_sparse.scale_row(j, weight[j]);
            }
            let mut transition = basis.clone();
            for j in 0..p {
                transition.row_mut(j).scale_mut(weight[j]);
                for &(k, v) in scaled_sparse.row(j) {
                    transition[(j, k)] += v;
                }
            }
            if spectral_radius(&transition) < 1.0 {
                if role.shared_w && role.first_of_group {
                    shared_weights.insert(role.group.unwrap(), weight.clone());
                }
                accepted = Some((weight, scaled_sparse, transition));
                break;
            }
        }

        let (weight, scaled_sparse, transition) = accepted.ok_or(Error::UnstableDraw {
            entity: m,
            attempts: MAX_DRAWS,
        })?;
        weights.push(weight);
        sparse.push(scaled_sparse);
        transitions.push(transition);
    }

    Ok(GroundTruth {
        basis,
        weights,
        sparse,
        transitions,
        sigma_sq,
    })
}

/// Simulates each entity's series: a standard normal start, `burn_in`
/// discarded steps, then `horizon + 1` recorded states. Entities draw from
/// independent substreams, so parallel and serial runs agree bit for bit.
pub fn simulate_panel(
    truth: &GroundTruth,
    horizon: usize,
    burn_in: usize,
    seed: u64,
) -> RawPanel {
    let p = truth.dim();
    let n = truth.n_entities();
    let width = entity_id_width(n);
    let entities: Vec<RawEntity> = (0..n)
        .into_par_iter()
        .map(|m| {
            let mut rng = substream(seed, STREAM_SIMULATION + m as u64);
            let a = &truth.transitions[m];
            let sd = truth.sigma_sq[m].sqrt();
            let mut x = DVector::<f64>::from_fn(p, |_, _| rng.sample(StandardNormal));
            let mut noise = DVector::<f64>::zeros(p);
            let step = |x: &mut DVector<f64>, rng: &mut ChaCha12Rng, noise: &mut DVector<f64>| {
                for i in 0..p {
                    noise[i] = rng.sample::<f64, _>(StandardNormal) * sd;
                }
                let next = a * &*x + &*noise;
                x.copy_from(&next);
            };
            for _ in 0..burn_in {
                step(&mut x, &mut rng, &mut noise);
            }
            let mut series = DMatrix::<f64>::zeros(p, horizon + 1);
            series.column_mut(0).copy_from(&x);
            for t in 1..=horizon {
                step(&mut x, &mut rng, &mut noise);
                series.column_mut(t).copy_from(&x);
            }
            RawEntity {
                id: format!("m{:0width$}", m + 1, width = width),
                series,
            }
        })
        .collect();
    RawPanel { entities }
}

/// Zero-padded width used for generated entity ids.
pub fn entity_id_width(n_entities: usize) -> usize {
    n_entities.max(1).to_string().len().max(2)
}

fn random_orthonormal(rows: usize, cols: usize, rng: &mut ChaCha12Rng) -> DMatrix<f64> {
    let gaussian = DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal));
    gaussian.qr().q()
}

/// Flat Dirichlet draw via normalized unit exponentials.
fn dirichlet_flat(k: usize, rng: &mut ChaCha12Rng) -> Vec<f64> {
    let exp = Exp::new(1.0).expect("unit rate");
    let draws: Vec<f64> = (0..k).map(|_| exp.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|v| v / total).collect()
}

fn inverse_gamma(shape: f64, scale: f64, rng: &mut ChaCha12Rng) -> f64 {
    let gamma = Gamma::new(shape, 1.0 / scale).expect("validated parameters");
    1.0 / gamma.sample(rng)
}

/// Sparse matrix with a Poisson-distributed support size placed uniformly
/// without replacement over all cells, and Gaussian values.
fn draw_sparse(dim: usize, mean_nnz: f64, sd: f64, rng: &mut ChaCha12Rng) -> SparseMatrix {
    let cells = dim * dim;
    let nnz = if mean_nnz > 0.0 {
        let draw: f64 = rand_distr::Poisson::new(mean_nnz)
            .expect("validated mean")
            .sample(rng);
        (draw as usize).min(cells)
    } else {
        0
    };
    let positions = rand::seq::index::sample(rng, cells, nnz);
    let triplets: Vec<(usize, usize, f64)> = positions
        .iter()
        .map(|cell| {
            let value: f64 = rng.sample::<f64, _>(StandardNormal) * sd;
            (cell / dim, cell % dim, value)
        })
        .collect();
    SparseMatrix::from_triplets(dim, &triplets)
}
