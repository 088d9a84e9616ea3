//! Panel ingestion: lagged regression pairs and cached Gram statistics.
//!
//! Every solver block consumes the data only through the per-entity
//! `p x p` statistics `gram = X X'/T` and `cross = Y X'/T`, so both are
//! computed once here and treated as immutable afterwards.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// One entity's raw series: columns are consecutive time points.
#[derive(Debug, Clone)]
pub struct RawEntity {
    pub id: String,
    /// `p x (T+1)` observation matrix, column `t` holding the state at time `t`.
    pub series: DMatrix<f64>,
}

/// Raw multivariate panel, one series per entity.
#[derive(Debug, Clone)]
pub struct RawPanel {
    pub entities: Vec<RawEntity>,
}

/// Lagged design for one entity, plus cached Gram statistics.
#[derive(Debug, Clone)]
pub struct EntityData {
    pub id: String,
    /// Regressors `p x T`: columns are states at times `0..T-1`.
    pub x: DMatrix<f64>,
    /// Responses `p x T`: columns are states at times `1..T`.
    pub y: DMatrix<f64>,
    /// `X X' / T`, symmetric positive semidefinite.
    pub gram: DMatrix<f64>,
    /// `Y X' / T`.
    pub cross: DMatrix<f64>,
    /// `tr(Y Y') / T`, the constant term of the least squares objective.
    pub y_sq_scaled: f64,
    /// Number of lagged pairs `T` for this entity.
    pub t_len: usize,
}

/// Immutable panel of lagged pairs; safe to share across workers.
#[derive(Debug, Clone)]
pub struct PanelData {
    pub entities: Vec<EntityData>,
    /// Common variable dimension `p`.
    pub dim: usize,
}

impl PanelData {
    pub fn n_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn entity_ids(&self) -> Vec<String> {
        self.entities.iter().map(|e| e.id.clone()).collect()
    }

    /// Total number of lagged pairs across entities.
    pub fn total_len(&self) -> usize {
        self.entities.iter().map(|e| e.t_len).sum()
    }
}

/// Builds lag pairs and Gram caches from a raw panel.
///
/// Unbalanced panels are allowed; normalization is per-entity `1/T_m`.
/// Missing values are rejected, not imputed.
pub fn build_panel(raw: &RawPanel) -> Result<PanelData> {
    if raw.entities.is_empty() {
        return Err(Error::EmptyInput("panel has no entities".into()));
    }
    let dim = raw.entities[0].series.nrows();
    if dim == 0 {
        return Err(Error::DimensionMismatch("variable dimension is zero".into()));
    }
    let mut seen = std::collections::HashSet::new();
    let mut entities = Vec::with_capacity(raw.entities.len());
    for entity in &raw.entities {
        if !seen.insert(entity.id.clone()) {
            return Err(Error::InvalidConfig(format!(
                "duplicate entity id `{}`",
                entity.id
            )));
        }
        if entity.series.nrows() != dim {
            return Err(Error::DimensionMismatch(format!(
                "entity `{}` has {} variables, expected {}",
                entity.id,
                entity.series.nrows(),
                dim
            )));
        }
        let n_cols = entity.series.ncols();
        if n_cols < 2 {
            return Err(Error::TooShort(format!(
                "entity `{}` has {} time points, need at least 2",
                entity.id, n_cols
            )));
        }
        if entity.series.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("entity `{}`", entity.id)));
        }
        let t_len = n_cols - 1;
        let x = entity.series.columns(0, t_len).into_owned();
        let y = entity.series.columns(1, t_len).into_owned();
        let scale = 1.0 / t_len as f64;
        let gram = &x * x.transpose() * scale;
        let cross = &y * x.transpose() * scale;
        let y_sq_scaled = y.iter().map(|v| v * v).sum::<f64>() * scale;
        entities.push(EntityData {
            id: entity.id.clone(),
            x,
            y,
            gram,
            cross,
            y_sq_scaled,
            t_len,
        });
    }
    Ok(PanelData { entities, dim })
}

/// Minimum Gram eigenvalue over entities: the restricted strong convexity
/// constant of the panel. Clamped at zero against floating point dust.
pub fn min_gram_eigen(panel: &PanelData) -> f64 {
    panel
        .entities
        .iter()
        .map(|e| {
            e.gram
                .clone()
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .fold(f64::INFINITY, |a, &b| a.min(b))
        })
        .fold(f64::INFINITY, f64::min)
        .max(0.0)
}
