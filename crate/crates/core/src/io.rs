//! File interfaces: panel CSV ingestion (long format or one file per
//! entity), truth and estimate bundles, and the diagnostic CSV outputs.
//!
//! All numeric CSV output uses the shortest round-trip decimal form, so
//! re-reading a bundle reproduces every value bit for bit.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::diagnostics::{ClusterSummary, IncoherenceCurve, RecoveryMetrics, Stability};
use crate::error::{Error, Result};
use crate::panel::{RawEntity, RawPanel};
use crate::solver::{LsPvarState, SolverConfig, SolverTrace, Termination};
use crate::sparse::SparseMatrix;
use crate::synthetic::{DgpSpec, GroundTruth};
use crate::tuning::BicRecord;

/// Effective run description echoed into `report.json`. Everything except
/// `timings` is deterministic for a fixed configuration, seed, and thread
/// count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub entities: Vec<String>,
    pub dim: usize,
    pub solver: SolverConfig,
    pub init: String,
    pub seed: Option<u64>,
    pub threads: usize,
    pub eta_grid: Option<Vec<f64>>,
    pub best_eta: Option<f64>,
    pub termination: Termination,
    pub converged: bool,
    pub iterations: usize,
    pub restarts: usize,
    pub step_size_used: f64,
    pub proximal_weight_used: f64,
    pub rss: f64,
    pub bic: Option<f64>,
    pub kkt_residual: f64,
    pub warnings: Vec<String>,
    pub timings: Timings,
}

/// Wall-clock timings; the one non-reproducible part of a bundle.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Timings {
    pub total_s: f64,
    pub solve_s: f64,
}

/// Metadata stored next to generated panels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthMeta {
    pub spec: DgpSpec,
    pub entity_ids: Vec<String>,
    pub cluster_labels: Vec<Option<String>>,
    pub sigma_sq: Vec<f64>,
}

/// Estimate bundle read back from disk.
#[derive(Debug, Clone)]
pub struct EstimateBundle {
    pub basis: DMatrix<f64>,
    pub weights: Vec<DVector<f64>>,
    pub sparse: Vec<SparseMatrix>,
    pub report: RunReport,
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn parse_f64(token: &str, context: &str) -> Result<f64> {
    token
        .trim()
        .parse::<f64>()
        .map_err(|_| Error::Parse(format!("{context}: bad number `{token}`")))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut out = create(path)?;
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| fmt(m[(i, j)])).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let text = fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|tok| parse_f64(tok, &format!("{}:{}", path.display(), ln + 1)))
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::Parse(format!(
                    "{}:{}: ragged row",
                    path.display(),
                    ln + 1
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse(format!("{}: empty matrix", path.display())));
    }
    let (nr, nc) = (rows.len(), rows[0].len());
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

fn write_triplets_csv(path: &Path, sparse: &SparseMatrix) -> Result<()> {
    let mut out = create(path)?;
    writeln!(out, "i,j,value")?;
    for (i, j, v) in sparse.triplets() {
        writeln!(out, "{i},{j},{}", fmt(v))?;
    }
    Ok(())
}

fn read_triplets_csv(path: &Path, dim: usize) -> Result<SparseMatrix> {
    let text = fs::read_to_string(path)?;
    let mut triplets = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if ln == 0 || line.trim().is_empty() {
            continue;
        }
        let context = format!("{}:{}", path.display(), ln + 1);
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::Parse(format!("{context}: expected i,j,value")));
        }
        let i: usize = fields[0]
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("{context}: bad row index")))?;
        let j: usize = fields[1]
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("{context}: bad column index")))?;
        if i >= dim || j >= dim {
            return Err(Error::Parse(format!("{context}: index out of bounds")));
        }
        triplets.push((i, j, parse_f64(fields[2], &context)?));
    }
    Ok(SparseMatrix::from_triplets(dim, &triplets))
}

/// Reads a panel from either a directory of per-entity CSVs or a single
/// long-format CSV file.
pub fn read_panel_auto(path: &Path) -> Result<RawPanel> {
    if path.is_dir() {
        let nested = path.join("panel");
        if nested.is_dir() {
            read_panel_dir(&nested)
        } else {
            read_panel_dir(path)
        }
    } else {
        read_panel_long(path)
    }
}

/// Directory mode: each `*.csv` file is one entity (rows = time points,
/// columns = variables, optional header); the file stem is the entity id.
/// Files are visited in name order.
pub fn read_panel_dir(dir: &Path) -> Result<RawPanel> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::EmptyInput(format!(
            "no csv files in {}",
            dir.display()
        )));
    }
    let mut entities = Vec::with_capacity(files.len());
    for file in files {
        let id = file
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Parse(format!("{}: bad file name", file.display())))?
            .to_string();
        let text = fs::read_to_string(&file)?;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: std::result::Result<Vec<f64>, Error> = line
                .split(',')
                .map(|tok| parse_f64(tok, &format!("{}:{}", file.display(), ln + 1)))
                .collect();
            match parsed {
                Ok(row) => rows.push(row),
                // A non-numeric first line is a header.
                Err(_) if rows.is_empty() && ln == 0 => continue,
                Err(e) => return Err(e),
            }
        }
        if rows.is_empty() {
            return Err(Error::Parse(format!("{}: no data rows", file.display())));
        }
        let dim = rows[0].len();
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Parse(format!("{}: ragged rows", file.display())));
        }
        // Rows are time; the panel stores time as columns.
        let series = DMatrix::from_fn(dim, rows.len(), |i, t| rows[t][i]);
        entities.push(RawEntity { id, series });
    }
    Ok(RawPanel { entities })
}

/// Long format: header `entity,time,v1..vp`, rows sorted by entity then
/// time, time consecutive integers within each entity.
pub fn read_panel_long(path: &Path) -> Result<RawPanel> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Parse(format!("{}: empty file", path.display())))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    if columns.len() < 3 || columns[0] != "entity" || columns[1] != "time" {
        return Err(Error::Parse(format!(
            "{}: expected header entity,time,v1..",
            path.display()
        )));
    }
    let dim = columns.len() - 2;

    let mut entities: Vec<RawEntity> = Vec::new();
    let mut seen: std::collections::HashSet<String> = std::collections::HashSet::new();
    let mut current: Option<(String, i64, Vec<Vec<f64>>)> = None;

    let flush = |current: &mut Option<(String, i64, Vec<Vec<f64>>)>,
                     entities: &mut Vec<RawEntity>| {
        if let Some((id, _, rows)) = current.take() {
            let series = DMatrix::from_fn(dim, rows.len(), |i, t| rows[t][i]);
            entities.push(RawEntity { id, series });
        }
    };

    for (ln, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let context = format!("{}:{}", path.display(), ln + 1);
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 2 {
            return Err(Error::Parse(format!(
                "{context}: expected {} fields, got {}",
                dim + 2,
                fields.len()
            )));
        }
        let id = fields[0].trim().to_string();
        let time: i64 = fields[1]
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("{context}: bad time `{}`", fields[1])))?;
        let values = fields[2..]
            .iter()
            .map(|tok| parse_f64(tok, &context))
            .collect::<Result<Vec<f64>>>()?;

        match &mut current {
            Some((cur_id, last_time, rows)) if *cur_id == id => {
                if time != *last_time + 1 {
                    return Err(Error::Parse(format!(
                        "{context}: time must be consecutive; got {time} after {last_time}"
                    )));
                }
                *last_time = time;
                rows.push(values);
            }
            _ => {
                flush(&mut current, &mut entities);
                if !seen.insert(id.clone()) {
                    return Err(Error::Parse(format!(
                        "{context}: entity `{id}` reappears; rows must be sorted by entity"
                    )));
                }
                current = Some((id, time, vec![values]));
            }
        }
    }
    flush(&mut current, &mut entities);
    if entities.is_empty() {
        return Err(Error::EmptyInput(format!("{}: no data", path.display())));
    }
    Ok(RawPanel { entities })
}

/// Writes one CSV per entity under `dir` (rows = time, header `v1..vp`).
pub fn write_panel_dir(dir: &Path, panel: &RawPanel) -> Result<()> {
    for entity in &panel.entities {
        let path = dir.join(format!("{}.csv", entity.id));
        let mut out = create(&path)?;
        let dim = entity.series.nrows();
        let header: Vec<String> = (1..=dim).map(|i| format!("v{i}")).collect();
        writeln!(out, "{}", header.join(","))?;
        for t in 0..entity.series.ncols() {
            let row: Vec<String> = (0..dim).map(|i| fmt(entity.series[(i, t)])).collect();
            writeln!(out, "{}", row.join(","))?;
        }
    }
    Ok(())
}

/// Serializes generated model parameters under `dir/truth`.
pub fn write_truth_bundle(
    dir: &Path,
    truth: &GroundTruth,
    spec: &DgpSpec,
    entity_ids: &[String],
) -> Result<()> {
    let truth_dir = dir.join("truth");
    write_matrix_csv(&truth_dir.join("phi.csv"), &truth.basis)?;
    let p = truth.dim();
    let weights = DMatrix::from_fn(truth.n_entities(), p, |m, j| truth.weights[m][j]);
    write_matrix_csv(&truth_dir.join("w.csv"), &weights)?;
    for (m, id) in entity_ids.iter().enumerate() {
        write_triplets_csv(&truth_dir.join(format!("s_{id}.csv")), &truth.sparse[m])?;
    }
    let meta = TruthMeta {
        spec: spec.clone(),
        entity_ids: entity_ids.to_vec(),
        cluster_labels: spec.entity_labels(),
        sigma_sq: truth.sigma_sq.clone(),
    };
    let mut out = create(&truth_dir.join("meta.json"))?;
    serde_json::to_writer_pretty(&mut out, &meta)?;
    writeln!(out)?;
    Ok(())
}

/// Reads a truth bundle written by [`write_truth_bundle`]; accepts either
/// the bundle directory itself or its parent.
pub fn read_truth_bundle(dir: &Path) -> Result<(GroundTruth, TruthMeta)> {
    let truth_dir = if dir.join("truth").is_dir() {
        dir.join("truth")
    } else {
        dir.to_path_buf()
    };
    let meta: TruthMeta =
        serde_json::from_str(&fs::read_to_string(truth_dir.join("meta.json"))?)?;
    let basis = read_matrix_csv(&truth_dir.join("phi.csv"))?;
    let p = basis.nrows();
    let weights_matrix = read_matrix_csv(&truth_dir.join("w.csv"))?;
    if weights_matrix.ncols() != p || weights_matrix.nrows() != meta.entity_ids.len() {
        return Err(Error::DimensionMismatch(format!(
            "w.csv is {}x{}, expected {}x{}",
            weights_matrix.nrows(),
            weights_matrix.ncols(),
            meta.entity_ids.len(),
            p
        )));
    }
    let weights: Vec<DVector<f64>> = (0..weights_matrix.nrows())
        .map(|m| weights_matrix.row(m).transpose())
        .collect();
    let mut sparse = Vec::with_capacity(meta.entity_ids.len());
    for id in &meta.entity_ids {
        sparse.push(read_triplets_csv(
            &truth_dir.join(format!("s_{id}.csv")),
            p,
        )?);
    }
    let transitions: Vec<DMatrix<f64>> = (0..weights.len())
        .map(|m| {
            let mut a = basis.clone();
            for j in 0..p {
                a.row_mut(j).scale_mut(weights[m][j]);
                for &(k, v) in sparse[m].row(j) {
                    a[(j, k)] += v;
                }
            }
            a
        })
        .collect();
    Ok((
        GroundTruth {
            basis,
            weights,
            sparse,
            transitions,
            sigma_sq: meta.sigma_sq.clone(),
        },
        meta,
    ))
}

/// Writes the estimate bundle: `phi.csv`, `w.csv`, one sparse triplet file
/// per entity, the iteration trace, and the run report.
pub fn write_estimate_bundle(
    dir: &Path,
    state: &LsPvarState,
    trace: &SolverTrace,
    report: &RunReport,
) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let phi_path = dir.join("phi.csv");
    write_matrix_csv(&phi_path, &state.basis)?;
    written.push(phi_path);

    let p = state.dim();
    let weights = DMatrix::from_fn(state.n_entities(), p, |m, j| state.weights[m][j]);
    let w_path = dir.join("w.csv");
    write_matrix_csv(&w_path, &weights)?;
    written.push(w_path);

    for (m, id) in report.entities.iter().enumerate() {
        let path = dir.join(format!("s_{id}.csv"));
        write_triplets_csv(&path, &state.sparse[m])?;
        written.push(path);
    }

    let trace_path = dir.join("trace.csv");
    let mut out = create(&trace_path)?;
    writeln!(
        out,
        "iteration,g,f,primal_residual,step_w_sq,step_s_sq,step_phi_sq,step_phi_c_sq"
    )?;
    for r in &trace.records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.iteration,
            fmt(r.augmented),
            fmt(r.penalized),
            fmt(r.primal_residual),
            fmt(r.step_w_sq),
            fmt(r.step_s_sq),
            fmt(r.step_basis_sq),
            fmt(r.step_feasible_sq)
        )?;
    }
    drop(out);
    written.push(trace_path);

    let report_path = dir.join("report.json");
    let mut out = create(&report_path)?;
    serde_json::to_writer_pretty(&mut out, report)?;
    writeln!(out)?;
    drop(out);
    written.push(report_path);
    Ok(written)
}

/// Reads back an estimate bundle written by [`write_estimate_bundle`].
pub fn read_estimate_bundle(dir: &Path) -> Result<EstimateBundle> {
    let report: RunReport =
        serde_json::from_str(&fs::read_to_string(dir.join("report.json"))?)?;
    let basis = read_matrix_csv(&dir.join("phi.csv"))?;
    let p = basis.nrows();
    if basis.ncols() != p || p != report.dim {
        return Err(Error::DimensionMismatch(format!(
            "phi.csv is {}x{}, report says dim {}",
            p,
            basis.ncols(),
            report.dim
        )));
    }
    let weights_matrix = read_matrix_csv(&dir.join("w.csv"))?;
    if weights_matrix.nrows() != report.entities.len() || weights_matrix.ncols() != p {
        return Err(Error::DimensionMismatch("w.csv shape mismatch".into()));
    }
    let weights = (0..weights_matrix.nrows())
        .map(|m| weights_matrix.row(m).transpose())
        .collect();
    let mut sparse = Vec::with_capacity(report.entities.len());
    for id in &report.entities {
        sparse.push(read_triplets_csv(&dir.join(format!("s_{id}.csv")), p)?);
    }
    Ok(EstimateBundle {
        basis,
        weights,
        sparse,
        report,
    })
}

/// Writes `bic_path.csv` with one row per grid point.
pub fn write_bic_path(path: &Path, records: &[BicRecord]) -> Result<()> {
    let mut out = create(path)?;
    writeln!(out, "eta,rss,dof,bic,iterations,converged")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            fmt(r.eta),
            fmt(r.rss),
            r.dof,
            fmt(r.bic),
            r.iterations,
            r.converged
        )?;
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_else(|| "NA".into())
}

/// Writes per-entity recovery metrics plus cluster aggregates.
pub fn write_metrics_csv(
    path: &Path,
    entity_ids: &[String],
    labels: &[Option<String>],
    metrics: &RecoveryMetrics,
) -> Result<()> {
    let mut out = create(path)?;
    writeln!(
        out,
        "entity,cluster,rel_frob_a,abs_frob_w,abs_frob_s,accuracy,sensitivity,specificity"
    )?;
    for e in &metrics.per_entity {
        let label = labels
            .get(e.entity)
            .and_then(|l| l.as_deref())
            .unwrap_or("none");
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            entity_ids[e.entity],
            label,
            fmt_opt(e.rel_frob_a),
            fmt(e.abs_frob_w),
            fmt(e.abs_frob_s),
            fmt(e.accuracy),
            fmt_opt(e.sensitivity),
            fmt_opt(e.specificity)
        )?;
    }
    Ok(())
}

/// Writes cluster-level aggregates.
pub fn write_cluster_summary_csv(path: &Path, summary: &[ClusterSummary]) -> Result<()> {
    let mut out = create(path)?;
    writeln!(
        out,
        "cluster,entities,rel_frob_a,abs_frob_w,abs_frob_s,accuracy,sensitivity,specificity"
    )?;
    for s in summary {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            s.label,
            s.entities,
            fmt_opt(s.mean_rel_frob_a),
            fmt(s.mean_abs_frob_w),
            fmt(s.mean_abs_frob_s),
            fmt(s.mean_accuracy),
            fmt_opt(s.mean_sensitivity),
            fmt_opt(s.mean_specificity)
        )?;
    }
    Ok(())
}

/// Writes PCA scores, one row per entity.
pub fn write_pca_csv(path: &Path, entity_ids: &[String], scores: &DMatrix<f64>) -> Result<()> {
    let mut out = create(path)?;
    let header: Vec<String> = std::iter::once("entity".to_string())
        .chain((1..=scores.ncols()).map(|k| format!("pc{k}")))
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for (m, id) in entity_ids.iter().enumerate() {
        let mut row = vec![id.clone()];
        row.extend((0..scores.ncols()).map(|k| fmt(scores[(m, k)])));
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

/// Writes the incoherence grid, one row per entity and balancing value.
pub fn write_incoherence_csv(
    path: &Path,
    entity_ids: &[String],
    curves: &[IncoherenceCurve],
) -> Result<()> {
    let mut out = create(path)?;
    writeln!(out, "entity,varsigma,mu,nu,product")?;
    for (id, curve) in entity_ids.iter().zip(curves) {
        for pt in &curve.points {
            writeln!(
                out,
                "{},{},{},{},{}",
                id,
                fmt(pt.varsigma),
                fmt(pt.mu),
                fmt(pt.nu),
                fmt(pt.product)
            )?;
        }
    }
    Ok(())
}

/// Writes per-entity stability flags.
pub fn write_stability_csv(
    path: &Path,
    entity_ids: &[String],
    stability: &[Stability],
) -> Result<()> {
    let mut out = create(path)?;
    writeln!(out, "entity,spectral_radius,is_stable,converged")?;
    for (id, s) in entity_ids.iter().zip(stability) {
        writeln!(
            out,
            "{},{},{},{}",
            id,
            fmt(s.spectral_radius),
            s.is_stable,
            s.converged
        )?;
    }
    Ok(())
}
