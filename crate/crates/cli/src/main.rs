//! Command line driver: simulate panels, fit the model, tune the penalty,
//! and diagnose estimates. Identical inputs, seed, and thread count produce
//! byte-identical CSV outputs; `report.json` additionally carries wall-clock
//! timings.

mod config;

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use config::{AutoOr, FileConfig, GridSpec};
use lspvar::diagnostics::{
    aggregate_by_cluster, compute_metrics, default_varsigma_grid, incoherence, pca_weights,
    stability_check,
};
use lspvar::io;
use lspvar::panel::{build_panel, PanelData};
use lspvar::projections::IntersectionState;
use lspvar::solver::{fit, init_random, init_spectral, FitOutcome, LsPvarState, SolverConfig};
use lspvar::synthetic::{generate_truth, simulate_panel, DgpSpec};
use lspvar::tuning::{default_eta_grid, geometric_grid, grid_search_eta, BicRecord, GridMode};

#[derive(Parser)]
#[command(
    name = "lspvar",
    about = "Low-rank plus sparse panel VAR estimation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic panel and its ground-truth bundle.
    Simulate(SimulateArgs),
    /// Estimate the model on a panel.
    Fit(FitArgs),
    /// Fit over a penalty grid and keep the minimum-BIC estimate
    /// (equivalent to `fit --eta-grid`).
    Tune(FitArgs),
    /// Stability, incoherence, and weight-PCA reports for an estimate.
    Diagnose(DiagnoseArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario preset: example1, large, or rankstudy.
    #[arg(long)]
    preset: Option<String>,
    /// RNG seed (mandatory).
    #[arg(long)]
    seed: u64,
    /// Output directory for panel/ and truth/.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long)]
    entities: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    /// Basis rank of the generated model.
    #[arg(long)]
    rank: Option<usize>,
    /// Expected nonzeros per sparse component.
    #[arg(long)]
    nnz: Option<f64>,
    /// Series length T (each entity emits T+1 rows).
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    sigma_shape: Option<f64>,
    #[arg(long)]
    sigma_scale: Option<f64>,
    #[arg(long)]
    burn_in: Option<usize>,
    /// Nuclear norm of the generated basis.
    #[arg(long)]
    ell_gen: Option<f64>,
    #[arg(long)]
    threads: Option<usize>,
    /// Key-value config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    /// Panel directory (per-entity CSVs, optionally under panel/) or a
    /// long-format CSV file.
    #[arg(long)]
    panel: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fixed lasso penalty (single fit).
    #[arg(long)]
    eta: Option<f64>,
    /// Penalty grid MIN:MAX:N for BIC selection.
    #[arg(long)]
    eta_grid: Option<GridSpec>,
    /// Maximum basis rank; defaults to ceil(dim / 4).
    #[arg(long)]
    rank: Option<usize>,
    /// Nuclear norm budget, or `auto` for sqrt(rank * dim).
    #[arg(long)]
    ell: Option<AutoOr>,
    /// ADMM step size, or `auto` for entities / 10.
    #[arg(long)]
    rho: Option<AutoOr>,
    /// Convergence tolerance.
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Initialization: spectral (data-driven) or random.
    #[arg(long)]
    init: Option<String>,
    /// Seed for the random initialization.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    /// Also emit recovery metrics against the truth bundle stored next to
    /// the panel.
    #[arg(long)]
    metrics: bool,
    /// PCA components for the metrics output.
    #[arg(long)]
    pca: Option<usize>,
    /// Key-value config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// Estimate bundle directory (output of fit).
    #[arg(long)]
    estimate: Option<PathBuf>,
    /// Output directory; defaults to the bundle directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of PCA components for the weight scores.
    #[arg(long)]
    pca: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
    /// Key-value config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Fit(args) => cmd_fit(args, false),
        Command::Tune(args) => cmd_fit(args, true),
        Command::Diagnose(args) => cmd_diagnose(args),
    };
    if let Err(e) = outcome {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn install_pool<T: Send>(
    threads: Option<usize>,
    task: impl FnOnce() -> Result<T> + Send,
) -> Result<T> {
    match threads {
        None => task(),
        Some(n) => {
            if n == 0 {
                bail!("--threads must be at least 1");
            }
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .context("building thread pool")?;
            pool.install(task)
        }
    }
}

/// Removes every listed path if the guard is not disarmed, keeping failed
/// runs from leaving partial outputs behind.
struct OutputGuard {
    written: Vec<PathBuf>,
    armed: bool,
}

impl OutputGuard {
    fn new() -> Self {
        Self {
            written: Vec::new(),
            armed: true,
        }
    }

    fn track(&mut self, paths: impl IntoIterator<Item = PathBuf>) {
        self.written.extend(paths);
    }

    fn disarm(&mut self) {
        self.armed = false;
    }
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        if self.armed {
            for path in &self.written {
                let _ = std::fs::remove_file(path);
            }
        }
    }
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let preset = args.preset.or(file.get::<String>("preset")?);
    let threads = args.threads.or(file.get("threads")?);

    let mut spec = match &preset {
        Some(name) => DgpSpec::preset(name, args.seed)?,
        None => {
            let entities = args
                .entities
                .or(file.get("entities")?)
                .ok_or_else(|| anyhow!("--entities required without --preset"))?;
            let dim = args
                .dim
                .or(file.get("dim")?)
                .ok_or_else(|| anyhow!("--dim required without --preset"))?;
            let rank = args.rank.or(file.get("rank")?).unwrap_or(1);
            let nnz = args.nnz.or(file.get("nnz")?).unwrap_or(0.0);
            let horizon = args
                .horizon
                .or(file.get("horizon")?)
                .ok_or_else(|| anyhow!("--horizon required without --preset"))?;
            DgpSpec::new(entities, dim, rank, nnz, horizon, args.seed)
        }
    };
    // Flags refine the preset.
    if preset.is_some() {
        if let Some(horizon) = args.horizon.or(file.get("horizon")?) {
            spec.horizon = horizon;
        }
    }
    if let Some(v) = args.sigma_shape.or(file.get("sigma_shape")?) {
        spec.sigma_shape = v;
    }
    if let Some(v) = args.sigma_scale.or(file.get("sigma_scale")?) {
        spec.sigma_scale = v;
    }
    if let Some(v) = args.burn_in.or(file.get("burn_in")?) {
        spec.burn_in = v;
    }
    if let Some(v) = args.ell_gen.or(file.get("ell_gen")?) {
        spec.nuclear_scale = v;
    }

    install_pool(threads, || {
        let started = Instant::now();
        let truth = generate_truth(&spec)?;
        let raw = simulate_panel(&truth, spec.horizon, spec.burn_in, spec.seed);
        let panel_dir = args.out.join("panel");
        io::write_panel_dir(&panel_dir, &raw)?;
        let ids: Vec<String> = raw.entities.iter().map(|e| e.id.clone()).collect();
        io::write_truth_bundle(&args.out, &truth, &spec, &ids)?;
        println!(
            "wrote {} entity series ({} x {}) and truth bundle to {} in {:.1}s",
            ids.len(),
            spec.dim,
            spec.horizon + 1,
            args.out.display(),
            started.elapsed().as_secs_f64()
        );
        Ok(())
    })
}

struct ResolvedFit {
    panel_path: PathBuf,
    out: PathBuf,
    cfg: SolverConfig,
    init_kind: String,
    seed: u64,
    grid: Option<Vec<f64>>,
    metrics: bool,
    pca: usize,
    threads: usize,
}

fn resolve_fit(args: &FitArgs, tune: bool, panel: &PanelData) -> Result<ResolvedFit> {
    let file = FileConfig::load(args.config.as_deref())?;
    let p = panel.dim;
    let n_entities = panel.n_entities();

    let rank = args
        .rank
        .or(file.get("rank")?)
        .unwrap_or_else(|| p.div_ceil(4));
    let mut cfg = SolverConfig::auto(p, n_entities, rank);
    cfg.nuclear_norm = args
        .ell
        .or(file.get("ell")?)
        .unwrap_or(AutoOr::Auto)
        .resolve(((rank * p) as f64).sqrt());
    let rho = args
        .rho
        .or(file.get("rho")?)
        .unwrap_or(AutoOr::Auto)
        .resolve(n_entities as f64 / 10.0);
    cfg.step_size = rho;
    cfg.proximal_weight = n_entities as f64 / rho;
    if let Some(eps) = args.eps.or(file.get("eps")?) {
        cfg.tol = eps;
    }
    if let Some(n) = args.max_iter.or(file.get("max_iter")?) {
        cfg.max_iter = n;
    }

    let eta = args.eta.or(file.get("eta")?);
    let grid_spec: Option<GridSpec> = match args.eta_grid {
        Some(g) => Some(g),
        None => file.get("eta_grid")?,
    };
    let grid_points: usize = file.get("grid_points")?.unwrap_or(15);
    let grid = match (tune, grid_spec, eta) {
        (_, Some(spec), _) => Some(geometric_grid(spec.min, spec.max, spec.points)),
        (true, None, None) => Some(default_eta_grid(panel, grid_points)),
        (false, None, None) => {
            bail!("fit needs --eta or --eta-grid (or use the tune subcommand)")
        }
        _ => None,
    };
    if grid.is_some() {
        if let Some(single) = eta {
            bail!("--eta {single} conflicts with a penalty grid; pass one of the two");
        }
    }
    if let Some(e) = eta {
        cfg.lasso_penalty = e;
    }

    let init_kind = args
        .init
        .clone()
        .or(file.get("init")?)
        .unwrap_or_else(|| "spectral".into());
    if init_kind != "spectral" && init_kind != "random" {
        bail!("--init must be `spectral` or `random`, got `{init_kind}`");
    }
    let threads = match args.threads.or(file.get("threads")?) {
        Some(n) if n == 0 => bail!("--threads must be at least 1"),
        Some(n) => n,
        None => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    };
    Ok(ResolvedFit {
        panel_path: args
            .panel
            .clone()
            .or(file.get("panel")?)
            .ok_or_else(|| anyhow!("--panel is required"))?,
        out: args
            .out
            .clone()
            .or(file.get("out")?)
            .ok_or_else(|| anyhow!("--out is required"))?,
        cfg,
        init_kind,
        seed: args.seed.or(file.get("seed")?).unwrap_or(0),
        grid,
        metrics: args.metrics || file.get_flag("metrics")?,
        pca: args.pca.or(file.get("pca")?).unwrap_or(3),
        threads,
    })
}

fn cmd_fit(args: FitArgs, tune: bool) -> Result<()> {
    let started = Instant::now();
    let panel_path = {
        let file = FileConfig::load(args.config.as_deref())?;
        args.panel
            .clone()
            .or(file.get("panel")?)
            .ok_or_else(|| anyhow!("--panel is required"))?
    };
    let raw = io::read_panel_auto(&panel_path)?;
    let panel = build_panel(&raw)?;
    let resolved = resolve_fit(&args, tune, &panel)?;

    install_pool(Some(resolved.threads), || {
        run_fit(&panel, &resolved, started)
    })
}

fn run_fit(panel: &PanelData, run: &ResolvedFit, started: Instant) -> Result<()> {
    let init = match run.init_kind.as_str() {
        "random" => init_random(panel.dim, panel.n_entities(), &run.cfg, run.seed)?,
        _ => init_spectral(panel, &run.cfg)?,
    };

    let solve_started = Instant::now();
    let (outcome, records, best_eta): (FitOutcome, Option<Vec<BicRecord>>, Option<f64>) =
        match &run.grid {
            Some(grid) => {
                let search =
                    grid_search_eta(panel, &run.cfg, grid, &init, GridMode::WarmStart)?;
                for (eta, error) in &search.failures {
                    eprintln!("warning: grid point eta={eta} failed: {error}");
                }
                let best_eta = search.best_eta();
                (search.best, Some(search.records), Some(best_eta))
            }
            None => (fit(panel, &run.cfg, &init)?, None, None),
        };
    let solve_s = solve_started.elapsed().as_secs_f64();

    let mut final_cfg = run.cfg.clone();
    final_cfg.lasso_penalty = best_eta.unwrap_or(run.cfg.lasso_penalty);
    let bic_value = lspvar::tuning::bic(&outcome.state, panel, &final_cfg)?;

    let mut guard = OutputGuard::new();
    let report = io::RunReport {
        command: if run.grid.is_some() { "tune" } else { "fit" }.into(),
        entities: panel.entity_ids(),
        dim: panel.dim,
        solver: final_cfg.clone(),
        init: run.init_kind.clone(),
        seed: Some(run.seed),
        threads: run.threads,
        eta_grid: run.grid.clone(),
        best_eta,
        termination: outcome.termination,
        converged: outcome.converged,
        iterations: outcome.iterations,
        restarts: outcome.restarts,
        step_size_used: outcome.step_size_used,
        proximal_weight_used: outcome.proximal_weight_used,
        rss: outcome.rss(),
        bic: Some(bic_value.bic),
        kkt_residual: outcome.kkt_residual,
        warnings: outcome.warnings.clone(),
        timings: io::Timings {
            total_s: started.elapsed().as_secs_f64(),
            solve_s,
        },
    };
    guard.track(io::write_estimate_bundle(
        &run.out,
        &outcome.state,
        &outcome.trace,
        &report,
    )?);
    if let Some(records) = &records {
        let path = run.out.join("bic_path.csv");
        io::write_bic_path(&path, records)?;
        guard.track([path]);
    }

    if run.metrics {
        write_metrics_outputs(panel, &outcome.state, run, &mut guard)?;
    }
    guard.disarm();

    println!(
        "fit: {} entities, dim {}, {} iterations, converged {} ({:?}), rss {:.6e}{}",
        panel.n_entities(),
        panel.dim,
        outcome.iterations,
        outcome.converged,
        outcome.termination,
        outcome.rss(),
        best_eta
            .map(|e| format!(", best eta {e:.6}"))
            .unwrap_or_default()
    );
    for warning in &outcome.warnings {
        eprintln!("warning: {warning}");
    }
    Ok(())
}

fn write_metrics_outputs(
    panel: &PanelData,
    state: &LsPvarState,
    run: &ResolvedFit,
    guard: &mut OutputGuard,
) -> Result<()> {
    let (truth, meta) = io::read_truth_bundle(&truth_root(&run.panel_path))
        .context("reading truth bundle for --metrics")?;
    let ids = panel.entity_ids();
    if meta.entity_ids != ids {
        bail!("truth bundle entities do not match the panel");
    }
    let metrics = compute_metrics(state, &truth, run.cfg.nuclear_norm)?;
    let metrics_path = run.out.join("metrics.csv");
    io::write_metrics_csv(&metrics_path, &ids, &meta.cluster_labels, &metrics)?;
    let summary = aggregate_by_cluster(&metrics, &meta.cluster_labels);
    let summary_path = run.out.join("cluster_summary.csv");
    io::write_cluster_summary_csv(&summary_path, &summary)?;
    let weights = weights_matrix(state);
    let k = run.pca.min(weights.nrows().min(weights.ncols()));
    let (scores, _) = pca_weights(&weights, k)?;
    let pca_path = run.out.join("pca_scores.csv");
    io::write_pca_csv(&pca_path, &ids, &scores)?;
    guard.track([metrics_path, summary_path, pca_path]);
    Ok(())
}

fn truth_root(panel_path: &Path) -> PathBuf {
    // simulate writes <out>/panel and <out>/truth; accept either the parent
    // or the panel directory itself.
    if panel_path.join("truth").is_dir() {
        panel_path.to_path_buf()
    } else if let Some(parent) = panel_path.parent() {
        parent.to_path_buf()
    } else {
        panel_path.to_path_buf()
    }
}

fn weights_matrix(state: &LsPvarState) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_fn(state.n_entities(), state.dim(), |m, j| state.weights[m][j])
}

fn cmd_diagnose(args: DiagnoseArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let estimate: PathBuf = args
        .estimate
        .clone()
        .or(file.get("estimate")?)
        .ok_or_else(|| anyhow!("--estimate is required"))?;
    let out = args.out.clone().or(file.get("out")?).unwrap_or_else(|| estimate.clone());
    let pca = args.pca.or(file.get("pca")?).unwrap_or(3);
    let threads = args.threads.or(file.get("threads")?);

    install_pool(threads, || {
        let bundle = io::read_estimate_bundle(&estimate)
            .with_context(|| format!("reading estimate bundle {}", estimate.display()))?;
        let ids = bundle.report.entities.clone();
        let p = bundle.basis.nrows();
        let state = LsPvarState {
            weights: bundle.weights.clone(),
            sparse: bundle.sparse.clone(),
            basis: bundle.basis.clone(),
            basis_feasible: bundle.basis.clone(),
            dual: nalgebra::DMatrix::zeros(p, p),
            inner: IntersectionState::cold(&bundle.basis),
        };

        let mut guard = OutputGuard::new();
        let stability: Vec<_> = (0..ids.len())
            .map(|m| stability_check(&state.transition(m)))
            .collect();
        let stability_path = out.join("stability.csv");
        io::write_stability_csv(&stability_path, &ids, &stability)?;
        guard.track([stability_path]);

        let grid = default_varsigma_grid();
        let curves = bundle
            .sparse
            .iter()
            .map(|s| incoherence(s, &bundle.basis, &grid))
            .collect::<lspvar::Result<Vec<_>>>()?;
        let inc_path = out.join("incoherence.csv");
        io::write_incoherence_csv(&inc_path, &ids, &curves)?;
        guard.track([inc_path]);

        let weights = weights_matrix(&state);
        let k = pca.min(weights.nrows().min(weights.ncols()));
        let (scores, explained) = pca_weights(&weights, k)?;
        let pca_path = out.join("pca_scores.csv");
        io::write_pca_csv(&pca_path, &ids, &scores)?;
        guard.track([pca_path]);
        guard.disarm();

        let unstable = stability.iter().filter(|s| !s.is_stable).count();
        let flagged = curves.iter().filter(|c| c.flagged).count();
        println!(
            "diagnose: {} entities, {} unstable, {} incoherence-flagged, pca variance {:?}",
            ids.len(),
            unstable,
            flagged,
            explained.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>()
        );
        Ok(())
    })
}
