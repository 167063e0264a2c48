//! Subcommand implementations. Workers only compute; every file is written
//! by the calling thread after the parallel section has finished.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use signflow_core::analysis::{
    characterize, check_grid, corollary_nd_line, sweep_cell, verify_all, ClaimStatus, KktReport, NdLine, SweepCell,
    SweepRecord, Tolerances, VerificationReport,
};
use signflow_core::dynamics::{
    detect_stages, integrate, Algorithm, IntegratorStats, StageReport, StopReason, Trajectory,
};
use signflow_core::problem::{admissible_instance, validate_assumptions, AdmissibleBox, Dataset, HyperParams};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::format::{fmt_f64, sweep_csv, trajectory_csv, versioned_json, DatasetFile, Table};

/// Block sizes of the default (five-feature, two-example) dataset.
pub const FIG1_BLOCKS: [usize; 2] = [2, 3];
pub const FIG1_ALPHA: f64 = 0.1;
pub const FIG1_EPS: f64 = 0.005;
pub const FIG1_GRID: [f64; 4] = [0.001, 0.002, 0.005, 0.01];
/// Fractions of the largest admissible ε used by the default fig2/fig3 grid.
pub const AUTO_GRID_FRACTIONS: [f64; 5] = [0.19, 0.38, 0.57, 0.76, 0.95];
pub const DEFAULT_INSTANCES: u64 = 200;
pub const DEFAULT_MAX_BLOCKS: usize = 3;

fn config_err(e: impl Display) -> CliError {
    CliError::Config(e.to_string())
}

fn integration_err(e: impl Display) -> CliError {
    CliError::Integration(e.to_string())
}

/// Creates `dir` and checks that a file can be written into it.
pub fn prepare_out(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))?;
    let probe = dir.join(".signflow-probe");
    fs::write(&probe, b"").map_err(|e| CliError::Config(format!("{} is not writable: {e}", dir.display())))?;
    let _ = fs::remove_file(probe);
    Ok(())
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), CliError> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, body: &T) -> Result<(), CliError> {
    let bytes = versioned_json(body).map_err(|e| CliError::Io(format!("{name}: {e}")))?;
    write_file(dir, name, &bytes)
}

fn read_file(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Config(format!("missing input {}: {e}", path.display())))
}

/// Stage-time sidecar of one run.
#[derive(Debug, Clone, Serialize)]
pub struct StageSidecar {
    pub algorithm: Algorithm,
    pub eps: f64,
    pub alpha: f64,
    #[serde(rename = "T0")]
    pub t0: Option<f64>,
    #[serde(rename = "T")]
    pub t: Option<f64>,
    pub t_i: Vec<Option<f64>>,
    #[serde(rename = "T_i")]
    pub t_sign: Vec<Option<f64>>,
    #[serde(rename = "T_n")]
    pub t_block: Vec<Option<f64>>,
    pub converged_at: f64,
    pub stop_reason: StopReason,
    pub stats: IntegratorStats,
}

impl StageSidecar {
    pub fn new(traj: &Trajectory, stages: Option<&StageReport>) -> Self {
        Self {
            algorithm: traj.algorithm,
            eps: traj.hyper.epsilon,
            alpha: traj.hyper.alpha,
            t0: stages.and_then(|s| s.t0),
            t: stages.and_then(|s| s.t),
            t_i: stages.map(|s| s.t_warmup.clone()).unwrap_or_default(),
            t_sign: stages.map(|s| s.t_signdescent.clone()).unwrap_or_default(),
            t_block: stages.map(|s| s.t_block.clone()).unwrap_or_default(),
            converged_at: traj.final_time(),
            stop_reason: traj.stop_reason,
            stats: traj.stats,
        }
    }
}

#[derive(Serialize)]
struct KktDoc<'a> {
    eps: f64,
    alpha: f64,
    admissible: bool,
    report: Option<&'a KktReport>,
    error: Option<String>,
    /// `max_t |w⁺_i w⁻_i − α²|` (GD runs only).
    gd_conservation: Option<f64>,
}

/// `max_t max_i |w⁺_i w⁻_i − α²|` over the recorded samples.
pub fn conservation_error(traj: &Trajectory) -> f64 {
    let a2 = traj.hyper.alpha * traj.hyper.alpha;
    traj.samples
        .iter()
        .flat_map(|s| s.w_plus.iter().zip(&s.w_minus).map(move |(p, m)| (p * m - a2).abs()))
        .fold(0.0, f64::max)
}

fn tolerances(cfg: &RunConfig) -> Tolerances {
    Tolerances { event_tol: cfg.integrator.event_tol, ..Tolerances::default() }
}

fn warn_inadmissible(ds: &Dataset, hp: &HyperParams) {
    if !validate_assumptions(ds, hp).all_ok() {
        eprintln!(
            "warning: (eps={}, alpha={}) lies outside the assumption box; theorem checks are informational",
            hp.epsilon, hp.alpha
        );
    }
}

/// `simulate`: one run with trajectory, stages, KKT and verification outputs.
pub fn simulate(cfg: &RunConfig) -> Result<(), CliError> {
    prepare_out(&cfg.out)?;
    let ds = cfg.build_dataset(&FIG1_BLOCKS)?;
    let hp = HyperParams::new(cfg.eps.unwrap_or(FIG1_EPS), cfg.alpha.unwrap_or(FIG1_ALPHA)).map_err(config_err)?;
    warn_inadmissible(&ds, &hp);
    write_json(&cfg.out, "dataset.json", &DatasetFile::of(&ds))?;

    let traj = integrate(&ds, cfg.algo, &hp, &cfg.integrator).map_err(integration_err)?;
    write_file(&cfg.out, "trajectory.csv", trajectory_csv(&traj).as_bytes())?;

    let stages = match cfg.algo {
        Algorithm::Ssd if hp.epsilon > 0.0 => {
            Some(detect_stages(&traj, &ds, hp.epsilon, cfg.integrator.event_tol).map_err(integration_err)?)
        }
        _ => None,
    };
    write_json(&cfg.out, "stages.json", &StageSidecar::new(&traj, stages.as_ref()))?;

    let verification = verify_all(&ds, &hp, &traj, &tolerances(cfg));
    write_json(&cfg.out, "verification.json", &verification)?;

    let kkt = characterize(&ds, &hp, &traj);
    let doc = KktDoc {
        eps: hp.epsilon,
        alpha: hp.alpha,
        admissible: validate_assumptions(&ds, &hp).all_ok(),
        report: kkt.as_ref().ok(),
        error: kkt.as_ref().err().map(ToString::to_string),
        gd_conservation: (cfg.algo == Algorithm::Gd).then(|| conservation_error(&traj)),
    };
    write_json(&cfg.out, "kkt.json", &doc)?;
    kkt.map(|_| ()).map_err(integration_err)
}

#[derive(Debug, Clone, Serialize)]
struct ClaimSummary {
    name: String,
    passed: usize,
    failed: usize,
    /// Failures on instances outside the assumption box (informational).
    gated_failures: usize,
    skipped: usize,
    worst_margin: Option<f64>,
    worst_instance: Option<u64>,
}

#[derive(Debug, Clone, Serialize)]
struct InstanceSummary {
    index: u64,
    n_blocks: usize,
    eps: f64,
    alpha: f64,
    admissible: bool,
    passed: bool,
    failed_claims: Vec<String>,
    error: Option<String>,
}

#[derive(Serialize)]
struct VerifyDoc {
    algorithm: Algorithm,
    seed: u64,
    instances: u64,
    passed: bool,
    claims: Vec<ClaimSummary>,
    instance_results: Vec<InstanceSummary>,
}

fn verify_instance(
    index: u64,
    ds: &Dataset,
    hp: &HyperParams,
    cfg: &RunConfig,
) -> (InstanceSummary, Option<VerificationReport>) {
    let mut summary = InstanceSummary {
        index,
        n_blocks: ds.blocks().len(),
        eps: hp.epsilon,
        alpha: hp.alpha,
        admissible: validate_assumptions(ds, hp).all_ok(),
        passed: false,
        failed_claims: Vec::new(),
        error: None,
    };
    match integrate(ds, cfg.algo, hp, &cfg.integrator) {
        Ok(traj) => {
            let report = verify_all(ds, hp, &traj, &tolerances(cfg));
            summary.passed = report.passed();
            summary.failed_claims =
                report.claims.iter().filter(|c| c.status == ClaimStatus::Fail).map(|c| c.name.clone()).collect();
            (summary, Some(report))
        }
        Err(e) => {
            summary.error = Some(e.to_string());
            (summary, None)
        }
    }
}

fn summarize_claims(results: &[(InstanceSummary, Option<VerificationReport>)]) -> Vec<ClaimSummary> {
    let mut out: Vec<ClaimSummary> = Vec::new();
    for (inst, report) in results {
        let Some(report) = report else { continue };
        for c in &report.claims {
            let idx = match out.iter().position(|s| s.name == c.name) {
                Some(i) => i,
                None => {
                    out.push(ClaimSummary {
                        name: c.name.clone(),
                        passed: 0,
                        failed: 0,
                        gated_failures: 0,
                        skipped: 0,
                        worst_margin: None,
                        worst_instance: None,
                    });
                    out.len() - 1
                }
            };
            let s = &mut out[idx];
            match c.status {
                ClaimStatus::Pass => s.passed += 1,
                ClaimStatus::Fail if c.gated => s.gated_failures += 1,
                ClaimStatus::Fail => s.failed += 1,
                ClaimStatus::Skipped => s.skipped += 1,
            }
            if let Some(m) = c.margin {
                if !c.gated && s.worst_margin.is_none_or(|w| m < w) {
                    s.worst_margin = Some(m);
                    s.worst_instance = Some(inst.index);
                }
            }
        }
    }
    out
}

/// `verify`: runs every claim on a seeded batch (or on the configured
/// dataset) and writes `verify.json`.
pub fn verify(cfg: &RunConfig) -> Result<(), CliError> {
    prepare_out(&cfg.out)?;
    let count = cfg.instances.unwrap_or(DEFAULT_INSTANCES);
    if count == 0 {
        return Err(CliError::Config("instance count must be at least 1".into()));
    }
    let max_blocks = cfg.max_blocks.unwrap_or(DEFAULT_MAX_BLOCKS);
    let override_hp = |hp: HyperParams| {
        HyperParams::new(cfg.eps.unwrap_or(hp.epsilon), cfg.alpha.unwrap_or(hp.alpha)).map_err(config_err)
    };
    let instances: Vec<(u64, Dataset, HyperParams)> = if cfg.dataset.is_some() {
        let ds = cfg.build_dataset(&FIG1_BLOCKS)?;
        let hp = HyperParams::new(cfg.eps.unwrap_or(FIG1_EPS), cfg.alpha.unwrap_or(FIG1_ALPHA)).map_err(config_err)?;
        vec![(0, ds, hp)]
    } else {
        (0..count)
            .map(|k| {
                let inst = admissible_instance(cfg.seed, k, max_blocks).map_err(config_err)?;
                Ok((k, inst.dataset, override_hp(inst.hyper)?))
            })
            .collect::<Result<_, CliError>>()?
    };

    let pool = cfg.thread_pool()?;
    let results: Vec<_> =
        pool.install(|| instances.par_iter().map(|(k, ds, hp)| verify_instance(*k, ds, hp, cfg)).collect());

    let claims = summarize_claims(&results);
    let failed_integration: Vec<u64> = results.iter().filter(|(s, _)| s.error.is_some()).map(|(s, _)| s.index).collect();
    let failed_claims: Vec<String> = claims.iter().filter(|c| c.failed > 0).map(|c| c.name.clone()).collect();
    for c in claims.iter().filter(|c| c.gated_failures > 0) {
        eprintln!("warning: claim {} failed on {} inadmissible instance(s) (informational)", c.name, c.gated_failures);
    }
    let passed = failed_integration.is_empty() && results.iter().all(|(s, _)| s.passed);
    let doc = VerifyDoc {
        algorithm: cfg.algo,
        seed: cfg.seed,
        instances: instances.len() as u64,
        passed,
        instance_results: results.into_iter().map(|(s, _)| s).collect(),
        claims,
    };
    write_json(&cfg.out, "verify.json", &doc)?;

    if !failed_integration.is_empty() {
        return Err(CliError::Integration(format!("instances {failed_integration:?} did not integrate")));
    }
    if !failed_claims.is_empty() {
        return Err(CliError::Verify(format!("claims failed: {}", failed_claims.join(", "))));
    }
    Ok(())
}

/// Dataset, α and ε grid of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPlan {
    pub dataset: Dataset,
    pub alpha: f64,
    pub grid: Vec<f64>,
}

impl SweepPlan {
    /// Defaults: the five-feature dataset with α = 0.1 and the grid
    /// {0.001, 0.002, 0.005, 0.01}.
    pub fn fig1(cfg: &RunConfig) -> Result<Self, CliError> {
        Ok(Self {
            dataset: cfg.build_dataset(&FIG1_BLOCKS)?,
            alpha: cfg.alpha.unwrap_or(FIG1_ALPHA),
            grid: cfg.eps_grid.clone().unwrap_or_else(|| FIG1_GRID.to_vec()),
        })
    }

    /// Defaults: a single two-wide block, α at half its upper bound, and five
    /// admissible ε values.
    pub fn two_dim(cfg: &RunConfig) -> Result<Self, CliError> {
        let dataset = cfg.build_dataset(&[2])?;
        let bx = AdmissibleBox::of(&dataset);
        let alpha = cfg.alpha.unwrap_or(0.5 * bx.alpha_max);
        let grid = match &cfg.eps_grid {
            Some(g) => g.clone(),
            None => {
                let top = bx.epsilon_limit(alpha);
                AUTO_GRID_FRACTIONS.iter().map(|f| f * top).collect()
            }
        };
        Ok(Self { dataset, alpha, grid })
    }
}

#[derive(Serialize)]
struct CellDoc<'a> {
    index: usize,
    eps: f64,
    record: Option<&'a SweepRecord>,
    error: Option<String>,
}

#[derive(Serialize)]
struct SweepDoc<'a> {
    alpha: f64,
    dataset: DatasetFile,
    eps_grid: &'a [f64],
    line: Option<NdLine>,
    cells: Vec<CellDoc<'a>>,
}

/// Runs a sweep into `out`: `sweep.csv`, `sweep.json`, and per-ε
/// `trajectory_eps{k}.csv` / `stages_eps{k}.json` (k is the grid index).
pub fn run_sweep(cfg: &RunConfig, plan: &SweepPlan, out: &Path) -> Result<(), CliError> {
    check_grid(&plan.grid).map_err(config_err)?;
    let hp0 = HyperParams::new(plan.grid[0], plan.alpha).map_err(config_err)?;
    for &eps in &plan.grid {
        warn_inadmissible(&plan.dataset, &HyperParams::new(eps, plan.alpha).map_err(config_err)?);
    }
    let pool = cfg.thread_pool()?;
    let cells: Vec<signflow_core::Result<SweepCell>> = pool.install(|| {
        plan.grid.par_iter().map(|&eps| sweep_cell(&plan.dataset, plan.alpha, eps, &cfg.integrator)).collect()
    });

    for (k, cell) in cells.iter().enumerate() {
        if let Ok(c) = cell {
            write_file(out, &format!("trajectory_eps{k}.csv"), trajectory_csv(&c.trajectory).as_bytes())?;
            write_json(out, &format!("stages_eps{k}.json"), &StageSidecar::new(&c.trajectory, c.stages.as_ref()))?;
        }
    }
    let records: Vec<Option<&SweepRecord>> = cells.iter().map(|c| c.as_ref().ok().map(|c| &c.record)).collect();
    write_file(out, "sweep.csv", sweep_csv(&records, &plan.grid).as_bytes())?;
    let doc = SweepDoc {
        alpha: plan.alpha,
        dataset: DatasetFile::of(&plan.dataset),
        eps_grid: &plan.grid,
        line: corollary_nd_line(&plan.dataset, &hp0).ok(),
        cells: cells
            .iter()
            .enumerate()
            .map(|(index, c)| CellDoc {
                index,
                eps: plan.grid[index],
                record: c.as_ref().ok().map(|c| &c.record),
                error: c.as_ref().err().map(ToString::to_string),
            })
            .collect(),
    };
    write_json(out, "sweep.json", &doc)?;

    let failed: Vec<String> = cells
        .iter()
        .zip(&plan.grid)
        .filter_map(|(c, eps)| c.as_ref().err().map(|e| format!("eps={eps}: {e}")))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Integration(failed.join("; ")))
    }
}

/// `sweep` with the five-feature defaults.
pub fn sweep(cfg: &RunConfig) -> Result<(), CliError> {
    prepare_out(&cfg.out)?;
    let plan = SweepPlan::fig1(cfg)?;
    run_sweep(cfg, &plan, &cfg.out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum FigureKind {
    Fig1,
    Fig2,
    Fig3,
}

/// `figure`: derives figure-ready CSVs from sweep outputs in `from`, or from
/// a fresh sweep written into the output directory.
pub fn figure(which: FigureKind, from: Option<&Path>, cfg: &RunConfig) -> Result<(), CliError> {
    prepare_out(&cfg.out)?;
    let src: PathBuf = match from {
        Some(dir) => dir.to_path_buf(),
        None => {
            let plan = match which {
                FigureKind::Fig1 => SweepPlan::fig1(cfg)?,
                FigureKind::Fig2 | FigureKind::Fig3 => SweepPlan::two_dim(cfg)?,
            };
            run_sweep(cfg, &plan, &cfg.out)?;
            cfg.out.clone()
        }
    };
    let summary = Table::parse(&read_file(&src.join("sweep.csv"))?).map_err(config_err)?;
    for col in ["eps", "T0", "T", "E"] {
        if summary.column(col).is_none() {
            return Err(CliError::Config(format!("sweep.csv lacks column {col}")));
        }
    }
    match which {
        FigureKind::Fig1 => fig1(&src, &summary, &cfg.out),
        FigureKind::Fig2 => fig2(&src, &summary, &cfg.out),
        FigureKind::Fig3 => fig3(&summary, &cfg.out),
    }
}

fn opt_cell(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        fmt_f64(v)
    }
}

fn value(table: &Table, row: usize, col: &str) -> f64 {
    table.column(col).map_or(f64::NAN, |c| table.rows[row][c])
}

/// Trajectory of sweep row `k`, or `None` for a cell that failed.
fn sweep_trajectory(src: &Path, summary: &Table, k: usize) -> Result<Option<Table>, CliError> {
    let path = src.join(format!("trajectory_eps{k}.csv"));
    if !path.exists() && value(summary, k, "E").is_nan() {
        return Ok(None);
    }
    Table::parse(&read_file(&path)?).map(Some).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn prefixed(header: &[String], prefix: &str) -> Vec<usize> {
    (1..).map_while(|i| header.iter().position(|h| *h == format!("{prefix}_{i}"))).collect()
}

/// `fig1_eps{k}.csv` (`t, beta_*, dual_*`) per ε and `fig1_markers.csv`
/// (`eps, T0, T`).
fn fig1(src: &Path, summary: &Table, out: &Path) -> Result<(), CliError> {
    let mut markers = String::from("eps,T0,T\n");
    for k in 0..summary.rows.len() {
        let Some(traj) = sweep_trajectory(src, summary, k)? else { continue };
        let t = traj.column("t").ok_or_else(|| CliError::Config("trajectory lacks t".into()))?;
        let (beta, dual) = (prefixed(&traj.header, "beta"), prefixed(&traj.header, "dual"));
        let mut header = vec!["t".to_string()];
        header.extend(beta.iter().map(|&c| traj.header[c].clone()));
        header.extend(dual.iter().map(|&c| traj.header[c].clone()));
        let mut csv = header.join(",") + "\n";
        for row in &traj.rows {
            let cells: Vec<String> =
                std::iter::once(t).chain(beta.iter().copied()).chain(dual.iter().copied()).map(|c| fmt_f64(row[c])).collect();
            csv.push_str(&cells.join(","));
            csv.push('\n');
        }
        write_file(out, &format!("fig1_eps{k}.csv"), csv.as_bytes())?;
        markers.push_str(&format!(
            "{},{},{}\n",
            fmt_f64(value(summary, k, "eps")),
            opt_cell(value(summary, k, "T0")),
            opt_cell(value(summary, k, "T"))
        ));
    }
    write_file(out, "fig1_markers.csv", markers.as_bytes())
}

/// `fig2.csv`: `eps, t, beta_*`, one polyline per ε in grid order.
fn fig2(src: &Path, summary: &Table, out: &Path) -> Result<(), CliError> {
    let mut csv = String::new();
    let mut width = None;
    for k in 0..summary.rows.len() {
        let Some(traj) = sweep_trajectory(src, summary, k)? else { continue };
        let t = traj.column("t").ok_or_else(|| CliError::Config("trajectory lacks t".into()))?;
        let beta = prefixed(&traj.header, "beta");
        if *width.get_or_insert(beta.len()) != beta.len() {
            return Err(CliError::Config("trajectories disagree on dimension".into()));
        }
        if csv.is_empty() {
            let mut header = vec!["eps".to_string(), "t".to_string()];
            header.extend(beta.iter().map(|&c| traj.header[c].clone()));
            csv = header.join(",") + "\n";
        }
        let eps = fmt_f64(value(summary, k, "eps"));
        for row in &traj.rows {
            let cells: Vec<String> = std::iter::once(eps.clone())
                .chain(std::iter::once(t).chain(beta.iter().copied()).map(|c| fmt_f64(row[c])))
                .collect();
            csv.push_str(&cells.join(","));
            csv.push('\n');
        }
    }
    if csv.is_empty() {
        return Err(CliError::Config("no successful sweep cells to plot".into()));
    }
    write_file(out, "fig2.csv", csv.as_bytes())
}

/// `fig3.csv`: `eps, E` for every cell with a value.
fn fig3(summary: &Table, out: &Path) -> Result<(), CliError> {
    let mut csv = String::from("eps,E\n");
    for k in 0..summary.rows.len() {
        let e = value(summary, k, "E");
        if !e.is_nan() {
            csv.push_str(&format!("{},{}\n", fmt_f64(value(summary, k, "eps")), fmt_f64(e)));
        }
    }
    write_file(out, "fig3.csv", csv.as_bytes())
}
