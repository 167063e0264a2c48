//! One full simulate-and-characterize run per ε.

use alloc::vec::Vec;

use super::bounds::{corollary_nd_line, NdLine};
use super::kkt::{characterize, KktReport};
use crate::dynamics::{detect_stages, integrate, Algorithm, IntegratorOptions, StageReport, StopReason, Trajectory};
use crate::error::{Error, Result};
use crate::problem::{validate_assumptions, Dataset, HyperParams};

/// Summary of one sweep cell.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SweepRecord {
    pub eps: f64,
    /// Whether `(ε, α)` satisfies the assumption box.
    pub admissible: bool,
    pub t0: Option<f64>,
    pub t: Option<f64>,
    pub beta_inf: Vec<f64>,
    pub e_value: Option<f64>,
    pub delta_bar: f64,
    pub sum_delta: f64,
    pub delta_blocks: Vec<Option<f64>>,
    pub m_minus: Vec<Option<f64>>,
    pub m_plus: Vec<Option<f64>>,
    pub sum_bound: Option<f64>,
    /// Value of the summed corollary line at this ε.
    pub line_bound: Option<f64>,
    /// Whether ε lies in the interval on which the line applies.
    pub in_line_interval: bool,
    pub interpolation_gap: f64,
    pub stop_reason: StopReason,
}

/// A sweep cell with everything needed to write per-ε files.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub record: SweepRecord,
    pub trajectory: Trajectory,
    pub stages: Option<StageReport>,
    pub report: KktReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub eps_grid: Vec<f64>,
    pub line: Option<NdLine>,
    pub cells: Vec<Result<SweepRecord>>,
}

/// Rejects empty, non-finite, negative or non-increasing grids.
pub fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() || grid.iter().any(|e| !(*e >= 0.0) || !e.is_finite()) {
        return Err(Error::InvalidGrid);
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidGrid);
    }
    Ok(())
}

/// Runs and characterizes the SSD flow at one ε.
pub fn sweep_cell(ds: &Dataset, alpha: f64, eps: f64, opts: &IntegratorOptions) -> Result<SweepCell> {
    let hp = HyperParams::new(eps, alpha)?;
    let trajectory = integrate(ds, Algorithm::Ssd, &hp, opts)?;
    let stages = if eps > 0.0 { Some(detect_stages(&trajectory, ds, eps, opts.event_tol)?) } else { None };
    let report = characterize(ds, &hp, &trajectory)?;
    let line = corollary_nd_line(ds, &hp).ok();
    let record = SweepRecord {
        eps,
        admissible: validate_assumptions(ds, &hp).all_ok(),
        t0: stages.as_ref().and_then(|s| s.t0),
        t: stages.as_ref().and_then(|s| s.t),
        beta_inf: report.beta_inf.clone(),
        e_value: report.e_value,
        delta_bar: report.delta_bar,
        sum_delta: report.sum_delta,
        delta_blocks: report.per_block.iter().map(|b| b.delta_signed).collect(),
        m_minus: report.per_block.iter().map(|b| b.m_minus).collect(),
        m_plus: report.per_block.iter().map(|b| b.m_plus).collect(),
        sum_bound: report.sum_bound,
        line_bound: line.map(|l| l.at(eps)),
        in_line_interval: line.is_some_and(|l| eps <= l.eps_limit),
        interpolation_gap: report.interpolation_gap,
        stop_reason: trajectory.stop_reason,
    };
    Ok(SweepCell { record, trajectory, stages, report })
}

/// Sequential sweep; a failing cell is recorded and the sweep continues.
pub fn epsilon_sweep(ds: &Dataset, alpha: f64, eps_grid: &[f64], opts: &IntegratorOptions) -> Result<SweepResult> {
    check_grid(eps_grid)?;
    let line = corollary_nd_line(ds, &HyperParams::new(eps_grid[0], alpha)?).ok();
    let cells = eps_grid.iter().map(|&e| sweep_cell(ds, alpha, e, opts).map(|c| c.record)).collect();
    Ok(SweepResult { eps_grid: eps_grid.to_vec(), line, cells })
}
