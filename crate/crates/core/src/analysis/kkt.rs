//! KKT residual of the limit point.
//!
//! Stationarity of `min E(β, β₀) s.t. Xβ = y` asks for `∇_β E ∈ row(X)`. Since
//! rows have disjoint supports, the least-squares multiplier problem splits
//! into one projection per block.

use alloc::vec::Vec;

use super::bounds::{bounds, BoundInputs};
use crate::dynamics::{Algorithm, StopReason, Trajectory};
use crate::error::{Error, Result};
use crate::mirror::{e_function, mirror_map_gd, PotentialGd};
use crate::problem::{residuals, Block, Dataset, HyperParams};

/// Result of projecting a gradient onto the row space of `X`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KktProjection {
    /// `‖grad − Xᵀν‖` at the optimal `ν`.
    pub delta_bar: f64,
    /// Per-block residual norms.
    pub delta_n: Vec<f64>,
    /// Optimal multipliers.
    pub nu: Vec<f64>,
    /// `Σₙ δₙ`, which dominates `delta_bar`.
    pub sum_delta: f64,
}

/// `min_ν ‖grad − Σₙ νₙ x⁽ⁿ⁾‖` by per-block projection.
pub fn kkt_error(ds: &Dataset, grad: &[f64]) -> Result<KktProjection> {
    if grad.len() != ds.n_features() {
        return Err(Error::DimensionMismatch { expected: ds.n_features(), found: grad.len() });
    }
    let mut delta_n = Vec::with_capacity(ds.n_examples());
    let mut nu = Vec::with_capacity(ds.n_examples());
    for b in ds.blocks() {
        let g: Vec<f64> = b.column_ids.iter().map(|&c| grad[c]).collect();
        let xx: f64 = b.xs.iter().map(|x| x * x).sum();
        let nu_n = g.iter().zip(&b.xs).map(|(g, x)| g * x).sum::<f64>() / xx;
        let d = if b.len() == 2 {
            // component along (−sin θ, cos θ)
            let (c, s) = b.rotation().expect("two-wide block");
            (c * g[1] - s * g[0]).abs()
        } else {
            libm::sqrt(g.iter().zip(&b.xs).map(|(g, x)| (g - nu_n * x) * (g - nu_n * x)).sum())
        };
        delta_n.push(d);
        nu.push(nu_n);
    }
    let delta_bar = libm::sqrt(delta_n.iter().map(|d| d * d).sum());
    let sum_delta = delta_n.iter().sum();
    Ok(KktProjection { delta_bar, delta_n, nu, sum_delta })
}

/// `Δ = |cos θ|(u₂^∞ − u₂(0)) − |sin θ|(u₁^∞ − u₁(0))`.
pub fn delta_block(b: &Block, u_inf: [f64; 2], u0: [f64; 2]) -> Result<f64> {
    let (c, s) = b.rotation().ok_or(Error::BlockSizeNot2 { block: b.index, size: b.len() })?;
    Ok(c.abs() * (u_inf[1] - u0[1]) - s.abs() * (u_inf[0] - u0[0]))
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BlockKkt {
    pub delta: f64,
    /// Signed `Δ` (two-wide blocks only).
    pub delta_signed: Option<f64>,
    pub m_minus: Option<f64>,
    pub m_plus: Option<f64>,
    /// `max(|M₊|, |M₋|)`.
    pub bound: Option<f64>,
    /// `M₋ − tol ≤ Δ ≤ M₊ + tol`.
    pub within_bounds: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KktReport {
    pub algorithm: Algorithm,
    pub beta_inf: Vec<f64>,
    /// `‖Xβ^∞ − y‖∞`.
    pub interpolation_gap: f64,
    /// Gradient whose distance to the row space is measured: `σ⊙(u^∞ − α)`
    /// for SSD, `∇Ψ_α(β^∞)` for GD.
    pub grad_e: Vec<f64>,
    pub delta_bar: f64,
    pub sum_delta: f64,
    pub nu: Vec<f64>,
    pub per_block: Vec<BlockKkt>,
    pub sum_bound: Option<f64>,
    /// Additive slack `1e-8 + interpolation_gap·max|x|` used in comparisons.
    pub tolerance: f64,
    pub bounds_ok: Option<bool>,
    pub sum_bound_ok: Option<bool>,
    /// `E(β^∞, 0)` with `v₀ = α𝟏` (SSD only).
    pub e_value: Option<f64>,
}

/// Base additive slack of bound comparisons.
pub const BOUND_SLACK: f64 = 1e-8;

/// Measures the KKT residual of a converged run and compares it with the
/// closed-form bounds when they apply.
pub fn characterize(ds: &Dataset, hp: &HyperParams, traj: &Trajectory) -> Result<KktReport> {
    if traj.stop_reason != StopReason::ToleranceMet {
        return Err(Error::NotConverged);
    }
    let last = traj.final_state();
    let beta_inf = last.beta();
    let gap = residuals(ds, &beta_inf)?.iter().fold(0.0_f64, |m, r| m.max(r.abs()));
    let tolerance = BOUND_SLACK + gap * ds.max_abs_x();
    let d = ds.n_features();
    let u_inf = last.u_vec();
    let grad_e: Vec<f64> = match traj.algorithm {
        Algorithm::Ssd => (0..d).map(|i| last.sigma[i] * (u_inf[i] - hp.alpha)).collect(),
        Algorithm::Gd => mirror_map_gd(&PotentialGd::new(hp.alpha)?, &beta_inf).value,
    };
    let proj = kkt_error(ds, &grad_e)?;
    let with_bounds = traj.algorithm == Algorithm::Ssd && hp.epsilon > 0.0;
    let mut per_block = Vec::with_capacity(ds.n_examples());
    let mut sum_bound = Some(0.0);
    for (b, &delta) in ds.blocks().iter().zip(&proj.delta_n) {
        let mut row = BlockKkt { delta, delta_signed: None, m_minus: None, m_plus: None, bound: None, within_bounds: None };
        if traj.algorithm == Algorithm::Ssd && b.len() == 2 {
            let (i, j) = (b.column_ids[0], b.column_ids[1]);
            row.delta_signed = Some(delta_block(b, [u_inf[i], u_inf[j]], [hp.alpha; 2])?);
        }
        let bi = if with_bounds { BoundInputs::from_block(b, hp).ok() } else { None };
        match (bi, row.delta_signed) {
            (Some(bi), Some(dl)) => {
                let (lo, hi) = bounds(&bi)?;
                row.m_minus = Some(lo);
                row.m_plus = Some(hi);
                row.bound = Some(lo.abs().max(hi.abs()));
                row.within_bounds = Some(lo - tolerance <= dl && dl <= hi + tolerance);
                sum_bound = sum_bound.map(|s| s + lo.abs().max(hi.abs()));
            }
            _ => sum_bound = None,
        }
        per_block.push(row);
    }
    let bounds_ok = per_block.iter().map(|r| r.within_bounds).collect::<Option<Vec<_>>>().map(|v| v.iter().all(|b| *b));
    let sum_bound_ok = sum_bound.map(|s| proj.delta_bar <= s + tolerance);
    let e_value = match traj.algorithm {
        Algorithm::Ssd => {
            let zero = alloc::vec![0.0; d];
            let v0 = alloc::vec![hp.alpha; d];
            Some(e_function(&beta_inf, &zero, &last.v_vec(), &v0, &last.sigma)?)
        }
        Algorithm::Gd => None,
    };
    Ok(KktReport {
        algorithm: traj.algorithm,
        beta_inf,
        interpolation_gap: gap,
        grad_e,
        delta_bar: proj.delta_bar,
        sum_delta: proj.sum_delta,
        nu: proj.nu,
        per_block,
        sum_bound,
        tolerance,
        bounds_ok,
        sum_bound_ok,
        e_value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{build_dataset, random_dataset, RawBlock, ValueRanges};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// Dense least squares `min_ν ‖g − Xᵀν‖` through the normal equations,
    /// solved by Gaussian elimination with partial pivoting.
    fn dense_residual(ds: &Dataset, g: &[f64]) -> f64 {
        let x = ds.design_matrix();
        let n = x.len();
        let mut a: Vec<Vec<f64>> = (0..n)
            .map(|p| {
                let mut row: Vec<f64> = (0..n).map(|q| x[p].iter().zip(&x[q]).map(|(a, b)| a * b).sum()).collect();
                row.push(x[p].iter().zip(g).map(|(a, b)| a * b).sum());
                row
            })
            .collect();
        for col in 0..n {
            let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
            a.swap(col, piv);
            for r in 0..n {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for k in col..=n {
                        a[r][k] -= f * a[col][k];
                    }
                }
            }
        }
        let nu: Vec<f64> = (0..n).map(|i| a[i][n] / a[i][i]).collect();
        let res: f64 = (0..g.len())
            .map(|j| {
                let fit: f64 = (0..n).map(|p| nu[p] * x[p][j]).sum();
                (g[j] - fit) * (g[j] - fit)
            })
            .sum();
        libm::sqrt(res)
    }

    #[test]
    fn in_span_and_orthogonal() {
        let ds = build_dataset(&[RawBlock { xs: vec![0.8, 0.6], y: 1.0 }]).unwrap();
        let p = kkt_error(&ds, &[1.6, 1.2]).unwrap();
        assert!(p.delta_bar <= 1e-15);
        assert_relative_eq!(p.nu[0], 2.0, epsilon = 1e-15);
        let p = kkt_error(&ds, &[-0.18, 0.24]).unwrap();
        assert_relative_eq!(p.delta_bar, 0.3, epsilon = 1e-15);
        assert!(kkt_error(&ds, &[1.0]).is_err());
    }

    #[test]
    fn delta_block_cases() {
        let ds = build_dataset(&[RawBlock { xs: vec![0.8, 0.6], y: 1.0 }]).unwrap();
        let b = ds.block(0);
        assert_eq!(delta_block(b, [0.1, 0.1], [0.1, 0.1]).unwrap(), 0.0);
        let sym = build_dataset(&[RawBlock { xs: vec![0.5, -0.5], y: 1.0 }]).unwrap();
        assert_eq!(delta_block(sym.block(0), [0.4, 0.4], [0.1, 0.1]).unwrap(), 0.0);
        let wide = build_dataset(&[RawBlock { xs: vec![0.5, 0.2, 0.1], y: 1.0 }]).unwrap();
        assert!(matches!(delta_block(wide.block(0), [0.0; 2], [0.0; 2]), Err(Error::BlockSizeNot2 { .. })));
    }

    proptest! {
        #[test]
        fn projection_matches_dense_solve(seed in 0u64..1000, g in prop::collection::vec(-2.0..2.0f64, 7)) {
            let ds = random_dataset(seed, &[2, 3, 2], &ValueRanges::default()).unwrap();
            let p = kkt_error(&ds, &g).unwrap();
            prop_assert!((p.delta_bar - dense_residual(&ds, &g)).abs() <= 1e-10);
            let sq: f64 = p.delta_n.iter().map(|d| d * d).sum();
            prop_assert!((p.delta_bar * p.delta_bar - sq).abs() <= 1e-10);
        }

        #[test]
        fn delta_magnitude_is_projection(seed in 0u64..1000, u in prop::collection::vec(0.0..2.0f64, 4), alpha in 0.01..0.2f64) {
            let ds = random_dataset(seed, &[2, 2], &ValueRanges::default()).unwrap();
            let sigma = ds.sigma();
            let grad: Vec<f64> = (0..4).map(|i| sigma[i] * (u[i] - alpha)).collect();
            let p = kkt_error(&ds, &grad).unwrap();
            for (n, b) in ds.blocks().iter().enumerate() {
                let (i, j) = (b.column_ids[0], b.column_ids[1]);
                let dl = delta_block(b, [u[i], u[j]], [alpha; 2]).unwrap();
                prop_assert!((dl.abs() - p.delta_n[n]).abs() <= 1e-12);
            }
        }
    }
}
