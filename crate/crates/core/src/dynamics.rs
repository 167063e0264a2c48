//! Weight flows, trajectory integration and stage detection.
//!
//! The state vector is the stacked `[w⁺; w⁻]`. Integration uses the
//! Dormand–Prince pair from [`crate::ode`]; the trajectory keeps every dense
//! segment so that crossings and derivatives can be evaluated between samples.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::mirror::{mirror_map_gd, mirror_map_ssd, PotentialGd, PotentialSsd};
use crate::ode::{DenseSegment, Dopri5, OdeSystem, StepControl};
use crate::problem::{beta_of, gradient_w, residuals, Dataset, HyperParams, WeightState};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Algorithm {
    /// Smoothed sign descent, `ẇ = −∇L / (|∇L| + ε)`.
    Ssd,
    /// Gradient flow, `ẇ = −∇L`.
    Gd,
}

/// `−g / (|g| + ε)` elementwise, with `0/0 := 0` when `ε = 0`.
pub fn ssd_rhs(ds: &Dataset, eps: f64, w: &WeightState) -> Result<Vec<f64>> {
    let mut g = gradient_w(ds, w)?;
    for gi in g.iter_mut() {
        let den = gi.abs() + eps;
        *gi = if den == 0.0 { 0.0 } else { -*gi / den };
    }
    Ok(g)
}

/// `(−w⁺ ⊙ Xᵀ(Xβ − y), w⁻ ⊙ Xᵀ(Xβ − y))`.
pub fn gd_rhs(ds: &Dataset, w: &WeightState) -> Result<Vec<f64>> {
    let mut g = gradient_w(ds, w)?;
    for gi in g.iter_mut() {
        *gi = -*gi;
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct IntegratorOptions {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub t_max: f64,
    /// Time resolution of crossing bisection.
    pub event_tol: f64,
    /// Integration stops once every `|r⁽ⁿ⁾|` is at most this.
    pub residual_tol: f64,
    /// Number of uniformly spaced samples added to the adaptive mesh.
    pub sample_grid: usize,
}

impl Default for IntegratorOptions {
    fn default() -> Self {
        Self { rel_tol: 1e-9, abs_tol: 1e-12, t_max: 1e4, event_tol: 1e-10, residual_tol: 1e-8, sample_grid: 200 }
    }
}

impl IntegratorOptions {
    pub fn validate(&self) -> Result<()> {
        let pos = |x: f64| x > 0.0 && x.is_finite();
        if !pos(self.rel_tol) || !pos(self.abs_tol) {
            return Err(Error::InvalidOptions("rel_tol and abs_tol must be positive"));
        }
        if !pos(self.t_max) {
            return Err(Error::InvalidOptions("t_max must be positive"));
        }
        if !pos(self.event_tol) || !pos(self.residual_tol) {
            return Err(Error::InvalidOptions("event_tol and residual_tol must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum StopReason {
    ToleranceMet,
    TMax,
}

/// One recorded time point with its derived series.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub w_plus: Vec<f64>,
    pub w_minus: Vec<f64>,
    pub beta: Vec<f64>,
    pub residuals: Vec<f64>,
    /// `u_i |x_i r⁽ⁿ⁾|`.
    pub f: Vec<f64>,
    /// `v_i |x_i r⁽ⁿ⁾|`.
    pub h: Vec<f64>,
    /// Mirror image of `β`: `∇Φ_t(β)` for SSD, `∇Ψ_α(β)` for GD.
    pub dual: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct IntegratorStats {
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    /// Largest normalized local error estimate over accepted steps.
    pub max_error_estimate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub algorithm: Algorithm,
    pub hyper: HyperParams,
    pub sigma: Vec<f64>,
    pub samples: Vec<Sample>,
    pub segments: Vec<DenseSegment>,
    /// Time at which each block was frozen, if it was.
    pub freeze_times: Vec<Option<f64>>,
    pub stats: IntegratorStats,
    pub stop_reason: StopReason,
}

impl Trajectory {
    pub fn final_time(&self) -> f64 {
        self.samples.last().map_or(0.0, |s| s.t)
    }

    pub fn last(&self) -> &Sample {
        self.samples.last().expect("trajectory has at least one sample")
    }

    pub fn state(&self, k: usize) -> WeightState {
        let s = &self.samples[k];
        WeightState { w_plus: s.w_plus.clone(), w_minus: s.w_minus.clone(), sigma: self.sigma.clone() }
    }

    pub fn final_state(&self) -> WeightState {
        self.state(self.samples.len() - 1)
    }

    /// Index of the dense segment covering `t` (the later one at a shared
    /// endpoint).
    pub fn segment_index(&self, t: f64) -> Option<usize> {
        if self.segments.is_empty() || t < self.segments[0].t0 || t > self.segments.last()?.t1() {
            return None;
        }
        let k = self.segments.partition_point(|s| s.t0 <= t);
        Some(k.saturating_sub(1))
    }

    /// Stacked `[w⁺; w⁻]` at `t` from the dense output.
    pub fn dense_state(&self, t: f64) -> Option<Vec<f64>> {
        let k = self.segment_index(t)?;
        Some(self.segments[k].eval(t))
    }

    /// Whether block `n` is frozen at time `t`.
    pub fn is_frozen(&self, n: usize, t: f64) -> bool {
        self.freeze_times[n].is_some_and(|tf| t >= tf)
    }
}

struct Flow<'a> {
    ds: &'a Dataset,
    algorithm: Algorithm,
    eps: f64,
    frozen: Vec<bool>,
}

impl OdeSystem for Flow<'_> {
    fn dim(&self) -> usize {
        2 * self.ds.n_features()
    }

    fn rhs(&self, y: &[f64], dy: &mut [f64]) {
        let d = self.ds.n_features();
        let (wp, wm) = y.split_at(d);
        let beta = beta_of(wp, wm);
        let r = residuals(self.ds, &beta).expect("state has dataset dimension");
        for i in 0..d {
            let n = self.ds.block_of(i);
            if self.frozen[n] {
                dy[i] = 0.0;
                dy[d + i] = 0.0;
                continue;
            }
            let xr = self.ds.x(i) * r[n];
            let gp = -wp[i] * xr;
            let gm = wm[i] * xr;
            match self.algorithm {
                Algorithm::Gd => {
                    dy[i] = -gp;
                    dy[d + i] = -gm;
                }
                Algorithm::Ssd => {
                    dy[i] = smoothed_sign(gp, self.eps);
                    dy[d + i] = smoothed_sign(gm, self.eps);
                }
            }
        }
    }
}

fn smoothed_sign(g: f64, eps: f64) -> f64 {
    let den = g.abs() + eps;
    if den == 0.0 {
        0.0
    } else {
        -g / den
    }
}

impl Sample {
    /// Derived series at the stacked state `y = [w⁺; w⁻]`.
    pub fn from_state(ds: &Dataset, algorithm: Algorithm, hp: &HyperParams, t: f64, y: &[f64]) -> Sample {
        sample_at(ds, algorithm, hp, ds.sigma(), t, y)
    }
}

fn sample_at(ds: &Dataset, algorithm: Algorithm, hp: &HyperParams, sigma: &[f64], t: f64, y: &[f64]) -> Sample {
    let d = ds.n_features();
    let (wp, wm) = y.split_at(d);
    let beta = beta_of(wp, wm);
    let r = residuals(ds, &beta).expect("state has dataset dimension");
    let mut f = vec![0.0; d];
    let mut h = vec![0.0; d];
    let mut v = vec![0.0; d];
    for i in 0..d {
        let xr = (ds.x(i) * r[ds.block_of(i)]).abs();
        let (u_i, v_i) = if sigma[i] > 0.0 { (wp[i], wm[i]) } else { (wm[i], wp[i]) };
        f[i] = u_i * xr;
        h[i] = v_i * xr;
        v[i] = v_i;
    }
    let dual = match algorithm {
        Algorithm::Ssd => {
            let p = PotentialSsd { v_param: v, sigma: None };
            mirror_map_ssd(&p, &beta, sigma).expect("dimensions match").value
        }
        Algorithm::Gd => mirror_map_gd(&PotentialGd { alpha: hp.alpha }, &beta).value,
    };
    Sample { t, w_plus: wp.to_vec(), w_minus: wm.to_vec(), beta, residuals: r, f, h, dual }
}

/// Cap on `h·λ` passed to the stepper. The stability limit of the pair is
/// about 3.3; near convergence the residual decays on a time scale `O(ε)` and
/// steps sit at that limit, where the dense output is too coarse for
/// derivative checks.
const MAX_H_LAMBDA: f64 = 0.25;

/// Integrates the chosen flow from `w⁺ = w⁻ = α𝟏`.
///
/// After every accepted step, any block whose residual dropped below
/// `residual_tol / 10` is frozen for the rest of the run. For `ε = 0` weights
/// that overshoot below zero are clamped back to zero.
pub fn integrate(ds: &Dataset, algorithm: Algorithm, hp: &HyperParams, opts: &IntegratorOptions) -> Result<Trajectory> {
    opts.validate()?;
    let d = ds.n_features();
    let n_blocks = ds.n_examples();
    let sigma = ds.sigma().to_vec();
    let mut flow = Flow { ds, algorithm, eps: hp.epsilon, frozen: vec![false; n_blocks] };
    let y0 = WeightState::initial(ds, hp.alpha).stacked();
    let ctrl = StepControl { rel_tol: opts.rel_tol, abs_tol: opts.abs_tol, h_max: opts.t_max / 16.0, max_h_lambda: MAX_H_LAMBDA };
    let mut stepper = Dopri5::new(&flow, 0.0, y0.clone(), ctrl);
    let mut mesh = vec![(0.0, y0.clone())];
    let mut segments = Vec::new();
    let mut freeze_times = vec![None; n_blocks];
    let mut stats = IntegratorStats::default();
    let clamp = algorithm == Algorithm::Ssd && hp.epsilon == 0.0;

    let max_abs_r = |y: &[f64]| {
        let beta = beta_of(&y[..d], &y[d..]);
        residuals(ds, &beta).expect("state has dataset dimension")
    };
    let mut r = max_abs_r(&y0);
    let mut stop_reason = StopReason::TMax;
    while r.iter().any(|x| x.abs() > opts.residual_tol) {
        if stepper.t() >= opts.t_max {
            break;
        }
        let step = stepper.step(&flow, opts.t_max)?;
        stats.accepted_steps += 1;
        stats.rejected_steps += step.rejected;
        stats.max_error_estimate = stats.max_error_estimate.max(step.error_norm);
        segments.push(step.segment);
        let t = stepper.t();
        if stepper.y().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { t });
        }
        let mut refresh = false;
        if clamp && stepper.y().iter().any(|v| *v < 0.0) {
            let y: Vec<f64> = stepper.y().iter().map(|v| v.max(0.0)).collect();
            stepper.set_state(&flow, &y);
        }
        r = max_abs_r(stepper.y());
        for n in 0..n_blocks {
            if !flow.frozen[n] && r[n].abs() < opts.residual_tol / 10.0 {
                flow.frozen[n] = true;
                freeze_times[n] = Some(t);
                refresh = true;
            }
        }
        if refresh {
            stepper.refresh_derivative(&flow);
        }
        mesh.push((t, stepper.y().to_vec()));
    }
    if r.iter().all(|x| x.abs() <= opts.residual_tol) {
        stop_reason = StopReason::ToleranceMet;
    }

    let t_end = mesh.last().map_or(0.0, |m| m.0);
    let traj_stub = Trajectory {
        algorithm,
        hyper: *hp,
        sigma: sigma.clone(),
        samples: Vec::new(),
        segments,
        freeze_times,
        stats,
        stop_reason,
    };
    let mut points: Vec<(f64, Vec<f64>)> = mesh;
    if opts.sample_grid > 1 && t_end > 0.0 {
        for j in 1..opts.sample_grid {
            let t = t_end * j as f64 / (opts.sample_grid - 1) as f64;
            if t >= t_end {
                continue;
            }
            if let Some(y) = traj_stub.dense_state(t) {
                points.push((t, y));
            }
        }
    }
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    points.dedup_by(|b, a| b.0 == a.0);
    let samples = points.iter().map(|(t, y)| sample_at(ds, algorithm, hp, &sigma, *t, y)).collect();
    Ok(Trajectory { samples, ..traj_stub })
}

/// Stage transition times of an SSD run.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StageReport {
    /// `t_i`: first time `h_i` reaches `ε` (0 if it starts at or below).
    pub t_warmup: Vec<Option<f64>>,
    /// `T₀ = max_i t_i`, absent if some `t_i` was not found.
    pub t0: Option<f64>,
    /// `T_i`: first time `f_i` reaches `ε`.
    pub t_signdescent: Vec<Option<f64>>,
    /// `T = min_i T_i` over the crossings that were found.
    pub t: Option<f64>,
    /// `T⁽ⁿ⁾ = min` of `T_i` over the block's coordinates.
    pub t_block: Vec<Option<f64>>,
    pub converged_at: f64,
    pub stop_reason: StopReason,
}

/// `(f_i, h_i)` at a stacked state.
fn gradient_magnitudes(ds: &Dataset, sigma: &[f64], y: &[f64], i: usize) -> (f64, f64) {
    let d = ds.n_features();
    let n = ds.block_of(i);
    let b = ds.block(n);
    let pred: f64 = b.column_ids.iter().zip(&b.xs).map(|(&c, x)| x * (y[c] * y[c] - y[d + c] * y[d + c])).sum();
    let xr = (ds.x(i) * (b.y - pred)).abs();
    let (u, v) = if sigma[i] > 0.0 { (y[i], y[d + i]) } else { (y[d + i], y[i]) };
    (u * xr, v * xr)
}

/// First time at which `g` drops to `level`, searched on the dense output.
fn first_downcrossing<G: Fn(f64) -> f64>(traj: &Trajectory, g: G, level: f64, tol: f64) -> Option<f64> {
    if g(0.0) <= level {
        return Some(0.0);
    }
    const SUB: usize = 4;
    for seg in &traj.segments {
        let mut a = seg.t0;
        for j in 1..=SUB {
            let b = if j == SUB { seg.t1() } else { seg.t0 + seg.h * j as f64 / SUB as f64 };
            if g(b) <= level {
                let (mut lo, mut hi) = (a, b);
                while hi - lo > tol {
                    let mid = 0.5 * (lo + hi);
                    if g(mid) <= level {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                    if mid == lo && mid == hi {
                        break;
                    }
                }
                return Some(hi);
            }
            a = b;
        }
    }
    None
}

/// Locates the warm-up and sign-descent crossings of an SSD trajectory.
pub fn detect_stages(traj: &Trajectory, ds: &Dataset, eps: f64, event_tol: f64) -> Result<StageReport> {
    if eps == 0.0 {
        return Err(Error::EpsilonZero);
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidHyperParams("epsilon must be positive"));
    }
    let d = ds.n_features();
    let sigma = &traj.sigma;
    let eval = |t: f64| -> Vec<f64> {
        traj.dense_state(t).unwrap_or_else(|| {
            let s = &traj.samples[0];
            let mut y = s.w_plus.clone();
            y.extend_from_slice(&s.w_minus);
            y
        })
    };
    let mut t_warmup = Vec::with_capacity(d);
    let mut t_sd = Vec::with_capacity(d);
    for i in 0..d {
        let h = |t: f64| gradient_magnitudes(ds, sigma, &eval(t), i).1;
        let f = |t: f64| gradient_magnitudes(ds, sigma, &eval(t), i).0;
        t_warmup.push(first_downcrossing(traj, h, eps, event_tol));
        t_sd.push(first_downcrossing(traj, f, eps, event_tol));
    }
    let t0 = t_warmup.iter().try_fold(0.0_f64, |m, t| t.map(|t| m.max(t)));
    let t = t_sd.iter().flatten().copied().reduce(f64::min);
    let t_block = ds
        .blocks()
        .iter()
        .map(|b| b.column_ids.iter().filter_map(|&c| t_sd[c]).reduce(f64::min))
        .collect();
    Ok(StageReport {
        t_warmup,
        t0,
        t_signdescent: t_sd,
        t,
        t_block,
        converged_at: traj.final_time(),
        stop_reason: traj.stop_reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{build_dataset, RawBlock};
    use approx::assert_relative_eq;

    fn unit_block() -> Dataset {
        build_dataset(&[RawBlock { xs: vec![0.8, 0.6], y: 1.0 }]).unwrap()
    }

    #[test]
    fn ssd_rhs_examples() {
        let ds = unit_block();
        let w = WeightState::initial(&ds, 0.1);
        let rate = ssd_rhs(&ds, 0.01, &w).unwrap();
        assert_relative_eq!(rate[0], 0.08 / 0.09, epsilon = 1e-15);
        assert_relative_eq!(rate[1], 0.06 / 0.07, epsilon = 1e-15);
        assert_relative_eq!(rate[2], -0.08 / 0.09, epsilon = 1e-15);
        let done = WeightState { w_plus: vec![1.0, 0.0], w_minus: vec![0.0, 0.0], sigma: vec![1.0, 1.0] };
        // Xβ = 0.8 ≠ 1, but w⁻ = 0 and w⁺₂ = 0 give zero gradient components
        let rate = ssd_rhs(&ds, 0.0, &done).unwrap();
        assert_eq!(&rate[1..], &[0.0, 0.0, 0.0]);
        assert_eq!(rate[0], 1.0);
        // |g| = ε gives a rate of one half
        let one = build_dataset(&[RawBlock { xs: vec![1.0], y: 1.0 }]).unwrap();
        let w = WeightState::initial(&one, 0.2);
        assert_relative_eq!(ssd_rhs(&one, 0.2, &w).unwrap()[0], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn gd_rhs_examples() {
        let ds = unit_block();
        let w = WeightState::initial(&ds, 0.1);
        let rate = gd_rhs(&ds, &w).unwrap();
        let want = [0.08, 0.06, -0.08, -0.06];
        for (a, b) in rate.iter().zip(want) {
            assert_relative_eq!(*a, b, epsilon = 1e-15);
        }
        let zero = WeightState { w_plus: vec![0.0; 2], w_minus: vec![0.0; 2], sigma: vec![1.0; 2] };
        assert!(gd_rhs(&ds, &zero).unwrap().iter().all(|v| *v == 0.0));
        let exact = WeightState { w_plus: vec![libm::sqrt(1.25), 0.0], w_minus: vec![0.0, 0.0], sigma: vec![1.0; 2] };
        assert!(gd_rhs(&ds, &exact).unwrap().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn options_are_validated() {
        let mut o = IntegratorOptions::default();
        assert!(o.validate().is_ok());
        o.rel_tol = 0.0;
        assert!(o.validate().is_err());
        let o = IntegratorOptions { t_max: -1.0, ..Default::default() };
        assert!(o.validate().is_err());
    }

    #[test]
    fn ssd_run_interpolates() {
        let ds = unit_block();
        let hp = HyperParams::new(0.01, 0.1).unwrap();
        let traj = integrate(&ds, Algorithm::Ssd, &hp, &IntegratorOptions::default()).unwrap();
        assert_eq!(traj.stop_reason, StopReason::ToleranceMet);
        let last = traj.last();
        assert!(last.residuals[0].abs() <= 1e-8);
        let xb = 0.8 * last.beta[0] + 0.6 * last.beta[1];
        assert!((xb - 1.0).abs() <= 1e-8);
        assert_eq!(traj.samples[0].t, 0.0);
        assert!(traj.samples.windows(2).all(|w| w[0].t < w[1].t));
        assert_eq!(traj.samples[0].w_plus, vec![0.1, 0.1]);
    }

    #[test]
    fn gd_conserves_product() {
        let ds = build_dataset(&[
            RawBlock { xs: vec![0.9, -0.4], y: 1.3 },
            RawBlock { xs: vec![-0.7, 0.5], y: -0.8 },
        ])
        .unwrap();
        let hp = HyperParams::new(0.0, 0.1).unwrap();
        let traj = integrate(&ds, Algorithm::Gd, &hp, &IntegratorOptions::default()).unwrap();
        assert_eq!(traj.stop_reason, StopReason::ToleranceMet);
        for s in &traj.samples {
            for (p, m) in s.w_plus.iter().zip(&s.w_minus) {
                assert!((p * m - 0.01).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn stages_on_unit_block() {
        let ds = unit_block();
        let hp = HyperParams::new(0.01, 0.1).unwrap();
        let opts = IntegratorOptions::default();
        let traj = integrate(&ds, Algorithm::Ssd, &hp, &opts).unwrap();
        for s in &traj.samples[1..] {
            for (p, m) in s.w_plus.iter().zip(&s.w_minus) {
                assert!(p * m <= 0.01 + 1e-12);
            }
        }
        let st = detect_stages(&traj, &ds, 0.01, opts.event_tol).unwrap();
        let t0 = st.t0.unwrap();
        let t = st.t.unwrap();
        assert!(t0 > 0.0 && t0 <= 0.2 + 1e-6);
        assert!(t > t0);
        assert_eq!(st.t_block, vec![Some(t)]);
        // h crosses at the located time
        let y = traj.dense_state(st.t_warmup[0].unwrap()).unwrap();
        assert_relative_eq!(gradient_magnitudes(&ds, &traj.sigma, &y, 0).1, 0.01, epsilon = 1e-8);
        assert_eq!(detect_stages(&traj, &ds, 0.0, 1e-10), Err(Error::EpsilonZero));
    }

    #[test]
    fn degenerate_start_reports_zero() {
        let ds = unit_block();
        // h_i(0) = 0.1·|x_i| < 0.2
        let hp = HyperParams::new(0.2, 0.1).unwrap();
        let traj = integrate(&ds, Algorithm::Ssd, &hp, &IntegratorOptions::default()).unwrap();
        let st = detect_stages(&traj, &ds, 0.2, 1e-10).unwrap();
        assert_eq!(st.t_warmup, vec![Some(0.0), Some(0.0)]);
        assert_eq!(st.t0, Some(0.0));
    }

    #[test]
    fn sign_descent_without_smoothing_runs() {
        let ds = unit_block();
        let hp = HyperParams::new(0.0, 0.1).unwrap();
        let traj = integrate(&ds, Algorithm::Ssd, &hp, &IntegratorOptions::default()).unwrap();
        assert_eq!(traj.stop_reason, StopReason::ToleranceMet);
        assert!(traj.samples.iter().all(|s| s.w_plus.iter().chain(&s.w_minus).all(|w| *w >= -1e-10)));
    }
}
