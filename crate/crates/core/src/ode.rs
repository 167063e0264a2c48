//! Dormand–Prince 5(4) stepper with continuous (dense) output.
//!
//! Coefficients and the dense-output polynomial follow Hairer, Nørsett &
//! Wanner, *Solving Ordinary Differential Equations I*, §II.5/§II.6 (DOPRI5).
//! The stepper only advances; stopping rules, events and bookkeeping belong
//! to the caller.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// A first-order autonomous system `y' = f(y)`.
pub trait OdeSystem {
    fn dim(&self) -> usize;
    fn rhs(&self, y: &[f64], dy: &mut [f64]);
}

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

/// Continuous extension of one accepted step on `[t0, t0 + h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseSegment {
    pub t0: f64,
    pub h: f64,
    /// `[r1 | r2 | r3 | r4 | r5]`, each of length `dim`.
    coeffs: Vec<f64>,
}

impl DenseSegment {
    pub fn dim(&self) -> usize {
        self.coeffs.len() / 5
    }

    pub fn t1(&self) -> f64 {
        self.t0 + self.h
    }

    /// Evaluates the interpolant at `t`. Values slightly outside the segment
    /// are extrapolated with the same polynomial.
    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        let n = self.dim();
        let th = (t - self.t0) / self.h;
        let th1 = 1.0 - th;
        let (r1, rest) = self.coeffs.split_at(n);
        let (r2, rest) = rest.split_at(n);
        let (r3, rest) = rest.split_at(n);
        let (r4, r5) = rest.split_at(n);
        for i in 0..n {
            out[i] = r1[i] + th * (r2[i] + th1 * (r3[i] + th * (r4[i] + th1 * r5[i])));
        }
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(t, &mut out);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepControl {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub h_max: f64,
    /// Upper bound on `h·λ`, where `λ` is the local stiffness estimate
    /// `‖f(y₁) − f(y₆)‖ / ‖y₁ − y₆‖` (stage-6 and final states). Keeps fast
    /// decaying modes resolved by the dense output; `INFINITY` disables it.
    pub max_h_lambda: f64,
}

/// Outcome of one call to [`Dopri5::step`].
#[derive(Debug, Clone, PartialEq)]
pub struct AcceptedStep {
    pub segment: DenseSegment,
    /// Normalized error estimate of the accepted step (≤ 1).
    pub error_norm: f64,
    /// Rejected attempts before acceptance.
    pub rejected: usize,
}

/// Adaptive stepper state.
pub struct Dopri5 {
    ctrl: StepControl,
    t: f64,
    y: Vec<f64>,
    h: f64,
    k: [Vec<f64>; 7],
    fsal_valid: bool,
    y_stage: Vec<f64>,
    y_new: Vec<f64>,
    err_prev: f64,
}

impl Dopri5 {
    pub fn new<S: OdeSystem + ?Sized>(sys: &S, t0: f64, y0: Vec<f64>, ctrl: StepControl) -> Self {
        let n = sys.dim();
        assert_eq!(y0.len(), n, "initial state has wrong dimension");
        let mut s = Self {
            ctrl,
            t: t0,
            y: y0,
            h: 0.0,
            k: core::array::from_fn(|_| vec![0.0; n]),
            fsal_valid: false,
            y_stage: vec![0.0; n],
            y_new: vec![0.0; n],
            err_prev: 1e-4,
        };
        s.refresh_derivative(sys);
        s.h = s.initial_step(sys);
        s
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    /// Derivative at the current point (valid after construction or a step).
    pub fn dy(&self) -> &[f64] {
        &self.k[0]
    }

    pub fn step_size(&self) -> f64 {
        self.h
    }

    /// Recomputes the stored derivative; call after the system's right-hand
    /// side changed between steps.
    pub fn refresh_derivative<S: OdeSystem + ?Sized>(&mut self, sys: &S) {
        let (k0, _) = self.k.split_at_mut(1);
        sys.rhs(&self.y, &mut k0[0]);
        self.fsal_valid = true;
    }

    /// Replaces the current state, e.g. after a projection. Invalidates the
    /// stored derivative.
    pub fn set_state<S: OdeSystem + ?Sized>(&mut self, sys: &S, y: &[f64]) {
        self.y.copy_from_slice(y);
        self.refresh_derivative(sys);
    }

    fn norm(&self, v: &[f64], scale_a: &[f64], scale_b: &[f64]) -> f64 {
        let n = v.len().max(1) as f64;
        let s: f64 = v
            .iter()
            .zip(scale_a.iter().zip(scale_b))
            .map(|(e, (a, b))| {
                let sc = self.ctrl.abs_tol + self.ctrl.rel_tol * a.abs().max(b.abs());
                (e / sc) * (e / sc)
            })
            .sum();
        libm::sqrt(s / n)
    }

    // Hairer's starting step heuristic.
    fn initial_step<S: OdeSystem + ?Sized>(&mut self, sys: &S) -> f64 {
        let n = self.y.len();
        let sc: Vec<f64> = self.y.iter().map(|y| self.ctrl.abs_tol + self.ctrl.rel_tol * y.abs()).collect();
        let rms = |v: &[f64]| libm::sqrt(v.iter().zip(&sc).map(|(x, s)| (x / s) * (x / s)).sum::<f64>() / n.max(1) as f64);
        let d0 = rms(&self.y);
        let d1 = rms(&self.k[0]);
        let mut h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        h0 = h0.min(self.ctrl.h_max);
        for i in 0..n {
            self.y_stage[i] = self.y[i] + h0 * self.k[0][i];
        }
        let mut f1 = vec![0.0; n];
        sys.rhs(&self.y_stage, &mut f1);
        let diff: Vec<f64> = f1.iter().zip(&self.k[0]).map(|(a, b)| a - b).collect();
        let d2 = rms(&diff) / h0;
        let h1 = if d1.max(d2) <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            libm::pow(0.01 / d1.max(d2), 1.0 / 5.0)
        };
        (100.0 * h0).min(h1).min(self.ctrl.h_max)
    }

    /// Attempts steps from the current point until one is accepted, never
    /// stepping past `t_end`.
    pub fn step<S: OdeSystem + ?Sized>(&mut self, sys: &S, t_end: f64) -> Result<AcceptedStep> {
        const SAFETY: f64 = 0.9;
        const FAC_MIN: f64 = 0.2;
        const FAC_MAX: f64 = 10.0;
        const BETA: f64 = 0.04;
        let expo = 0.2 - BETA * 0.75;
        if !self.fsal_valid {
            self.refresh_derivative(sys);
        }
        let n = self.y.len();
        let mut rejected = 0;
        loop {
            let mut h = self.h.min(self.ctrl.h_max);
            let mut last = false;
            if self.t + h >= t_end {
                h = t_end - self.t;
                last = true;
            }
            if h <= 16.0 * f64::EPSILON * self.t.abs().max(1.0) {
                return Err(Error::StepSizeUnderflow { t: self.t, h, state: self.y.clone() });
            }
            self.stages(sys, h);
            let mut err = vec![0.0; n];
            for i in 0..n {
                err[i] = h
                    * (E1 * self.k[0][i]
                        + E3 * self.k[2][i]
                        + E4 * self.k[3][i]
                        + E5 * self.k[4][i]
                        + E6 * self.k[5][i]
                        + E7 * self.k[6][i]);
            }
            let err_norm = self.norm(&err, &self.y, &self.y_new);
            if !err_norm.is_finite() || self.y_new.iter().any(|v| !v.is_finite()) {
                if h < 1e-300 {
                    return Err(Error::NonFiniteState { t: self.t });
                }
                self.h = h * FAC_MIN;
                rejected += 1;
                continue;
            }
            if err_norm <= 1.0 {
                let segment = self.dense_segment(h);
                let e = err_norm.max(1e-10);
                let fac = (SAFETY * libm::pow(e, -expo) * libm::pow(self.err_prev, BETA)).clamp(FAC_MIN, FAC_MAX);
                self.err_prev = e;
                let mut h_next = h * fac;
                if self.ctrl.max_h_lambda.is_finite() {
                    let (mut num, mut den) = (0.0, 0.0);
                    for i in 0..n {
                        num += (self.k[6][i] - self.k[5][i]) * (self.k[6][i] - self.k[5][i]);
                        den += (self.y_new[i] - self.y_stage[i]) * (self.y_new[i] - self.y_stage[i]);
                    }
                    if den > 0.0 && num > 0.0 {
                        h_next = h_next.min(self.ctrl.max_h_lambda / libm::sqrt(num / den));
                    }
                }
                self.t = if last { t_end } else { self.t + h };
                core::mem::swap(&mut self.y, &mut self.y_new);
                let (first, rest) = self.k.split_at_mut(1);
                first[0].copy_from_slice(&rest[5]);
                self.h = if last { self.h } else { h_next };
                return Ok(AcceptedStep { segment, error_norm: err_norm, rejected });
            }
            let fac = (SAFETY * libm::pow(err_norm, -0.2)).clamp(FAC_MIN, 1.0);
            self.h = h * fac;
            rejected += 1;
        }
    }

    fn stages<S: OdeSystem + ?Sized>(&mut self, sys: &S, h: f64) {
        let n = self.y.len();
        let y = &self.y;
        let ys = &mut self.y_stage;
        let [k1, k2, k3, k4, k5, k6, k7] = &mut self.k;
        for i in 0..n {
            ys[i] = y[i] + h * A21 * k1[i];
        }
        sys.rhs(ys, k2);
        for i in 0..n {
            ys[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
        }
        sys.rhs(ys, k3);
        for i in 0..n {
            ys[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        sys.rhs(ys, k4);
        for i in 0..n {
            ys[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        sys.rhs(ys, k5);
        for i in 0..n {
            ys[i] = y[i] + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        sys.rhs(ys, k6);
        for i in 0..n {
            self.y_new[i] = y[i] + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        sys.rhs(&self.y_new, k7);
    }

    fn dense_segment(&self, h: f64) -> DenseSegment {
        let n = self.y.len();
        let mut coeffs = vec![0.0; 5 * n];
        let [k1, _, k3, k4, k5, k6, k7] = &self.k;
        for i in 0..n {
            let ydiff = self.y_new[i] - self.y[i];
            let bspl = h * k1[i] - ydiff;
            coeffs[i] = self.y[i];
            coeffs[n + i] = ydiff;
            coeffs[2 * n + i] = bspl;
            coeffs[3 * n + i] = ydiff - h * k7[i] - bspl;
            coeffs[4 * n + i] = h * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i] + D7 * k7[i]);
        }
        DenseSegment { t0: self.t, h, coeffs }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Decay;
    impl OdeSystem for Decay {
        fn dim(&self) -> usize {
            1
        }
        fn rhs(&self, y: &[f64], dy: &mut [f64]) {
            dy[0] = -y[0];
        }
    }

    struct Oscillator;
    impl OdeSystem for Oscillator {
        fn dim(&self) -> usize {
            2
        }
        fn rhs(&self, y: &[f64], dy: &mut [f64]) {
            dy[0] = y[1];
            dy[1] = -y[0];
        }
    }

    fn run<S: OdeSystem>(sys: &S, y0: Vec<f64>, t_end: f64, tol: f64) -> (Vec<f64>, Vec<DenseSegment>) {
        let ctrl = StepControl { rel_tol: tol, abs_tol: tol * 1e-3, h_max: f64::INFINITY, max_h_lambda: f64::INFINITY };
        let mut st = Dopri5::new(sys, 0.0, y0, ctrl);
        let mut segs = Vec::new();
        while st.t() < t_end {
            segs.push(st.step(sys, t_end).unwrap().segment);
        }
        (st.y().to_vec(), segs)
    }

    #[test]
    fn exponential_decay_endpoint() {
        let (y, _) = run(&Decay, vec![1.0], 5.0, 1e-10);
        assert!((y[0] - libm::exp(-5.0)).abs() < 1e-10);
    }

    #[test]
    fn dense_output_tracks_solution() {
        let (y, segs) = run(&Oscillator, vec![0.0, 1.0], 10.0, 1e-10);
        assert!((y[0] - libm::sin(10.0)).abs() < 1e-8);
        for s in &segs {
            for j in 0..=8 {
                let t = s.t0 + s.h * (j as f64) / 8.0;
                let v = s.eval(t);
                assert!((v[0] - libm::sin(t)).abs() < 1e-8, "t = {t}");
                assert!((v[1] - libm::cos(t)).abs() < 1e-8, "t = {t}");
            }
        }
        // continuity across segment boundaries
        for w in segs.windows(2) {
            let a = w[0].eval(w[0].t1());
            let b = w[1].eval(w[1].t0);
            assert!((a[0] - b[0]).abs() < 1e-15 && (a[1] - b[1]).abs() < 1e-15);
        }
    }

    #[test]
    fn error_shrinks_with_tolerance() {
        let errs: Vec<f64> = [1e-5, 1e-7, 1e-9]
            .iter()
            .map(|&tol| (run(&Decay, vec![1.0], 3.0, tol).0[0] - libm::exp(-3.0)).abs())
            .collect();
        assert!(errs[0] > errs[1] && errs[1] > errs[2]);
    }

    #[test]
    fn stops_exactly_at_end() {
        let ctrl = StepControl { rel_tol: 1e-6, abs_tol: 1e-9, h_max: f64::INFINITY, max_h_lambda: f64::INFINITY };
        let mut st = Dopri5::new(&Decay, 0.0, vec![1.0], ctrl);
        while st.t() < 1.25 {
            st.step(&Decay, 1.25).unwrap();
        }
        assert_eq!(st.t(), 1.25);
    }
}
