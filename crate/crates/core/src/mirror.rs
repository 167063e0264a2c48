//! Potentials, mirror maps, Bregman divergences and dual dynamics.
//!
//! Smoothed sign descent is mirror descent with the time-varying potential
//! `Φ_t(β) = (2/3) Σ (|β_i| + v_{i,t}²)^{3/2}`; gradient descent on the same
//! parameterization uses the fixed hyperbolic-entropy potential `Ψ_α`.
//!
//! `Φ_t` has a kink at `β_i = 0` whenever `v_i > 0`. Along the flow `β_i`
//! leaves zero with sign `σ_i = sgn(x_i y)`, so the one-sided derivative in
//! that direction (`σ_i v_i`) is used there. It is a subgradient, hence Bregman
//! divergences built on it stay nonnegative.

use alloc::vec;
use alloc::vec::Vec;

use crate::dynamics::ssd_rhs;
use crate::error::{Error, Result};
use crate::problem::{gradient_beta, Dataset, WeightState};

/// A convex potential with a (sub)gradient.
pub trait Potential {
    fn value(&self, beta: &[f64]) -> Result<f64>;
    fn gradient(&self, beta: &[f64]) -> Result<Vec<f64>>;
}

/// `Φ_t` for a fixed value of the non-dominating weights `v_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialSsd {
    pub v_param: Vec<f64>,
    /// Orientation used for the derivative at `β_i = 0`. Without it the
    /// gradient is undefined at a kink.
    pub sigma: Option<Vec<f64>>,
}

impl PotentialSsd {
    pub fn new(v_param: Vec<f64>) -> Result<Self> {
        if v_param.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidHyperParams("v_param must be nonnegative"));
        }
        Ok(Self { v_param, sigma: None })
    }

    pub fn with_sigma(mut self, sigma: Vec<f64>) -> Self {
        self.sigma = Some(sigma);
        self
    }
}

impl Potential for PotentialSsd {
    fn value(&self, beta: &[f64]) -> Result<f64> {
        potential_ssd(self, beta)
    }

    fn gradient(&self, beta: &[f64]) -> Result<Vec<f64>> {
        match &self.sigma {
            Some(sigma) => Ok(mirror_map_ssd(self, beta, sigma)?.value),
            None => {
                check_len(self.v_param.len(), beta.len())?;
                if let Some(index) = beta.iter().zip(&self.v_param).position(|(b, v)| *b == 0.0 && *v > 0.0) {
                    return Err(Error::NonDifferentiablePoint { index });
                }
                let ones = vec![1.0; beta.len()];
                Ok(mirror_map_ssd(self, beta, &ones)?.value)
            }
        }
    }
}

/// `Ψ_α`, the gradient-descent potential.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PotentialGd {
    pub alpha: f64,
}

impl PotentialGd {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::InvalidHyperParams("alpha must be positive"));
        }
        Ok(Self { alpha })
    }
}

impl Potential for PotentialGd {
    fn value(&self, beta: &[f64]) -> Result<f64> {
        Ok(potential_gd(self, beta))
    }

    fn gradient(&self, beta: &[f64]) -> Result<Vec<f64>> {
        Ok(mirror_map_gd(self, beta).value)
    }
}

/// `½‖β‖²`; its Bregman divergence is half the squared distance.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Quadratic;

impl Potential for Quadratic {
    fn value(&self, beta: &[f64]) -> Result<f64> {
        Ok(0.5 * beta.iter().map(|b| b * b).sum::<f64>())
    }

    fn gradient(&self, beta: &[f64]) -> Result<Vec<f64>> {
        Ok(beta.to_vec())
    }
}

/// A dual variable `∇Φ(β)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualState {
    pub value: Vec<f64>,
}

fn check_len(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { expected, found });
    }
    Ok(())
}

/// `(2/3) Σ (|β_i| + v_i²)^{3/2}`.
pub fn potential_ssd(p: &PotentialSsd, beta: &[f64]) -> Result<f64> {
    check_len(p.v_param.len(), beta.len())?;
    Ok(beta
        .iter()
        .zip(&p.v_param)
        .map(|(b, v)| {
            let a = b.abs() + v * v;
            2.0 / 3.0 * a * libm::sqrt(a)
        })
        .sum())
}

/// `s_i (|β_i| + v_i²)^{1/2}` with `s_i = sgn(β_i)`, or `σ_i` at `β_i = 0`.
pub fn mirror_map_ssd(p: &PotentialSsd, beta: &[f64], sigma: &[f64]) -> Result<DualState> {
    check_len(p.v_param.len(), beta.len())?;
    check_len(beta.len(), sigma.len())?;
    let value = beta
        .iter()
        .zip(&p.v_param)
        .zip(sigma)
        .map(|((b, v), s)| {
            let sign = if *b > 0.0 {
                1.0
            } else if *b < 0.0 {
                -1.0
            } else {
                s.signum()
            };
            sign * libm::sqrt(b.abs() + v * v)
        })
        .collect();
    Ok(DualState { value })
}

/// `¼ Σ (β_i asinh(β_i / 2α²) − √(β_i² + 4α⁴))`.
pub fn potential_gd(p: &PotentialGd, beta: &[f64]) -> f64 {
    let a2 = p.alpha * p.alpha;
    beta.iter()
        .map(|b| 0.25 * (b * libm::asinh(b / (2.0 * a2)) - libm::sqrt(b * b + 4.0 * a2 * a2)))
        .sum()
}

/// `¼ asinh(β / 2α²)`.
pub fn mirror_map_gd(p: &PotentialGd, beta: &[f64]) -> DualState {
    let a2 = p.alpha * p.alpha;
    DualState { value: beta.iter().map(|b| 0.25 * libm::asinh(b / (2.0 * a2))).collect() }
}

/// `D(β₁, β₂) = Φ(β₁) − Φ(β₂) − ⟨β₁ − β₂, ∇Φ(β₂)⟩`.
pub fn bregman<P: Potential + ?Sized>(potential: &P, beta1: &[f64], beta2: &[f64]) -> Result<f64> {
    check_len(beta2.len(), beta1.len())?;
    let g = potential.gradient(beta2)?;
    let inner: f64 = beta1.iter().zip(beta2).zip(&g).map(|((a, b), g)| (a - b) * g).sum();
    Ok(potential.value(beta1)? - potential.value(beta2)? - inner)
}

/// `E(β, β̄) = Φ_∞(β) − Φ₀(β̄) + ⟨∇Φ₀(β̄), β̄ − β⟩` where `Φ_∞` uses `v_inf`,
/// `Φ₀` uses `v0`, and `∇Φ₀` resolves zero coordinates with `sigma`.
pub fn e_function(beta: &[f64], beta_bar: &[f64], v_inf: &[f64], v0: &[f64], sigma: &[f64]) -> Result<f64> {
    let d = beta.len();
    for len in [beta_bar.len(), v_inf.len(), v0.len(), sigma.len()] {
        check_len(d, len)?;
    }
    let phi_inf = PotentialSsd { v_param: v_inf.to_vec(), sigma: None };
    let phi_0 = PotentialSsd { v_param: v0.to_vec(), sigma: None };
    let g0 = mirror_map_ssd(&phi_0, beta_bar, sigma)?.value;
    let inner: f64 = g0.iter().zip(beta_bar.iter().zip(beta)).map(|(g, (bb, b))| g * (bb - b)).sum();
    Ok(potential_ssd(&phi_inf, beta)? - potential_ssd(&phi_0, beta_bar)? + inner)
}

/// Time derivative of `∇Φ_t(β(t))` under smoothed sign descent:
/// `−σ ⊙ ∇_u L / (|∇_u L| + ε)`, i.e. `σ ⊙ u̇`.
pub fn dual_dynamics_rhs(ds: &Dataset, eps: f64, w: &WeightState) -> Result<Vec<f64>> {
    let rate = ssd_rhs(ds, eps, w)?;
    let d = w.dim();
    Ok((0..d)
        .map(|i| {
            let s = w.sigma[i];
            let du = if s > 0.0 { rate[i] } else { rate[d + i] };
            s * du
        })
        .collect())
}

/// Time derivative of `∇Ψ_α(β(t))` under gradient descent: `−½Xᵀ(Xβ − y)`.
pub fn gd_dual_dynamics_rhs(ds: &Dataset, beta: &[f64]) -> Result<Vec<f64>> {
    Ok(gradient_beta(ds, beta)?.into_iter().map(|g| -g).collect())
}
