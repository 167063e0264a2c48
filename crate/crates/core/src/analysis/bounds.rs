//! Closed-form bounds `M₋ ≤ Δ ≤ M₊` on a two-wide block and the ε-intervals
//! on which they reduce to a straight line.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::problem::{epsilon_max_coord, Block, Dataset, HyperParams};

const SQRT2: f64 = core::f64::consts::SQRT_2;

/// Geometry of one block plus `(ε, α)`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BoundInputs {
    pub lambda: f64,
    /// `|cos θ|`
    pub cos: f64,
    /// `|sin θ|`
    pub sin: f64,
    pub y: f64,
    pub eps: f64,
    pub alpha: f64,
}

impl BoundInputs {
    pub fn new(lambda: f64, cos: f64, sin: f64, y: f64, eps: f64, alpha: f64) -> Result<Self> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidRange("lambda must be positive"));
        }
        if !(sin > 0.0) || !(cos >= sin) || cos > 1.0 + 1e-12 {
            return Err(Error::InvalidRange("need 1 >= |cos θ| >= |sin θ| > 0"));
        }
        if y == 0.0 || !y.is_finite() {
            return Err(Error::InvalidRange("y must be nonzero"));
        }
        if !(eps >= 0.0) || !(alpha > 0.0) {
            return Err(Error::InvalidRange("need eps >= 0 and alpha > 0"));
        }
        Ok(Self { lambda, cos, sin, y, eps, alpha })
    }

    pub fn from_block(b: &Block, hp: &HyperParams) -> Result<Self> {
        let (c, s) = b.rotation().ok_or(Error::BlockSizeNot2 { block: b.index, size: b.len() })?;
        Self::new(b.lambda(), c.abs(), s.abs(), b.y, hp.epsilon, hp.alpha)
    }

    pub fn with_eps(self, eps: f64) -> Self {
        Self { eps, ..self }
    }

    fn gap(&self) -> f64 {
        self.cos - self.sin
    }

    /// `(|cos θ| − |sin θ|) λ^{-1/4} |y|^{1/2}`, the value of `M₊` at `ε = 0`.
    pub fn m_bar(&self) -> f64 {
        self.gap() * libm::pow(self.lambda, -0.25) * libm::sqrt(self.y.abs())
    }

    /// `dM₊/dε`.
    pub fn m_plus_slope(&self) -> f64 {
        -self.gap() * SQRT2 / (4.0 * libm::sqrt(self.lambda) * self.y.abs())
    }

    pub fn m_plus(&self) -> f64 {
        self.m_bar() + self.m_plus_slope() * self.eps
    }

    /// `M₋` at the stored ε, which must be positive.
    pub fn m_minus(&self) -> f64 {
        let (l, s, y, e) = (self.lambda, self.sin, self.y.abs(), self.eps);
        let first = self.gap() * (libm::pow(2.0 * l, -0.25) * libm::sqrt(y) - self.alpha);
        let second = 2.0 * libm::sqrt(2.0 * e / (libm::pow(l, 0.75) * s * libm::sqrt(y)));
        let coef = 3.0 * SQRT2 * e / (libm::sqrt(l) * s * y);
        let log = libm::log(libm::pow(l, 0.25) * s * libm::pow(y, 1.5) / (SQRT2 * e));
        first - second - coef * log
    }
}

/// `(M₋, M₊)`.
pub fn bounds(bi: &BoundInputs) -> Result<(f64, f64)> {
    if bi.eps == 0.0 {
        return Err(Error::EpsilonZero);
    }
    Ok((bi.m_minus(), bi.m_plus()))
}

/// `lim_{ε→0⁺} M₋ = (|cos θ| − |sin θ|)((2λ)^{-1/4}|y|^{1/2} − α)`.
pub fn limit_m_minus_at_zero(bi: &BoundInputs) -> f64 {
    bi.gap() * (libm::pow(2.0 * bi.lambda, -0.25) * libm::sqrt(bi.y.abs()) - bi.alpha)
}

/// Largest ε admissible for this block at initialization scale `alpha`:
/// both the direct ε ceiling and the one implied by `α ≥ 9ε / (4|x_i y|)`.
pub fn block_epsilon_bar(b: &Block, alpha: f64) -> f64 {
    (0..b.len())
        .map(|k| epsilon_max_coord(b, k).min(4.0 * alpha * (b.xs[k] * b.y).abs() / 9.0))
        .fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CorollaryInterval {
    /// Right end of the interval on which `M₋ ≥ 0`.
    pub eps_star: f64,
    /// The line `δ(ε) ≤ intercept + slope·ε`.
    pub intercept: f64,
    pub slope: f64,
}

/// Interval `[0, ε*]` on which `δ ≤ M₊` is a line in ε.
pub fn corollary_interval(bi: &BoundInputs, eps_bar: f64) -> Result<CorollaryInterval> {
    if !(eps_bar > 0.0) || !eps_bar.is_finite() {
        return Err(Error::InvalidRange("eps_bar must be positive and finite"));
    }
    let m = |e: f64| bi.with_eps(e).m_minus();
    let eps_star = if m(eps_bar) >= 0.0 {
        eps_bar
    } else {
        let mut lo = f64::EPSILON.min(eps_bar * 0.5);
        if m(lo) < 0.0 {
            // symmetric block: M₋(0⁺) = 0 and the interval degenerates
            return Ok(CorollaryInterval { eps_star: 0.0, intercept: bi.m_bar(), slope: bi.m_plus_slope() });
        }
        let mut hi = eps_bar;
        while hi - lo > 1e-12 * hi {
            let mid = 0.5 * (lo + hi);
            if m(mid) >= 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    };
    Ok(CorollaryInterval { eps_star, intercept: bi.m_bar(), slope: bi.m_plus_slope() })
}

fn two_wide_inputs(ds: &Dataset, hp: &HyperParams) -> Result<Vec<BoundInputs>> {
    ds.blocks().iter().map(|b| BoundInputs::from_block(b, hp)).collect()
}

/// `Σₙ max(|M₊⁽ⁿ⁾|, |M₋⁽ⁿ⁾|)`.
pub fn sum_bound(ds: &Dataset, hp: &HyperParams) -> Result<f64> {
    let mut total = 0.0;
    for bi in two_wide_inputs(ds, hp)? {
        let (lo, hi) = bounds(&bi)?;
        total += lo.abs().max(hi.abs());
    }
    Ok(total)
}

/// Summed line for several blocks, valid for `ε ∈ [0, eps_limit]`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NdLine {
    pub intercept: f64,
    pub slope: f64,
    /// `min_n ε*⁽ⁿ⁾`.
    pub eps_limit: f64,
}

impl NdLine {
    pub fn at(&self, eps: f64) -> f64 {
        self.intercept + self.slope * eps
    }
}

/// Sums the per-block lines; only `hp.alpha` is used.
pub fn corollary_nd_line(ds: &Dataset, hp: &HyperParams) -> Result<NdLine> {
    let inputs = two_wide_inputs(ds, hp)?;
    let mut line = NdLine { intercept: 0.0, slope: 0.0, eps_limit: f64::INFINITY };
    for (bi, b) in inputs.iter().zip(ds.blocks()) {
        let ci = corollary_interval(bi, block_epsilon_bar(b, hp.alpha))?;
        line.intercept += ci.intercept;
        line.slope += ci.slope;
        line.eps_limit = line.eps_limit.min(ci.eps_star);
    }
    Ok(line)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{build_dataset, RawBlock};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn unit(eps: f64, alpha: f64) -> BoundInputs {
        BoundInputs::new(1.0, 0.8, 0.6, 1.0, eps, alpha).unwrap()
    }

    #[test]
    fn symmetric_block_has_zero_upper_bound() {
        let c = libm::sqrt(0.5);
        let bi = BoundInputs::new(2.0, c, c, 1.5, 0.01, 0.1).unwrap();
        assert_eq!(bi.m_plus(), 0.0);
        let ci = corollary_interval(&bi, 0.01).unwrap();
        assert_eq!((ci.intercept, ci.slope), (0.0, 0.0));
    }

    #[test]
    fn limits_at_zero() {
        let bi = unit(1e-300, 0.05);
        // 0.2·(2^{-1/4} − 0.05)
        assert_relative_eq!(limit_m_minus_at_zero(&bi), 0.158_179_283_050_742_9, epsilon = 1e-15);
        assert_relative_eq!(bi.m_minus(), 0.158_179_283_050_742_9, epsilon = 1e-12);
        assert_relative_eq!(bi.m_plus(), 0.2, epsilon = 1e-15);
        assert_eq!(bounds(&unit(0.0, 0.05)), Err(Error::EpsilonZero));
    }

    #[test]
    fn m_minus_closed_form() {
        // independent high-precision evaluation at λ=1, |cos|=0.8, |sin|=0.6, y=1, α=0.05, ε=1e-3
        let bi = unit(1e-3, 0.05);
        assert_relative_eq!(bi.m_minus(), M_MINUS_1E3, epsilon = 1e-14);
    }
    const M_MINUS_1E3: f64 = -7.324_880_827_748_14e-5;

    #[test]
    fn input_validation() {
        assert!(BoundInputs::new(1.0, 0.6, 0.8, 1.0, 0.01, 0.1).is_err());
        assert!(BoundInputs::new(0.0, 0.8, 0.6, 1.0, 0.01, 0.1).is_err());
        assert!(BoundInputs::new(1.0, 0.8, 0.6, 0.0, 0.01, 0.1).is_err());
        let ds = build_dataset(&[RawBlock { xs: vec![1.0, 2.0, 3.0], y: 1.0 }]).unwrap();
        let hp = HyperParams::new(0.01, 0.1).unwrap();
        assert!(matches!(sum_bound(&ds, &hp), Err(Error::BlockSizeNot2 { .. })));
    }

    #[test]
    fn corollary_interval_cases() {
        let bi = unit(0.0, 0.05);
        let small = corollary_interval(&bi, 1e-4).unwrap();
        assert_eq!(small.eps_star, 1e-4);
        let ci = corollary_interval(&bi, 0.05).unwrap();
        assert!(ci.eps_star < 0.05);
        assert!(bi.with_eps(ci.eps_star).m_minus().abs() <= 1e-10);
        assert_relative_eq!(ci.intercept, 0.2, epsilon = 1e-15);
        assert_relative_eq!(ci.slope, -0.2 * SQRT2 / 4.0, epsilon = 1e-15);
        assert!(corollary_interval(&bi, 0.0).is_err());
    }

    #[test]
    fn sums_over_blocks() {
        let b1 = RawBlock { xs: vec![0.9, -0.4], y: 1.3 };
        let b2 = RawBlock { xs: vec![0.5, 0.7], y: -0.8 };
        let hp = HyperParams::new(0.002, 0.05).unwrap();
        let one = build_dataset(core::slice::from_ref(&b1)).unwrap();
        let twice = build_dataset(&[b1.clone(), b1.clone()]).unwrap();
        let mixed = build_dataset(&[b1, b2]).unwrap();
        let single = sum_bound(&one, &hp).unwrap();
        let (lo, hi) = bounds(&BoundInputs::from_block(one.block(0), &hp).unwrap()).unwrap();
        assert_eq!(single, lo.abs().max(hi.abs()));
        assert_relative_eq!(sum_bound(&twice, &hp).unwrap(), 2.0 * single, epsilon = 1e-15);
        let by_hand: f64 = mixed
            .blocks()
            .iter()
            .map(|b| {
                let (lo, hi) = bounds(&BoundInputs::from_block(b, &hp).unwrap()).unwrap();
                lo.abs().max(hi.abs())
            })
            .sum();
        assert_relative_eq!(sum_bound(&mixed, &hp).unwrap(), by_hand, epsilon = 1e-15);

        let line1 = corollary_nd_line(&one, &hp).unwrap();
        let bi = BoundInputs::from_block(one.block(0), &hp).unwrap();
        let ci = corollary_interval(&bi, block_epsilon_bar(one.block(0), hp.alpha)).unwrap();
        assert_eq!((line1.intercept, line1.slope, line1.eps_limit), (ci.intercept, ci.slope, ci.eps_star));
        let line = corollary_nd_line(&mixed, &hp).unwrap();
        let (mut i, mut s) = (0.0, 0.0);
        for b in mixed.blocks() {
            let bi = BoundInputs::from_block(b, &hp).unwrap();
            i += bi.m_bar();
            s += bi.m_plus_slope();
        }
        assert!((line.intercept - i).abs() <= 1e-12 && (line.slope - s).abs() <= 1e-12);
    }

    #[test]
    fn symmetric_blocks_give_flat_line() {
        let ds = build_dataset(&[RawBlock { xs: vec![0.5, -0.5], y: 1.0 }, RawBlock { xs: vec![0.7, 0.7], y: 2.0 }]).unwrap();
        let line = corollary_nd_line(&ds, &HyperParams::new(0.001, 0.05).unwrap()).unwrap();
        assert_eq!((line.intercept, line.slope), (0.0, 0.0));
    }

    proptest! {
        #[test]
        fn m_minus_decreasing_and_m_plus_affine(
            x1 in 0.3..1.0f64, ratio in 0.3..1.0f64, y in 0.5..2.0f64, frac in 0.05..0.95f64,
        ) {
            let ds = build_dataset(&[RawBlock { xs: vec![x1, ratio * x1], y }]).unwrap();
            let b = ds.block(0);
            let alpha = frac * crate::problem::alpha_max_block(b);
            let bi = BoundInputs::from_block(b, &HyperParams::new(0.0, alpha).unwrap()).unwrap();
            prop_assume!(bi.sin < bi.cos);
            let top = block_epsilon_bar(b, alpha);
            let grid: Vec<f64> = (1..=20).map(|k| top * k as f64 / 20.0).collect();
            for w in grid.windows(2) {
                prop_assert!(bi.with_eps(w[0]).m_minus() > bi.with_eps(w[1]).m_minus());
            }
            let (e1, e2) = (1e-3, 7e-3);
            let slope = (bi.with_eps(e2).m_plus() - bi.with_eps(e1).m_plus()) / (e2 - e1);
            prop_assert!((slope - bi.m_plus_slope()).abs() <= 1e-9 * bi.m_plus_slope().abs().max(1.0));
            prop_assert!(bi.m_plus_slope() <= 0.0);
        }
    }
}
