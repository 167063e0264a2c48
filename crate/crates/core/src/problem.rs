//! Block-structured regression instances, assumption checks, loss and gradients.
//!
//! A [`Dataset`] is a design matrix whose rows have pairwise disjoint
//! supports, so that `XᵀX` is block diagonal with rank-one blocks. Each row is
//! stored as a [`Block`] holding only its nonzero entries; coordinates are
//! numbered contiguously block after block.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

/// Input form of one row: the nonzero entries and the label.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RawBlock {
    pub xs: Vec<f64>,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub index: usize,
    pub xs: Vec<f64>,
    pub y: f64,
    /// Global coordinate indices of the row's support, 0-based and contiguous.
    pub column_ids: Vec<usize>,
}

impl Block {
    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    /// `Σ_k |x_k|`.
    pub fn abs_sum(&self) -> f64 {
        self.xs.iter().map(|x| x.abs()).sum()
    }

    /// The nonzero eigenvalue `λ = ‖x‖²` of the block `x xᵀ`.
    pub fn lambda(&self) -> f64 {
        self.xs.iter().map(|x| x * x).sum()
    }

    /// `(cos θ, sin θ) = x / √λ` for two-wide blocks.
    pub fn rotation(&self) -> Option<(f64, f64)> {
        if self.len() != 2 {
            return None;
        }
        let norm = libm::sqrt(self.lambda());
        Some((self.xs[0] / norm, self.xs[1] / norm))
    }

    pub fn range(&self) -> core::ops::Range<usize> {
        let start = self.column_ids[0];
        start..start + self.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    blocks: Vec<Block>,
    n_features: usize,
    coord_block: Vec<usize>,
    coord_x: Vec<f64>,
    sigma: Vec<f64>,
}

impl Dataset {
    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn block(&self, n: usize) -> &Block {
        &self.blocks[n]
    }

    /// Number of examples `N`.
    pub fn n_examples(&self) -> usize {
        self.blocks.len()
    }

    /// Number of features `D = Σ Dₙ`.
    pub fn n_features(&self) -> usize {
        self.n_features
    }

    /// Block owning coordinate `i`.
    pub fn block_of(&self, i: usize) -> usize {
        self.coord_block[i]
    }

    /// The single nonzero design entry in column `i`.
    pub fn x(&self, i: usize) -> f64 {
        self.coord_x[i]
    }

    pub fn labels(&self) -> Vec<f64> {
        self.blocks.iter().map(|b| b.y).collect()
    }

    /// Orientation `σ_i = sgn(x_i y⁽ⁿ⁾)`: `+1` when `w⁺_i` is the dominating
    /// weight, `-1` when `w⁻_i` is.
    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn max_abs_x(&self) -> f64 {
        self.coord_x.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// True when every block is two wide.
    pub fn all_blocks_two_wide(&self) -> bool {
        self.blocks.iter().all(|b| b.len() == 2)
    }

    /// Dense `N × D` design matrix, row major.
    pub fn design_matrix(&self) -> Vec<Vec<f64>> {
        self.blocks
            .iter()
            .map(|b| {
                let mut row = vec![0.0; self.n_features];
                for (k, &c) in b.column_ids.iter().enumerate() {
                    row[c] = b.xs[k];
                }
                row
            })
            .collect()
    }

    /// Dense `XᵀX`, assembled from the rows.
    pub fn gram(&self) -> Vec<Vec<f64>> {
        let x = self.design_matrix();
        let d = self.n_features;
        let mut g = vec![vec![0.0; d]; d];
        for row in &x {
            for i in 0..d {
                if row[i] == 0.0 {
                    continue;
                }
                for j in 0..d {
                    g[i][j] += row[i] * row[j];
                }
            }
        }
        g
    }

    pub fn raw_blocks(&self) -> Vec<RawBlock> {
        self.blocks
            .iter()
            .map(|b| RawBlock { xs: b.xs.clone(), y: b.y })
            .collect()
    }
}

/// Builds a dataset from raw rows.
///
/// Two-wide rows are put in canonical order, larger `|x|` first (ties keep
/// the input order). Other rows keep their order.
pub fn build_dataset(raw: &[RawBlock]) -> Result<Dataset> {
    let mut blocks = Vec::with_capacity(raw.len());
    let mut coord_block = Vec::new();
    let mut coord_x = Vec::new();
    let mut sigma = Vec::new();
    let mut next = 0;
    for (n, rb) in raw.iter().enumerate() {
        if rb.xs.is_empty() {
            return Err(Error::EmptyBlock { block: n });
        }
        if let Some(index) = rb.xs.iter().position(|&x| x == 0.0 || !x.is_finite()) {
            return Err(Error::ZeroEntry { block: n, index });
        }
        if rb.y == 0.0 || !rb.y.is_finite() {
            return Err(Error::ZeroLabel { block: n });
        }
        let mut xs = rb.xs.clone();
        if xs.len() == 2 && xs[1].abs() > xs[0].abs() {
            xs.swap(0, 1);
        }
        let column_ids: Vec<usize> = (next..next + xs.len()).collect();
        next += xs.len();
        for &x in &xs {
            coord_block.push(n);
            coord_x.push(x);
            sigma.push(if x * rb.y > 0.0 { 1.0 } else { -1.0 });
        }
        blocks.push(Block { index: n, xs, y: rb.y, column_ids });
    }
    Ok(Dataset { blocks, n_features: next, coord_block, coord_x, sigma })
}

/// Magnitude ranges for randomly generated entries. Signs are drawn uniformly.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ValueRanges {
    pub x: (f64, f64),
    pub y: (f64, f64),
}

impl Default for ValueRanges {
    fn default() -> Self {
        Self { x: (0.3, 1.0), y: (0.5, 2.0) }
    }
}

/// Magnitudes below this are redrawn.
const ZERO_BAND: f64 = 1e-6;

fn signed_magnitude<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    loop {
        let m = if hi > lo { rng.random_range(lo..hi) } else { lo };
        if m.abs() >= ZERO_BAND {
            return if rng.random_bool(0.5) { m.abs() } else { -m.abs() };
        }
    }
}

/// Draws a dataset with the given block sizes from an arbitrary generator.
pub fn random_dataset_from<R: Rng + ?Sized>(
    rng: &mut R,
    block_sizes: &[usize],
    ranges: &ValueRanges,
) -> Result<Dataset> {
    if ranges.x.0 < 0.0 || ranges.x.1 < ranges.x.0 || ranges.y.0 < 0.0 || ranges.y.1 < ranges.y.0 {
        return Err(Error::InvalidRange("value ranges must be non-negative and ordered"));
    }
    if ranges.x.1 < ZERO_BAND || ranges.y.1 < ZERO_BAND {
        return Err(Error::InvalidRange("value ranges lie inside the zero band"));
    }
    let mut raw = Vec::with_capacity(block_sizes.len());
    for (n, &size) in block_sizes.iter().enumerate() {
        if size == 0 {
            return Err(Error::EmptyBlock { block: n });
        }
        let xs = (0..size).map(|_| signed_magnitude(rng, ranges.x)).collect();
        let y = signed_magnitude(rng, ranges.y);
        raw.push(RawBlock { xs, y });
    }
    build_dataset(&raw)
}

/// Deterministic random dataset for `seed`.
pub fn random_dataset(seed: u64, block_sizes: &[usize], ranges: &ValueRanges) -> Result<Dataset> {
    let mut rng = rng::stream_rng(seed, rng::DATASET_STREAM);
    random_dataset_from(&mut rng, block_sizes, ranges)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HyperParams {
    pub epsilon: f64,
    pub alpha: f64,
}

impl HyperParams {
    pub fn new(epsilon: f64, alpha: f64) -> Result<Self> {
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(Error::InvalidHyperParams("epsilon must be finite and >= 0"));
        }
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::InvalidHyperParams("alpha must be finite and > 0"));
        }
        Ok(Self { epsilon, alpha })
    }
}

/// Per-coordinate bounds on `(ε, α)` and the resulting verdicts.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AssumptionReport {
    /// `(1/9)|x_i||y|^{3/2} / √(2Σ_k|x_k|)`.
    pub epsilon_max: Vec<f64>,
    /// `9ε / (4|x_i y|)` at the report's ε.
    pub alpha_min: Vec<f64>,
    /// `(1/3)√(|y| / (2Σ_k|x_k|))`.
    pub alpha_max: Vec<f64>,
    pub assumption2_ok: bool,
    pub assumption3_ok: bool,
    /// ε = 0 is admissible but most of the analysis is undefined there.
    pub epsilon_zero: bool,
}

impl AssumptionReport {
    pub fn epsilon_upper(&self) -> f64 {
        self.epsilon_max.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn alpha_lower(&self) -> f64 {
        self.alpha_min.iter().copied().fold(0.0, f64::max)
    }

    pub fn alpha_upper(&self) -> f64 {
        self.alpha_max.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn all_ok(&self) -> bool {
        self.assumption2_ok && self.assumption3_ok
    }
}

pub fn epsilon_max_coord(b: &Block, k: usize) -> f64 {
    let y = b.y.abs();
    b.xs[k].abs() * y * libm::sqrt(y) / (9.0 * libm::sqrt(2.0 * b.abs_sum()))
}

pub fn alpha_max_block(b: &Block) -> f64 {
    libm::sqrt(b.y.abs() / (2.0 * b.abs_sum())) / 3.0
}

pub fn validate_assumptions(ds: &Dataset, hp: &HyperParams) -> AssumptionReport {
    let d = ds.n_features();
    let mut epsilon_max = Vec::with_capacity(d);
    let mut alpha_min = Vec::with_capacity(d);
    let mut alpha_max = Vec::with_capacity(d);
    for b in ds.blocks() {
        let amax = alpha_max_block(b);
        for k in 0..b.len() {
            epsilon_max.push(epsilon_max_coord(b, k));
            alpha_min.push(9.0 * hp.epsilon / (4.0 * (b.xs[k] * b.y).abs()));
            alpha_max.push(amax);
        }
    }
    let mut report = AssumptionReport {
        epsilon_max,
        alpha_min,
        alpha_max,
        assumption2_ok: false,
        assumption3_ok: ds.all_blocks_two_wide(),
        epsilon_zero: hp.epsilon == 0.0,
    };
    report.assumption2_ok = hp.epsilon >= 0.0
        && hp.epsilon <= report.epsilon_upper()
        && hp.alpha >= report.alpha_lower()
        && hp.alpha <= report.alpha_upper();
    report
}

/// The set of `(ε, α)` satisfying the per-coordinate bounds of a group of
/// blocks (the whole dataset or a single block).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmissibleBox {
    pub epsilon_max: f64,
    pub alpha_max: f64,
    /// `min_i |x_i y⁽ⁿ⁽ⁱ⁾⁾|`, which fixes the lower α bound.
    pub min_abs_xy: f64,
}

impl AdmissibleBox {
    pub fn of_blocks<'a, I: IntoIterator<Item = &'a Block>>(blocks: I) -> Self {
        let mut bx = Self { epsilon_max: f64::INFINITY, alpha_max: f64::INFINITY, min_abs_xy: f64::INFINITY };
        for b in blocks {
            bx.alpha_max = bx.alpha_max.min(alpha_max_block(b));
            for k in 0..b.len() {
                bx.epsilon_max = bx.epsilon_max.min(epsilon_max_coord(b, k));
                bx.min_abs_xy = bx.min_abs_xy.min((b.xs[k] * b.y).abs());
            }
        }
        bx
    }

    pub fn of(ds: &Dataset) -> Self {
        Self::of_blocks(ds.blocks())
    }

    pub fn alpha_min(&self, epsilon: f64) -> f64 {
        9.0 * epsilon / (4.0 * self.min_abs_xy)
    }

    /// Largest admissible ε once α is fixed.
    pub fn epsilon_limit(&self, alpha: f64) -> f64 {
        self.epsilon_max.min(4.0 * alpha * self.min_abs_xy / 9.0)
    }

    /// Largest ε for which some admissible α exists.
    pub fn epsilon_limit_any_alpha(&self) -> f64 {
        self.epsilon_limit(self.alpha_max)
    }

    pub fn contains(&self, hp: &HyperParams) -> bool {
        hp.epsilon >= 0.0
            && hp.epsilon <= self.epsilon_max
            && hp.alpha >= self.alpha_min(hp.epsilon)
            && hp.alpha <= self.alpha_max
    }
}

/// A dataset paired with hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub dataset: Dataset,
    pub hyper: HyperParams,
}

/// The `index`-th instance of a seeded batch satisfying every assumption:
/// `N` uniform in `1..=max_blocks`, all blocks two wide, and `(ε, α)` drawn
/// from the interior of the admissible box.
pub fn admissible_instance(seed: u64, index: u64, max_blocks: usize) -> Result<Instance> {
    if max_blocks == 0 {
        return Err(Error::InvalidRange("max_blocks must be >= 1"));
    }
    let mut rng = rng::stream_rng(seed, rng::instance_stream(index));
    let n = rng.random_range(1..=max_blocks);
    let sizes = vec![2; n];
    let dataset = random_dataset_from(&mut rng, &sizes, &ValueRanges::default())?;
    let bx = AdmissibleBox::of(&dataset);
    let eps_hi = bx.epsilon_limit_any_alpha();
    let epsilon = eps_hi * rng.random_range(0.05..0.95);
    let (a_lo, a_hi) = (bx.alpha_min(epsilon), bx.alpha_max);
    let alpha = a_lo + (a_hi - a_lo) * rng.random_range(0.05..0.95);
    let hyper = HyperParams::new(epsilon, alpha)?;
    Ok(Instance { dataset, hyper })
}

/// Weights `(w⁺, w⁻)` together with the orientation of each coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightState {
    pub w_plus: Vec<f64>,
    pub w_minus: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl WeightState {
    /// `w⁺ = w⁻ = α𝟏`.
    pub fn initial(ds: &Dataset, alpha: f64) -> Self {
        let d = ds.n_features();
        Self { w_plus: vec![alpha; d], w_minus: vec![alpha; d], sigma: ds.sigma().to_vec() }
    }

    /// Splits a stacked `[w⁺; w⁻]` vector.
    pub fn from_stacked(ds: &Dataset, w: &[f64]) -> Result<Self> {
        let d = ds.n_features();
        if w.len() != 2 * d {
            return Err(Error::DimensionMismatch { expected: 2 * d, found: w.len() });
        }
        Ok(Self { w_plus: w[..d].to_vec(), w_minus: w[d..].to_vec(), sigma: ds.sigma().to_vec() })
    }

    pub fn stacked(&self) -> Vec<f64> {
        let mut w = self.w_plus.clone();
        w.extend_from_slice(&self.w_minus);
        w
    }

    pub fn dim(&self) -> usize {
        self.w_plus.len()
    }

    /// Dominating weight of coordinate `i`.
    pub fn u(&self, i: usize) -> f64 {
        if self.sigma[i] > 0.0 {
            self.w_plus[i]
        } else {
            self.w_minus[i]
        }
    }

    /// Non-dominating weight of coordinate `i`.
    pub fn v(&self, i: usize) -> f64 {
        if self.sigma[i] > 0.0 {
            self.w_minus[i]
        } else {
            self.w_plus[i]
        }
    }

    pub fn u_vec(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.u(i)).collect()
    }

    pub fn v_vec(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.v(i)).collect()
    }

    /// `β = w⁺⊙w⁺ − w⁻⊙w⁻`.
    pub fn beta(&self) -> Vec<f64> {
        beta_of(&self.w_plus, &self.w_minus)
    }

    fn check(&self, ds: &Dataset) -> Result<()> {
        let d = ds.n_features();
        for len in [self.w_plus.len(), self.w_minus.len(), self.sigma.len()] {
            if len != d {
                return Err(Error::DimensionMismatch { expected: d, found: len });
            }
        }
        Ok(())
    }
}

pub fn beta_of(w_plus: &[f64], w_minus: &[f64]) -> Vec<f64> {
    w_plus.iter().zip(w_minus).map(|(p, m)| p * p - m * m).collect()
}

/// `r⁽ⁿ⁾ = y⁽ⁿ⁾ − ⟨x⁽ⁿ⁾, β⟩`.
pub fn residuals(ds: &Dataset, beta: &[f64]) -> Result<Vec<f64>> {
    if beta.len() != ds.n_features() {
        return Err(Error::DimensionMismatch { expected: ds.n_features(), found: beta.len() });
    }
    Ok(ds
        .blocks()
        .iter()
        .map(|b| b.y - b.column_ids.iter().zip(&b.xs).map(|(&c, x)| x * beta[c]).sum::<f64>())
        .collect())
}

/// `L = ¼‖Xβ − y‖²`.
pub fn loss(ds: &Dataset, w: &WeightState) -> Result<f64> {
    w.check(ds)?;
    let r = residuals(ds, &w.beta())?;
    Ok(0.25 * r.iter().map(|r| r * r).sum::<f64>())
}

/// `∇_β L = ½Xᵀ(Xβ − y)`.
pub fn gradient_beta(ds: &Dataset, beta: &[f64]) -> Result<Vec<f64>> {
    let r = residuals(ds, beta)?;
    Ok((0..ds.n_features()).map(|i| -0.5 * ds.x(i) * r[ds.block_of(i)]).collect())
}

/// Stacked `(∇_{w⁺}L, ∇_{w⁻}L)` with `[∇_{w⁺}L]_i = −w⁺_i x_i r⁽ⁿ⁾` and
/// `[∇_{w⁻}L]_i = w⁻_i x_i r⁽ⁿ⁾`.
pub fn gradient_w(ds: &Dataset, w: &WeightState) -> Result<Vec<f64>> {
    w.check(ds)?;
    let r = residuals(ds, &w.beta())?;
    let d = ds.n_features();
    let mut g = vec![0.0; 2 * d];
    for i in 0..d {
        let xr = ds.x(i) * r[ds.block_of(i)];
        g[i] = -w.w_plus[i] * xr;
        g[d + i] = w.w_minus[i] * xr;
    }
    Ok(g)
}
