//! Pinball-loss quantile regression solved as a linear program.
//!
//! The regression
//!
//! ```text
//! minimize_β  Σ_i ℓ_{α_i}(S_i − Φ_iᵀβ),   ℓ_α(r) = (1−α)[r]₊ + α[r]₋
//! ```
//!
//! is solved through its bounded dual `max Σ η_i S_i` subject to `Φᵀη = 0`
//! and `−α_i ≤ η_i ≤ 1−α_i`. A vertex of the dual is described by `d`
//! basic observations; the primal coefficients are the unique interpolant of
//! the scores on that basis. Exposing the basis is what the cutoff gradient
//! consumes, so the solver is a simplex method rather than an interior-point
//! one.

mod linalg;
mod simplex;

pub use linalg::basis_interpolator;
pub(crate) use linalg::BasisFactor;
pub(crate) use simplex::{FaceOutcome, SimplexSolver};

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Dense row-major design matrix `Φ(X)`, one row per observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    intercept_col: Option<usize>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Validation(format!(
                "feature data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite feature at row {}, column {}",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        let mut m = Self {
            rows,
            cols,
            data,
            intercept_col: None,
        };
        m.intercept_col = m.find_intercept();
        Ok(m)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != cols) {
            return Err(Error::Validation(format!(
                "row {bad} has {} columns, expected {cols}",
                rows[bad].len()
            )));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Single all-ones column: the split-conformal function class.
    pub fn intercept_only(rows: usize) -> Self {
        Self {
            rows,
            cols: 1,
            data: vec![1.0; rows],
            intercept_col: if rows > 0 { Some(0) } else { None },
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn intercept_col(&self) -> Option<usize> {
        self.intercept_col
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let mut m = Self {
            rows: idx.len(),
            cols: self.cols,
            data,
            intercept_col: None,
        };
        m.intercept_col = m.find_intercept();
        m
    }

    /// Copy of `self` with one extra observation appended at the bottom.
    pub fn with_row(&self, row: &[f64]) -> Result<Self> {
        if row.len() != self.cols {
            return Err(Error::Validation(format!(
                "test features have {} entries, design has {} columns",
                row.len(),
                self.cols
            )));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite test feature".into()));
        }
        let mut data = Vec::with_capacity(self.data.len() + self.cols);
        data.extend_from_slice(&self.data);
        data.extend_from_slice(row);
        let intercept_col = self.intercept_col.filter(|&c| row[c] == 1.0);
        Ok(Self {
            rows: self.rows + 1,
            cols: self.cols,
            data,
            intercept_col,
        })
    }

    /// Append columns given column-major.
    pub fn with_columns(&self, extra: &[Vec<f64>]) -> Result<Self> {
        if let Some(c) = extra.iter().find(|c| c.len() != self.rows) {
            return Err(Error::Validation(format!(
                "appended column has {} rows, expected {}",
                c.len(),
                self.rows
            )));
        }
        let cols = self.cols + extra.len();
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend(extra.iter().map(|c| c[i]));
        }
        Self::new(self.rows, cols, data)
    }

    pub fn dot_row(&self, i: usize, v: &[f64]) -> f64 {
        dot(self.row(i), v)
    }

    fn find_intercept(&self) -> Option<usize> {
        if self.rows == 0 {
            return None;
        }
        (0..self.cols).find(|&j| (0..self.rows).all(|i| self.data[i * self.cols + j] == 1.0))
    }
}

/// Per-observation miscoverage levels, each strictly inside (0, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelVector(Vec<f64>);

impl LevelVector {
    pub fn new(alphas: Vec<f64>) -> Result<Self> {
        if let Some((i, a)) = alphas
            .iter()
            .enumerate()
            .find(|(_, a)| !(a.is_finite() && **a > 0.0 && **a < 1.0))
        {
            return Err(Error::Validation(format!(
                "level {i} is {a}, must lie strictly inside (0, 1)"
            )));
        }
        Ok(Self(alphas))
    }

    pub fn constant(alpha: f64, n: usize) -> Result<Self> {
        Self::new(vec![alpha; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn with_level(&self, alpha: f64) -> Result<Self> {
        let mut v = self.0.clone();
        v.push(alpha);
        Self::new(v)
    }
}

/// Optimal vertex of one pinball regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QRSolution {
    pub beta: Vec<f64>,
    /// Dual vector η, one entry per observation.
    pub duals: Vec<f64>,
    /// Indices of the interpolated observations, in basis-position order.
    pub basis: Vec<usize>,
    pub objective: f64,
}

impl QRSolution {
    pub fn fitted(&self, x: &[f64]) -> f64 {
        dot(x, &self.beta)
    }
}

pub fn pinball_loss(residual: f64, alpha: f64) -> f64 {
    if residual >= 0.0 {
        (1.0 - alpha) * residual
    } else {
        -alpha * residual
    }
}

/// Minimize `Σ_i ℓ_{α_i}(S_i − Φ_iᵀβ)` and return the optimal basis with its
/// dual vector.
///
/// When the vertex search fails on a degenerate instance the scores are
/// dithered by `1e-9 × span` and the problem is solved again; the returned
/// solution then belongs to the dithered scores.
pub fn solve_pinball_qr(
    features: &FeatureMatrix,
    scores: &[f64],
    levels: &LevelVector,
) -> Result<QRSolution> {
    validate_problem(features, scores, levels)?;
    match SimplexSolver::new(features, scores, levels.as_slice(), None)?.solve() {
        Ok(sol) => Ok(sol),
        Err(Error::NotConverged { .. }) => {
            let magnitude = default_dither_magnitude(scores);
            tracing::warn!(magnitude, "degenerate pinball regression, re-solving dithered scores");
            let dithered = dither(scores, magnitude, 0x5eed)?;
            SimplexSolver::new(features, &dithered, levels.as_slice(), None)?.solve()
        }
        Err(e) => Err(e),
    }
}

pub(crate) fn validate_problem(
    features: &FeatureMatrix,
    scores: &[f64],
    levels: &LevelVector,
) -> Result<()> {
    let n = features.rows();
    if scores.len() != n || levels.len() != n {
        return Err(Error::Validation(format!(
            "dimension mismatch: {n} feature rows, {} scores, {} levels",
            scores.len(),
            levels.len()
        )));
    }
    if features.cols() == 0 {
        return Err(Error::Validation("design has no columns".into()));
    }
    if n < features.cols() {
        return Err(Error::DegenerateDesign(format!(
            "{n} observations cannot determine {} coefficients",
            features.cols()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Validation(format!("score {i} is not finite")));
    }
    Ok(())
}

/// Add i.i.d. `Uniform[−magnitude, magnitude]` noise, deterministic in `seed`.
pub fn dither(scores: &[f64], magnitude: f64, seed: u64) -> Result<Vec<f64>> {
    if !(magnitude.is_finite() && magnitude > 0.0) {
        return Err(Error::Validation(format!(
            "dither magnitude must be positive and finite, got {magnitude}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(scores
        .iter()
        .map(|s| s + rng.gen_range(-magnitude..=magnitude))
        .collect())
}

/// `1e-9 × (max − min)` of the finite scores, or `1e-9` for constant data.
pub fn default_dither_magnitude(scores: &[f64]) -> f64 {
    let (lo, hi) = finite_range(scores);
    let span = hi - lo;
    if span > 0.0 {
        1e-9 * span
    } else {
        1e-9 * lo.abs().max(1.0)
    }
}

pub(crate) fn finite_range(values: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values.iter().filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo > hi {
        (0.0, 0.0)
    } else {
        (lo, hi)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_argmin_constant(scores: &[f64], alpha: f64) -> f64 {
        let obj = |c: f64| scores.iter().map(|s| pinball_loss(s - c, alpha)).sum::<f64>();
        (0..=4000)
            .map(|k| f64::from(k) * 1e-3)
            .min_by(|a, b| obj(*a).total_cmp(&obj(*b)))
            .unwrap()
    }

    #[test]
    fn median_of_three() {
        let f = FeatureMatrix::intercept_only(3);
        let lv = LevelVector::constant(0.5, 3).unwrap();
        let sol = solve_pinball_qr(&f, &[1.0, 2.0, 3.0], &lv).unwrap();
        let oracle = grid_argmin_constant(&[1.0, 2.0, 3.0], 0.5);
        assert!((oracle - 2.0).abs() < 1e-3);
        assert_eq!(sol.beta, vec![2.0]);
        assert_eq!(sol.basis, vec![1]);
    }

    #[test]
    fn constant_scores_fit_exactly() {
        let f = FeatureMatrix::intercept_only(5);
        let lv = LevelVector::new(vec![0.1, 0.3, 0.5, 0.7, 0.9]).unwrap();
        let sol = solve_pinball_qr(&f, &[4.25; 5], &lv).unwrap();
        assert_eq!(sol.beta, vec![4.25]);
        assert_eq!(sol.objective, 0.0);
    }

    #[test]
    fn upper_quantile_of_nine() {
        // subgradient at c: α·#{S < c} − (1−α)·#{S > c} must bracket 0
        let scores: Vec<f64> = (1..=9).map(f64::from).collect();
        let alpha = 0.1;
        let subgrad_ok = |c: f64| {
            let below = scores.iter().filter(|&&s| s < c).count() as f64;
            let above = scores.iter().filter(|&&s| s > c).count() as f64;
            let at = scores.iter().filter(|&&s| s == c).count() as f64;
            let lo = alpha * below - (1.0 - alpha) * (above + at);
            let hi = alpha * (below + at) - (1.0 - alpha) * above;
            lo <= 1e-12 && hi >= -1e-12
        };
        let candidates: Vec<f64> = scores.iter().copied().filter(|&c| subgrad_ok(c)).collect();
        assert_eq!(candidates, vec![9.0]);

        let f = FeatureMatrix::intercept_only(9);
        let lv = LevelVector::constant(alpha, 9).unwrap();
        let sol = solve_pinball_qr(&f, &scores, &lv).unwrap();
        assert_eq!(sol.beta, vec![9.0]);
    }

    #[test]
    fn rejects_non_finite_scores() {
        let f = FeatureMatrix::intercept_only(2);
        let lv = LevelVector::constant(0.5, 2).unwrap();
        let err = solve_pinball_qr(&f, &[1.0, f64::NAN], &lv).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn rank_deficient_design_is_reported() {
        let f = FeatureMatrix::from_rows(&[
            vec![1.0, 2.0],
            vec![1.0, 2.0],
            vec![1.0, 2.0],
        ])
        .unwrap();
        let lv = LevelVector::constant(0.5, 3).unwrap();
        let err = solve_pinball_qr(&f, &[1.0, 2.0, 3.0], &lv).unwrap_err();
        assert!(matches!(err, Error::DegenerateDesign(_)), "{err:?}");
    }

    #[test]
    fn levels_must_be_interior() {
        assert!(LevelVector::new(vec![0.0]).is_err());
        assert!(LevelVector::new(vec![1.0]).is_err());
        assert!(LevelVector::new(vec![0.5, f64::NAN]).is_err());
    }

    #[test]
    fn dither_contract() {
        assert!(dither(&[1.0], 0.0, 1).is_err());
        let a = dither(&[1.0, 1.0, 1.0], 1e-9, 7).unwrap();
        let b = dither(&[1.0, 1.0, 1.0], 1e-9, 7).unwrap();
        assert_eq!(a, b);
        for v in &a {
            assert!((v - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn dither_breaks_ties_over_many_seeds() {
        for seed in 0..1000 {
            let out = dither(&[1.0, 1.0, 1.0], 1e-9, seed).unwrap();
            assert!(out[0] != out[1] && out[1] != out[2] && out[0] != out[2], "seed {seed}");
        }
    }

    #[test]
    fn intercept_detection() {
        let f = FeatureMatrix::from_rows(&[vec![2.0, 1.0], vec![3.0, 1.0]]).unwrap();
        assert_eq!(f.intercept_col(), Some(1));
        let g = f.with_row(&[1.0, 0.0]).unwrap();
        assert_eq!(g.intercept_col(), None);
    }
}
