//! Data-adaptive choice of the miscoverage level.
//!
//! A held-out split is divided into two folds. Fold 1 calibrates a
//! fixed-level cutoff at each grid level, fold 2 records the smallest level
//! from which a quality criterion holds at every larger level, and a quantile
//! regression of those levels on the features gives `α(·)`.

mod augment;

pub use augment::{augment_features, append_level_terms, drop_dependent_columns, LevelTerm};

use crate::conformal::{filter, tau_or_infinite, ConditionalCalibrator, Interval, ScoredClaimSet};
use crate::error::{Error, Result};
use crate::qr::{dot, solve_pinball_qr, FeatureMatrix, LevelVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Binary acceptability of a filtered output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "threshold", rename_all = "snake_case")]
pub enum QualityCriterion {
    /// Fraction of claims retained is at least `ρ`. Outputs without claims
    /// meet it trivially.
    RetentionAtLeast(f64),
    /// Prediction interval no longer than `L`.
    IntervalLengthAtMost(f64),
}

impl QualityCriterion {
    pub fn threshold(&self) -> f64 {
        match *self {
            QualityCriterion::RetentionAtLeast(r) | QualityCriterion::IntervalLengthAtMost(r) => r,
        }
    }

    pub fn evaluate_claims(&self, claims: &ScoredClaimSet, tau: f64) -> Result<bool> {
        match *self {
            QualityCriterion::RetentionAtLeast(rho) => {
                if claims.is_empty() {
                    return Ok(true);
                }
                let kept = filter(claims, tau).len() as f64;
                Ok(kept / claims.len() as f64 >= rho)
            }
            QualityCriterion::IntervalLengthAtMost(_) => Err(Error::Validation(
                "interval-length criterion applied to a claim set".into(),
            )),
        }
    }

    pub fn evaluate_interval(&self, interval: &Interval) -> Result<bool> {
        match *self {
            QualityCriterion::IntervalLengthAtMost(l) => Ok(interval.length() <= l),
            QualityCriterion::RetentionAtLeast(_) => Err(Error::Validation(
                "retention criterion applied to an interval".into(),
            )),
        }
    }
}

/// What the criterion is evaluated on for each held-out point.
#[derive(Debug, Clone, Copy)]
pub enum QualityInputs<'a> {
    Claims(&'a [ScoredClaimSet]),
    /// Interval half-width is `τ · scale_i`.
    Intervals { scales: &'a [f64] },
}

/// Held-out data for estimating `α(·)`.
#[derive(Debug, Clone, Copy)]
pub struct LevelData<'a> {
    pub features: &'a FeatureMatrix,
    /// Conformity scores (`−∞` allowed).
    pub scores: &'a [f64],
    pub inputs: QualityInputs<'a>,
}

impl LevelData<'_> {
    fn len(&self) -> usize {
        self.features.rows()
    }

    fn quality(&self, criterion: &QualityCriterion, i: usize, tau: f64) -> Result<bool> {
        match self.inputs {
            QualityInputs::Claims(c) => criterion.evaluate_claims(&c[i], tau),
            QualityInputs::Intervals { scales } => {
                let m = tau * scales[i];
                criterion.evaluate_interval(&Interval { lo: -m, hi: m })
            }
        }
    }
}

/// Clamped linear level function `x ↦ clamp(xᵀγ, lo, hi)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelFunction {
    pub coefficients: Vec<f64>,
    pub fit_quantile: f64,
    pub truncation: (f64, f64),
}

impl LevelFunction {
    pub fn evaluate(&self, x: &[f64]) -> f64 {
        dot(x, &self.coefficients).clamp(self.truncation.0, self.truncation.1)
    }

    pub fn evaluate_all(&self, features: &FeatureMatrix) -> Vec<f64> {
        (0..features.rows())
            .map(|i| self.evaluate(features.row(i)))
            .collect()
    }
}

/// Settings for [`estimate_level_function`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSettings {
    pub grid: Vec<f64>,
    pub fit_quantile: f64,
    pub truncation: (f64, f64),
}

impl Default for LevelSettings {
    fn default() -> Self {
        Self {
            grid: default_grid(),
            fit_quantile: 0.85,
            truncation: (0.1, 0.99),
        }
    }
}

impl LevelSettings {
    /// 50-level grid, 0.85 quantile, truncation to `[0.1, 0.5]`.
    pub fn medical_preset() -> Self {
        Self {
            grid: even_grid(50),
            fit_quantile: 0.85,
            truncation: (0.1, 0.5),
        }
    }
}

/// `{0.01, 0.02, …, 0.99}`.
pub fn default_grid() -> Vec<f64> {
    (1..=99).map(|k| f64::from(k) / 100.0).collect()
}

/// `k` evenly spaced levels strictly inside (0, 1).
pub fn even_grid(k: usize) -> Vec<f64> {
    (1..=k).map(|j| j as f64 / (k + 1) as f64).collect()
}

/// Smallest grid level from which the criterion holds at every larger level;
/// `1` when it fails at the largest level.
pub fn alpha_star(grid: &[f64], quality: &[bool]) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::Validation("empty level grid".into()));
    }
    if grid.len() != quality.len() {
        return Err(Error::Validation(format!(
            "{} grid levels but {} quality flags",
            grid.len(),
            quality.len()
        )));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Validation("level grid must be strictly ascending".into()));
    }
    let mut out = 1.0;
    for (a, &q) in grid.iter().zip(quality).rev() {
        if !q {
            break;
        }
        out = *a;
    }
    Ok(out)
}

/// Fitted level function with the per-point targets it was fit to.
#[derive(Debug, Clone)]
pub struct LevelEstimate {
    pub function: LevelFunction,
    /// `α*` for each fold-2 point, aligned with `fold2`.
    pub alpha_star: Vec<f64>,
    pub fold1: Vec<usize>,
    pub fold2: Vec<usize>,
}

pub fn estimate_level_function(
    data: &LevelData<'_>,
    criterion: QualityCriterion,
    settings: &LevelSettings,
    seed: u64,
) -> Result<LevelEstimate> {
    let n = data.len();
    let d = data.features.cols();
    if data.scores.len() != n {
        return Err(Error::Validation(format!(
            "{n} feature rows but {} scores",
            data.scores.len()
        )));
    }
    let inputs_len = match data.inputs {
        QualityInputs::Claims(c) => c.len(),
        QualityInputs::Intervals { scales } => scales.len(),
    };
    if inputs_len != n {
        return Err(Error::Validation(format!(
            "{n} feature rows but {inputs_len} quality inputs"
        )));
    }
    let (lo, hi) = settings.truncation;
    if !(lo > 0.0 && lo <= hi && hi < 1.0) {
        return Err(Error::Validation(format!(
            "truncation [{lo}, {hi}] must lie inside (0, 1)"
        )));
    }
    if !(settings.fit_quantile > 0.0 && settings.fit_quantile < 1.0) {
        return Err(Error::Validation("fit_quantile must lie in (0, 1)".into()));
    }
    let grid = &settings.grid;
    alpha_star(grid, &vec![true; grid.len()])?;
    if grid.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
        return Err(Error::Validation("grid levels must lie in (0, 1)".into()));
    }

    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let fold2 = idx.split_off(n / 2);
    let fold1 = idx;
    let need = 5 * d;
    let smaller = fold1.len().min(fold2.len());
    if smaller < need {
        return Err(Error::InsufficientData { have: smaller, need });
    }

    let f1 = data.features.select_rows(&fold1);
    let s1: Vec<f64> = fold1.iter().map(|&i| data.scores[i]).collect();
    // quality[a][k] for grid level a and fold-2 point k
    let quality: Vec<Vec<bool>> = grid
        .par_iter()
        .map(|&alpha| -> Result<Vec<bool>> {
            let cal = ConditionalCalibrator::new(f1.clone(), &s1, &LevelVector::constant(alpha, fold1.len())?)?;
            fold2
                .iter()
                .map(|&i| {
                    let tau = tau_or_infinite(cal.cutoff_nonrandomized(data.features.row(i), alpha))?;
                    data.quality(&criterion, i, tau)
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let targets: Vec<f64> = (0..fold2.len())
        .map(|k| {
            let q: Vec<bool> = quality.iter().map(|row| row[k]).collect();
            alpha_star(grid, &q)
        })
        .collect::<Result<_>>()?;

    let f2 = data.features.select_rows(&fold2);
    let fit = solve_pinball_qr(
        &f2,
        &targets,
        &LevelVector::constant(1.0 - settings.fit_quantile, fold2.len())?,
    )?;
    Ok(LevelEstimate {
        function: LevelFunction {
            coefficients: fit.beta,
            fit_quantile: settings.fit_quantile,
            truncation: settings.truncation,
        },
        alpha_star: targets,
        fold1,
        fold2,
    })
}
