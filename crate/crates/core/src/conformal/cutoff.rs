//! Level-adaptive conditional cutoffs.
//!
//! The test point is appended to the calibration regression with an imputed
//! score `S` and its own level. Once `S` is above the cutoff the test row is
//! non-basic with a positive residual and the fitted coefficients no longer
//! depend on `S`, so the cutoff is the fitted value at that vertex. When the
//! optimum is not unique the smallest fitted value over the optimal face is
//! taken, which reproduces the split-conformal order statistic exactly.

use crate::error::{Error, Result};
use crate::qr::{
    default_dither_magnitude, dither, dot, finite_range, FaceOutcome, FeatureMatrix, LevelVector,
    SimplexSolver,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const MAX_ESCALATIONS: usize = 30;
const BISECTION_REL_TOL: f64 = 1e-8;

/// A calibrated threshold for one test point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cutoff {
    /// `+∞` is never stored here; unbounded cutoffs are reported as
    /// [`Error::UnboundedCutoff`].
    pub tau: f64,
    pub randomized: bool,
    /// Dual weight of the test row when its score equals `tau`.
    pub eta_test: f64,
    pub u: Option<f64>,
    pub alpha_test: f64,
}

/// Non-randomized cutoff with the regression vertex it was read from.
#[derive(Debug, Clone, PartialEq)]
pub struct CutoffVertex {
    pub tau: f64,
    /// Interpolated calibration rows; the test row is never among them.
    pub basis: Vec<usize>,
    pub beta: Vec<f64>,
}

/// Calibration data prepared for repeated cutoff queries.
///
/// Conformity scores equal to `−∞` (the output was acceptable with every
/// claim kept) are placed at a finite floor below all finite scores. Tied
/// scores are dithered by `1e-9 × span` so the regression has a unique
/// vertex path.
#[derive(Debug, Clone)]
pub struct ConditionalCalibrator {
    features: FeatureMatrix,
    scores: Vec<f64>,
    levels: Vec<f64>,
    sorted: Vec<f64>,
    span: f64,
    warm: Option<Vec<usize>>,
}

/// Map `−∞` scores to `min − max(span, 1)`; `+∞` and NaN are rejected.
pub fn floor_scores(scores: &[f64]) -> Result<Vec<f64>> {
    if let Some(i) = scores.iter().position(|s| s.is_nan() || *s == f64::INFINITY) {
        return Err(Error::Validation(format!(
            "calibration score {i} is {}; only finite values and -inf are allowed",
            scores[i]
        )));
    }
    let (lo, hi) = finite_range(scores);
    let floor = lo - (hi - lo).max(1.0);
    Ok(scores
        .iter()
        .map(|&s| if s.is_finite() { s } else { floor })
        .collect())
}

fn has_ties(sorted: &[f64]) -> bool {
    sorted.windows(2).any(|w| w[0] == w[1])
}

impl ConditionalCalibrator {
    pub fn new(features: FeatureMatrix, scores: &[f64], levels: &LevelVector) -> Result<Self> {
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
        if n == 0 {
            return Err(Error::InsufficientData { have: 0, need: 1 });
        }
        let mut scores = floor_scores(scores)?;
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        if has_ties(&sorted) {
            let magnitude = default_dither_magnitude(&scores);
            tracing::debug!(magnitude, "tied calibration scores, dithering");
            scores = dither(&scores, magnitude, n as u64)?;
            sorted = scores.clone();
            sorted.sort_by(f64::total_cmp);
        }
        let (lo, hi) = (sorted[0], sorted[n - 1]);
        let span = if hi > lo { hi - lo } else { lo.abs().max(1.0) };
        let levels = levels.as_slice().to_vec();
        let warm = if n >= features.cols() {
            SimplexSolver::new(&features, &scores, &levels, None)
                .and_then(|mut s| s.solve())
                .ok()
                .map(|sol| sol.basis)
        } else {
            None
        };
        Ok(Self {
            features,
            scores,
            levels,
            sorted,
            span,
            warm,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn features(&self) -> &FeatureMatrix {
        &self.features
    }

    /// Calibration scores after flooring and dithering.
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Optimal basis of the calibration regression without a test point.
    pub fn calibration_basis(&self) -> Option<&[usize]> {
        self.warm.as_deref()
    }

    fn augmented(&self, x: &[f64], alpha: f64) -> Result<(FeatureMatrix, Vec<f64>, Vec<f64>)> {
        if !(alpha.is_finite() && alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Validation(format!(
                "test level must lie strictly inside (0, 1), got {alpha}"
            )));
        }
        let aug = self.features.with_row(x)?;
        let mut levels = self.levels.clone();
        levels.push(alpha);
        let mut scores = self.scores.clone();
        scores.push(0.0);
        Ok((aug, scores, levels))
    }

    fn solve_at<'a>(
        &self,
        aug: &'a FeatureMatrix,
        scores: &[f64],
        levels: &'a [f64],
        warm: Option<&[usize]>,
    ) -> Result<SimplexSolver<'a>> {
        let mut solver = SimplexSolver::new(aug, scores, levels, warm)?;
        match solver.solve() {
            Ok(_) => Ok(solver),
            Err(Error::NotConverged { .. }) if warm.is_some() => {
                let mut cold = SimplexSolver::new(aug, scores, levels, None)?;
                cold.solve()?;
                Ok(cold)
            }
            Err(e) => Err(e),
        }
    }

    pub fn nonrandomized_vertex(&self, x: &[f64], alpha: f64) -> Result<CutoffVertex> {
        let (aug, mut scores, levels) = self.augmented(x, alpha)?;
        let n = self.len();
        let mut warm = self.warm.clone();
        let top = self.sorted[n - 1];
        for esc in 0..MAX_ESCALATIONS {
            let m = top + self.span * 2f64.powi(esc as i32);
            scores[n] = m;
            let mut solver = self.solve_at(&aug, &scores, &levels, warm.as_deref())?;
            if !solver.is_basic(n) && solver.residual(n) > 0.0 {
                if let FaceOutcome::Optimal = solver.minimize_on_face(x, n)? {
                    let tau = dot(x, solver.beta());
                    if tau < m {
                        return Ok(CutoffVertex {
                            tau,
                            basis: solver.basis().to_vec(),
                            beta: solver.beta().to_vec(),
                        });
                    }
                }
            }
            warm = Some(solver.basis().to_vec());
        }
        Err(Error::UnboundedCutoff {
            escalations: MAX_ESCALATIONS,
        })
    }

    /// Dual weight `η^S` of the test row when its imputed score is `s`.
    pub fn eta_test(&self, x: &[f64], alpha: f64, s: f64) -> Result<f64> {
        let (aug, mut scores, levels) = self.augmented(x, alpha)?;
        scores[self.len()] = s;
        let solver = self.solve_at(&aug, &scores, &levels, self.warm.as_deref())?;
        Ok(solver.eta(self.len()))
    }

    /// Smallest `τ` such that every test score `S ≤ τ` is covered.
    pub fn cutoff_nonrandomized(&self, x: &[f64], alpha: f64) -> Result<Cutoff> {
        let detail = self.nonrandomized_vertex(x, alpha)?;
        let eta_test = self.eta_test(x, alpha, detail.tau)?;
        Ok(Cutoff {
            tau: detail.tau,
            randomized: false,
            eta_test,
            u: None,
            alpha_test: alpha,
        })
    }

    /// Randomized cutoff with `U = −α + Unif[0, 1)` drawn from `seed`.
    pub fn cutoff_randomized(&self, x: &[f64], alpha: f64, seed: u64) -> Result<Cutoff> {
        let u = -alpha + ChaCha8Rng::seed_from_u64(seed).gen::<f64>();
        self.cutoff_randomized_with_draw(x, alpha, u)
    }

    /// `max{S : η^S ≤ u}` for an explicit draw `u ∈ [−α, 1−α]`.
    pub fn cutoff_randomized_with_draw(&self, x: &[f64], alpha: f64, u: f64) -> Result<Cutoff> {
        if !(u >= -alpha - 1e-12 && u <= 1.0 - alpha + 1e-12) {
            return Err(Error::Validation(format!(
                "draw {u} outside [-{alpha}, 1-{alpha}]"
            )));
        }
        let nonrand = self.nonrandomized_vertex(x, alpha);
        let (aug, mut scores, levels) = self.augmented(x, alpha)?;
        let n = self.len();
        let mut warm = self.warm.clone();
        let mut eta = |s: f64, warm: &mut Option<Vec<usize>>| -> Result<f64> {
            scores[n] = s;
            let solver = self.solve_at(&aug, &scores, &levels, warm.as_deref())?;
            *warm = Some(solver.basis().to_vec());
            Ok(solver.eta(n))
        };
        let done = |tau: f64, eta_test: f64| Cutoff {
            tau,
            randomized: true,
            eta_test,
            u: Some(u),
            alpha_test: alpha,
        };

        // `hi` is an exclusive bound: η exceeds u just above it
        let hi = match nonrand {
            Ok(detail) => {
                warm = Some(detail.basis.clone());
                let e = eta(detail.tau, &mut warm)?;
                if u >= 1.0 - alpha || e <= u {
                    return Ok(done(detail.tau, e));
                }
                detail.tau
            }
            Err(Error::UnboundedCutoff { escalations }) => {
                let big = self.sorted[n - 1] + self.span * 2f64.powi(MAX_ESCALATIONS as i32);
                if eta(big, &mut warm)? <= u {
                    return Err(Error::UnboundedCutoff { escalations });
                }
                big
            }
            Err(e) => return Err(e),
        };

        // largest calibration score strictly below hi with η ≤ u
        let below = self.sorted.partition_point(|&s| s < hi);
        let (mut a, mut b) = (0usize, below);
        let mut found_eta = f64::NAN;
        while a < b {
            let mid = (a + b) / 2;
            let e = eta(self.sorted[mid], &mut warm)?;
            if e <= u {
                a = mid + 1;
                found_eta = e;
            } else {
                b = mid;
            }
        }
        // η is not unique where S ties a breakpoint, so keep the value that
        // certified the lower end rather than re-solving there
        let (mut lo, mut lo_eta) = if a > 0 {
            (self.sorted[a - 1], found_eta)
        } else {
            let mut k = 0;
            loop {
                let s = self.sorted[0] - self.span * 2f64.powi(k);
                let e = eta(s, &mut warm)?;
                if e <= u {
                    break (s, e);
                }
                k += 1;
                if k as usize >= MAX_ESCALATIONS {
                    return Err(Error::UnboundedCutoff {
                        escalations: MAX_ESCALATIONS,
                    });
                }
            }
        };
        let mut hi = if a < below { self.sorted[a] } else { hi };

        let tol = BISECTION_REL_TOL * self.span;
        while hi - lo > tol {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            let e = eta(mid, &mut warm)?;
            if e <= u {
                lo = mid;
                lo_eta = e;
            } else {
                hi = mid;
            }
        }
        Ok(done(lo, lo_eta))
    }
}

/// Non-randomized cutoff for one test point.
pub fn cutoff_nonrandomized(
    calib_features: &FeatureMatrix,
    calib_scores: &[f64],
    calib_levels: &LevelVector,
    test_features: &[f64],
    alpha_test: f64,
) -> Result<Cutoff> {
    ConditionalCalibrator::new(calib_features.clone(), calib_scores, calib_levels)?
        .cutoff_nonrandomized(test_features, alpha_test)
}

/// Randomized cutoff for one test point; the draw is deterministic in `seed`.
pub fn cutoff_randomized(
    calib_features: &FeatureMatrix,
    calib_scores: &[f64],
    calib_levels: &LevelVector,
    test_features: &[f64],
    alpha_test: f64,
    seed: u64,
) -> Result<Cutoff> {
    ConditionalCalibrator::new(calib_features.clone(), calib_scores, calib_levels)?
        .cutoff_randomized(test_features, alpha_test, seed)
}

/// `Ok(τ)` for bounded cutoffs and `+∞` for an unbounded one.
pub fn tau_or_infinite(result: Result<Cutoff>) -> Result<f64> {
    match result {
        Ok(c) => Ok(c.tau),
        Err(Error::UnboundedCutoff { .. }) => Ok(f64::INFINITY),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn order_statistic(scores: &[f64], alpha: f64) -> f64 {
        let mut s = scores.to_vec();
        s.sort_by(f64::total_cmp);
        let k = ((1.0 - alpha) * (s.len() + 1) as f64 - 1e-9).ceil() as usize;
        s[k - 1]
    }

    fn intercept(n: usize, alpha: f64) -> (FeatureMatrix, LevelVector) {
        (
            FeatureMatrix::intercept_only(n),
            LevelVector::constant(alpha, n).unwrap(),
        )
    }

    #[test]
    fn four_scores_at_forty_percent() {
        let scores = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(order_statistic(&scores, 0.4), 3.0);
        let (f, lv) = intercept(4, 0.4);
        let c = cutoff_nonrandomized(&f, &scores, &lv, &[1.0], 0.4).unwrap();
        assert_eq!(c.tau, 3.0);
        assert!(!c.randomized);
    }

    #[test]
    fn ninety_nine_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let scores: Vec<f64> = (0..99).map(|_| normal.sample(&mut rng)).collect();
        let (f, lv) = intercept(99, 0.1);
        let c = cutoff_nonrandomized(&f, &scores, &lv, &[1.0], 0.1).unwrap();
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(c.tau, sorted[89]);
        assert_eq!(c.tau, order_statistic(&scores, 0.1));
    }

    #[test]
    fn intercept_only_matches_order_statistic_for_many_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for n in 3..40 {
            for &alpha in &[0.1, 0.2, 0.25, 0.5] {
                if (1.0 - alpha) * (n + 1) as f64 > n as f64 {
                    continue;
                }
                let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
                let (f, lv) = intercept(n, alpha);
                let c = cutoff_nonrandomized(&f, &scores, &lv, &[1.0], alpha).unwrap();
                assert_eq!(c.tau, order_statistic(&scores, alpha), "n={n} alpha={alpha}");
            }
        }
    }

    #[test]
    fn too_few_points_is_unbounded() {
        // ⌈0.9·4⌉ = 4 > 3 calibration points
        let (f, lv) = intercept(3, 0.1);
        let err = cutoff_nonrandomized(&f, &[1.0, 2.0, 3.0], &lv, &[1.0], 0.1).unwrap_err();
        assert!(matches!(err, Error::UnboundedCutoff { .. }));
    }

    #[test]
    fn zero_test_row_gives_zero() {
        let f = FeatureMatrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]]).unwrap();
        let lv = LevelVector::constant(0.3, 4).unwrap();
        let c = cutoff_nonrandomized(&f, &[1.0, 3.0, 2.0, 5.0], &lv, &[0.0], 0.3).unwrap();
        assert_eq!(c.tau, 0.0);
    }

    #[test]
    fn boundary_draw_matches_nonrandomized() {
        let scores: Vec<f64> = (1..=20).map(f64::from).collect();
        let (f, lv) = intercept(20, 0.2);
        let cal = ConditionalCalibrator::new(f, &scores, &lv).unwrap();
        let nr = cal.cutoff_nonrandomized(&[1.0], 0.2).unwrap();
        let r = cal.cutoff_randomized_with_draw(&[1.0], 0.2, 0.8).unwrap();
        assert_eq!(r.tau, nr.tau);
        assert!(r.randomized);
        assert_eq!(r.u, Some(0.8));
    }

    #[test]
    fn randomized_intercept_only_lands_on_order_statistics() {
        // intercept only: η^S only jumps where S crosses a calibration score
        let scores: Vec<f64> = (1..=19).map(f64::from).collect();
        let (f, lv) = intercept(19, 0.1);
        let cal = ConditionalCalibrator::new(f, &scores, &lv).unwrap();
        let nr = cal.cutoff_nonrandomized(&[1.0], 0.1).unwrap().tau;
        for seed in 0..20 {
            let c = cal.cutoff_randomized(&[1.0], 0.1, seed).unwrap();
            assert!(c.tau <= nr);
            let nearest = scores
                .iter()
                .map(|s| (s - c.tau).abs())
                .fold(f64::INFINITY, f64::min);
            assert!(nearest <= 1e-6 * 18.0, "seed {seed}: tau {}", c.tau);
            assert!(c.eta_test <= c.u.unwrap() + 1e-12);
        }
    }

    #[test]
    fn eta_is_monotone_in_imputed_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..30).map(|_| vec![1.0, rng.gen_range(0.0..2.0)]).collect();
        let scores: Vec<f64> = rows.iter().map(|r| r[1] + rng.gen_range(-1.0..1.0)).collect();
        let f = FeatureMatrix::from_rows(&rows).unwrap();
        let lv = LevelVector::constant(0.2, 30).unwrap();
        let cal = ConditionalCalibrator::new(f, &scores, &lv).unwrap();
        let x = [1.0, 0.7];
        let mut prev = f64::NEG_INFINITY;
        for k in 0..200 {
            let s = -4.0 + 0.05 * f64::from(k);
            let e = cal.eta_test(&x, 0.2, s).unwrap();
            assert!(e >= prev - 1e-9, "s={s}: {e} < {prev}");
            prev = e;
        }
        assert!((prev - 0.8).abs() < 1e-9);
    }

    #[test]
    fn negative_infinity_scores_are_floored() {
        let s = floor_scores(&[f64::NEG_INFINITY, 1.0, 3.0]).unwrap();
        assert_eq!(s, vec![-1.0, 1.0, 3.0]);
        assert!(floor_scores(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn tied_scores_still_give_order_statistic() {
        let scores = [1.0, 2.0, 2.0, 2.0, 5.0, 6.0, 7.0, 8.0, 9.0];
        let (f, lv) = intercept(9, 0.5);
        let c = cutoff_nonrandomized(&f, &scores, &lv, &[1.0], 0.5).unwrap();
        assert!((c.tau - order_statistic(&scores, 0.5)).abs() <= 1e-8 * 8.0);
    }

    #[test]
    fn bad_draw_is_rejected() {
        let (f, lv) = intercept(5, 0.2);
        let cal = ConditionalCalibrator::new(f, &[1.0, 2.0, 3.0, 4.0, 5.0], &lv).unwrap();
        assert!(cal.cutoff_randomized_with_draw(&[1.0], 0.2, 0.9).is_err());
        assert!(cal.cutoff_nonrandomized(&[1.0], 1.0).is_err());
    }
}
