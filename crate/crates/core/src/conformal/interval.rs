use crate::error::{Error, Result};
use crate::qr::dot;
use serde::{Deserialize, Serialize};

/// Score functions for real-valued responses centered at zero.
#[derive(Debug, Clone, Copy)]
pub enum IntervalScore<'a> {
    /// `S = |Y|`.
    AbsResidual,
    /// `S = |Y| / |xᵀθ|`.
    Scaled { theta: &'a [f64] },
}

impl IntervalScore<'_> {
    pub fn score(&self, x: &[f64], y: f64) -> Result<f64> {
        Ok(y.abs() / self.scale(x)?)
    }

    fn scale(&self, x: &[f64]) -> Result<f64> {
        match self {
            IntervalScore::AbsResidual => Ok(1.0),
            IntervalScore::Scaled { theta } => {
                if theta.len() != x.len() {
                    return Err(Error::Validation(format!(
                        "theta has {} entries, features have {}",
                        theta.len(),
                        x.len()
                    )));
                }
                let s = dot(x, theta).abs();
                if s == 0.0 || !s.is_finite() {
                    return Err(Error::DegenerateScore(format!("|x'theta| = {s}")));
                }
                Ok(s)
            }
        }
    }
}

/// Symmetric interval `[lo, hi]`; empty when `lo > hi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn is_empty(&self) -> bool {
        self.lo > self.hi
    }

    pub fn length(&self) -> f64 {
        (self.hi - self.lo).max(0.0)
    }

    pub fn contains(&self, y: f64) -> bool {
        self.lo <= y && y <= self.hi
    }
}

/// `{y : S(x, y) ≤ τ}`.
pub fn predict_interval(family: IntervalScore<'_>, x: &[f64], tau: f64) -> Result<Interval> {
    if tau.is_nan() {
        return Err(Error::Validation("cutoff is NaN".into()));
    }
    let m = tau * family.scale(x)?;
    Ok(Interval { lo: -m, hi: m })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn abs_family() {
        let i = predict_interval(IntervalScore::AbsResidual, &[1.0], 250.0).unwrap();
        assert_eq!(i, Interval { lo: -250.0, hi: 250.0 });
        assert_eq!(i.length(), 500.0);
    }

    #[test]
    fn scaled_family() {
        let theta = [1.0, 0.5];
        let i = predict_interval(IntervalScore::Scaled { theta: &theta }, &[1.0, -6.0], 3.0).unwrap();
        assert_eq!(i, Interval { lo: -6.0, hi: 6.0 });
    }

    #[test]
    fn negative_cutoff_is_empty() {
        let i = predict_interval(IntervalScore::AbsResidual, &[1.0], -1.0).unwrap();
        assert!(i.is_empty());
        assert_eq!(i.length(), 0.0);
        assert!(!i.contains(0.0));
    }

    #[test]
    fn zero_scale_is_degenerate() {
        let theta = [1.0, -1.0];
        let err = predict_interval(IntervalScore::Scaled { theta: &theta }, &[2.0, 2.0], 1.0).unwrap_err();
        assert!(matches!(err, Error::DegenerateScore(_)));
    }

    #[test]
    fn membership_agrees_with_score() {
        let theta = [0.5, 2.0];
        let fam = IntervalScore::Scaled { theta: &theta };
        let x = [1.0, 1.5];
        let i = predict_interval(fam, &x, 0.8).unwrap();
        for k in -40..=40 {
            let y = f64::from(k) * 0.25;
            assert_eq!(i.contains(y), fam.score(&x, y).unwrap() <= 0.8, "y={y}");
        }
    }
}
