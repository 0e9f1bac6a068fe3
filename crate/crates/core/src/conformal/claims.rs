use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Arc;

/// Claims parsed from one response, with a confidence score and a 0/1
/// annotation (1 = substantiated) per claim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ScoredClaimSet {
    pub scores: Vec<f64>,
    pub annotations: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub texts: Option<Vec<String>>,
}

impl ScoredClaimSet {
    pub fn new(scores: Vec<f64>, annotations: Vec<u8>) -> Result<Self> {
        let set = Self {
            scores,
            annotations,
            texts: None,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scores.len() != self.annotations.len() {
            return Err(Error::Validation(format!(
                "{} claim scores but {} annotations",
                self.scores.len(),
                self.annotations.len()
            )));
        }
        if let Some(t) = &self.texts {
            if t.len() != self.scores.len() {
                return Err(Error::Validation("claim texts length mismatch".into()));
            }
        }
        if self.annotations.iter().any(|&w| w > 1) {
            return Err(Error::Validation("annotations must be 0 or 1".into()));
        }
        if self.scores.iter().any(|s| s.is_nan()) {
            return Err(Error::Validation("claim score is NaN".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn with_scores(&self, scores: Vec<f64>) -> Self {
        Self {
            scores,
            annotations: self.annotations.clone(),
            texts: self.texts.clone(),
        }
    }
}

/// Set function on retained claims; must vanish on the empty set and never
/// decrease as claims are added.
pub type CustomLossFn = dyn Fn(&ScoredClaimSet, &[usize]) -> f64 + Send + Sync;

#[derive(Clone)]
pub enum LossKind {
    /// Number of retained claims annotated false.
    CountFalse,
    Custom(Arc<CustomLossFn>),
}

impl fmt::Debug for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossKind::CountFalse => write!(f, "CountFalse"),
            LossKind::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

/// A monotone loss together with its tolerance λ.
#[derive(Debug, Clone)]
pub struct MonotoneLoss {
    pub kind: LossKind,
    pub budget: f64,
}

impl MonotoneLoss {
    pub fn count_false(budget: f64) -> Self {
        Self {
            kind: LossKind::CountFalse,
            budget,
        }
    }

    pub fn custom(budget: f64, f: impl Fn(&ScoredClaimSet, &[usize]) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            kind: LossKind::Custom(Arc::new(f)),
            budget,
        }
    }

    pub fn evaluate(&self, claims: &ScoredClaimSet, retained: &[usize]) -> f64 {
        match &self.kind {
            LossKind::CountFalse => retained
                .iter()
                .filter(|&&j| claims.annotations[j] == 0)
                .count() as f64,
            LossKind::Custom(f) => f(claims, retained),
        }
    }

    pub fn is_controlled(&self, claims: &ScoredClaimSet, retained: &[usize]) -> bool {
        self.evaluate(claims, retained) <= self.budget
    }
}

/// Claims strictly above the threshold: `{j : p_j > τ}`.
pub fn filter(claims: &ScoredClaimSet, tau: f64) -> Vec<usize> {
    claims
        .scores
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > tau)
        .map(|(j, _)| j)
        .collect()
}

/// Conformity score with the claim whose confidence attains it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConformityScore {
    /// `−∞` when the loss is controlled with every claim retained.
    pub value: f64,
    /// Lowest-index claim with `p_j = value`; `None` for the `−∞` sentinel.
    pub active_claim: Option<usize>,
}

/// Minimum loss-controlling threshold `inf{τ : L({p_j > τ}) ≤ λ}`.
pub fn score_from_loss(claims: &ScoredClaimSet, loss: &MonotoneLoss) -> Result<f64> {
    conformity_score(claims, loss).map(|c| c.value)
}

pub fn conformity_score(claims: &ScoredClaimSet, loss: &MonotoneLoss) -> Result<ConformityScore> {
    claims.validate()?;
    if !(loss.budget >= 0.0) {
        return Err(Error::Validation(format!(
            "loss budget must be non-negative, got {}",
            loss.budget
        )));
    }
    let k = claims.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| claims.scores[a].total_cmp(&claims.scores[b]).then(a.cmp(&b)));

    match &loss.kind {
        LossKind::CountFalse => {
            // walk thresholds upward; false claims above the current one
            let mut false_above = claims.annotations.iter().filter(|&&w| w == 0).count() as f64;
            if false_above <= loss.budget {
                return Ok(ConformityScore {
                    value: f64::NEG_INFINITY,
                    active_claim: None,
                });
            }
            let mut idx = 0;
            while idx < k {
                let v = claims.scores[order[idx]];
                let first = order[idx];
                while idx < k && claims.scores[order[idx]] == v {
                    if claims.annotations[order[idx]] == 0 {
                        false_above -= 1.0;
                    }
                    idx += 1;
                }
                if false_above <= loss.budget {
                    return Ok(ConformityScore {
                        value: v,
                        active_claim: Some(first),
                    });
                }
            }
            unreachable!("empty retained set has zero false claims")
        }
        LossKind::Custom(_) => {
            if loss.evaluate(claims, &[]) != 0.0 {
                return Err(Error::Contract("custom loss is nonzero on the empty set".into()));
            }
            let mut prev = loss.evaluate(claims, &order);
            if prev <= loss.budget {
                return Ok(ConformityScore {
                    value: f64::NEG_INFINITY,
                    active_claim: None,
                });
            }
            let mut idx = 0;
            let mut found = None;
            while idx < k {
                let v = claims.scores[order[idx]];
                let first = order[idx];
                while idx < k && claims.scores[order[idx]] == v {
                    idx += 1;
                }
                let l = loss.evaluate(claims, &order[idx..]);
                if l > prev + 1e-12 {
                    return Err(Error::Contract(format!(
                        "custom loss increased from {prev} to {l} when claims were removed"
                    )));
                }
                prev = l;
                if found.is_none() && l <= loss.budget {
                    found = Some(ConformityScore {
                        value: v,
                        active_claim: Some(first),
                    });
                }
            }
            Ok(found.expect("empty retained set has zero loss"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example() -> ScoredClaimSet {
        ScoredClaimSet::new(vec![0.9, 0.7, 0.5, 0.3], vec![1, 0, 1, 0]).unwrap()
    }

    /// Try every candidate threshold (−∞ and each score) in increasing order.
    fn brute_force(claims: &ScoredClaimSet, loss: &MonotoneLoss) -> f64 {
        let mut cands = vec![f64::NEG_INFINITY];
        let mut s = claims.scores.clone();
        s.sort_by(f64::total_cmp);
        cands.extend(s);
        for t in cands {
            if loss.is_controlled(claims, &filter(claims, t)) {
                return t;
            }
        }
        f64::INFINITY
    }

    #[test]
    fn all_true_gives_sentinel() {
        let c = ScoredClaimSet::new(vec![0.2, 0.8], vec![1, 1]).unwrap();
        assert_eq!(score_from_loss(&c, &MonotoneLoss::count_false(0.0)).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn zero_false_budget() {
        let c = example();
        let loss = MonotoneLoss::count_false(0.0);
        assert_eq!(brute_force(&c, &loss), 0.7);
        let s = conformity_score(&c, &loss).unwrap();
        assert_eq!(s.value, 0.7);
        assert_eq!(s.active_claim, Some(1));
    }

    #[test]
    fn one_false_budget() {
        let c = example();
        let loss = MonotoneLoss::count_false(1.0);
        assert_eq!(brute_force(&c, &loss), 0.3);
        assert_eq!(score_from_loss(&c, &loss).unwrap(), 0.3);
    }

    #[test]
    fn empty_set_is_controlled() {
        let c = ScoredClaimSet::default();
        assert_eq!(score_from_loss(&c, &MonotoneLoss::count_false(0.0)).unwrap(), f64::NEG_INFINITY);
        assert!(filter(&c, 0.0).is_empty());
    }

    #[test]
    fn filter_is_strict() {
        let c = ScoredClaimSet::new(vec![0.9, 0.7, 0.3], vec![1, 1, 1]).unwrap();
        assert_eq!(filter(&c, 0.7), vec![0]);
        assert_eq!(filter(&c, f64::NEG_INFINITY), vec![0, 1, 2]);
        assert!(filter(&c, f64::INFINITY).is_empty());
    }

    #[test]
    fn custom_loss_matches_count_false() {
        let c = example();
        let custom = MonotoneLoss::custom(0.0, |c: &ScoredClaimSet, r: &[usize]| {
            r.iter().filter(|&&j| c.annotations[j] == 0).count() as f64
        });
        assert_eq!(score_from_loss(&c, &custom).unwrap(), 0.7);
    }

    #[test]
    fn non_monotone_custom_loss_is_rejected() {
        let c = example();
        // rewards retaining false claims: decreases as the set grows
        let bad = MonotoneLoss::custom(0.0, |c: &ScoredClaimSet, r: &[usize]| {
            let f = r.iter().filter(|&&j| c.annotations[j] == 0).count() as f64;
            if r.is_empty() { 0.0 } else { 3.0 - f }
        });
        assert!(matches!(score_from_loss(&c, &bad), Err(Error::Contract(_))));
    }

    #[test]
    fn ties_pick_lowest_index() {
        let c = ScoredClaimSet::new(vec![0.5, 0.9, 0.5], vec![1, 0, 0]).unwrap();
        let s = conformity_score(&c, &MonotoneLoss::count_false(0.0)).unwrap();
        assert_eq!(s.value, 0.9);
        assert_eq!(s.active_claim, Some(1));
        let c = ScoredClaimSet::new(vec![0.5, 0.2, 0.5], vec![0, 1, 0]).unwrap();
        let s = conformity_score(&c, &MonotoneLoss::count_false(0.0)).unwrap();
        assert_eq!(s.value, 0.5);
        assert_eq!(s.active_claim, Some(0));
    }
}
