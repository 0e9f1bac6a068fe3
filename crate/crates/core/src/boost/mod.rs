//! Gradient-based tuning of parameterized scores through the conditional
//! cutoff.
//!
//! Each step splits the boosting data at random, fits the calibration
//! regression on the first fold and scores a smoothed quality objective on
//! the second. The cutoff at a held-out point is `xᵀΦ_B⁻¹S_B(θ)` for the
//! optimal basis `B`, which gives its derivative in `θ` in closed form.

mod adam;
mod gradient;

pub use adam::{adam_step, AdamState};
pub use gradient::tau_gradient;

use crate::conformal::{conformity_score, floor_scores, ConditionalCalibrator, MonotoneLoss, ScoredClaimSet};
use crate::error::{Error, Result};
use crate::qr::{default_dither_magnitude, dot, solve_pinball_qr, FeatureMatrix, LevelVector};
use crate::seed::derive_seed;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Below this `|xᵀθ|` the scaled score is clamped and penalized.
pub const SCALE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    /// Claim confidence `p_θ = θᵀ(base scores)`.
    LinearClaimEnsemble,
    /// `S_θ(x, y) = |y| / |xᵀθ|`.
    ScaledResidual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamScoreFamily {
    pub kind: FamilyKind,
    pub theta: Vec<f64>,
    #[serde(default)]
    pub base_score_names: Vec<String>,
}

impl ParamScoreFamily {
    /// Equal weights over the named base scores.
    pub fn uniform_ensemble(names: Vec<String>) -> Self {
        let k = names.len().max(1);
        Self {
            kind: FamilyKind::LinearClaimEnsemble,
            theta: vec![1.0 / k as f64; names.len()],
            base_score_names: names,
        }
    }

    /// All-ones scale direction.
    pub fn scaled_residual(dim: usize) -> Self {
        Self {
            kind: FamilyKind::ScaledResidual,
            theta: vec![1.0; dim],
            base_score_names: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoostObjective {
    ClaimRetention,
    IntervalLength,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoostConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub sigmoid_temperature: f64,
    /// Fraction of the boosting data used to fit the regression each step.
    pub split_fraction: f64,
    pub seed: u64,
    /// Per-point augmented basis instead of the first-fold basis.
    pub use_full_basis: bool,
}

impl Default for BoostConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            steps: 500,
            sigmoid_temperature: 1.0,
            split_fraction: 0.5,
            seed: 0,
            use_full_basis: false,
        }
    }
}

impl BoostConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Validation("learning_rate must be positive".into()));
        }
        if !(self.sigmoid_temperature > 0.0 && self.sigmoid_temperature.is_finite()) {
            return Err(Error::Validation("sigmoid_temperature must be positive".into()));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::Validation("split_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Claims of one output, each with a vector of base confidence scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleClaims {
    pub base_scores: Vec<Vec<f64>>,
    pub annotations: Vec<u8>,
}

impl EnsembleClaims {
    pub fn combined(&self, theta: &[f64]) -> Result<ScoredClaimSet> {
        ScoredClaimSet::new(
            self.base_scores.iter().map(|b| dot(b, theta)).collect(),
            self.annotations.clone(),
        )
    }
}

#[derive(Debug, Clone, Copy)]
pub enum BoostData<'a> {
    Claims {
        features: &'a FeatureMatrix,
        claims: &'a [EnsembleClaims],
        loss: &'a MonotoneLoss,
    },
    Regression {
        features: &'a FeatureMatrix,
        /// Covariates entering `xᵀθ`.
        score_features: &'a FeatureMatrix,
        y: &'a [f64],
    },
}

impl BoostData<'_> {
    fn features(&self) -> &FeatureMatrix {
        match self {
            BoostData::Claims { features, .. } | BoostData::Regression { features, .. } => features,
        }
    }

    fn len(&self) -> usize {
        self.features().rows()
    }
}

/// Optimized parameters with the per-step objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostResult {
    pub theta: Vec<f64>,
    pub objective_trace: Vec<f64>,
    /// Held-out points skipped because their cutoff was unbounded.
    pub skipped_points: usize,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn clamp_scale(z: f64) -> (f64, bool) {
    if z.abs() < SCALE_FLOOR {
        (if z < 0.0 { -SCALE_FLOOR } else { SCALE_FLOOR }, true)
    } else {
        (z, false)
    }
}

/// Conformity scores under `θ` and their gradients (zero at `−∞` scores).
struct ScoreSet {
    value: Vec<f64>,
    grad: Vec<Vec<f64>>,
}

fn evaluate_scores(data: &BoostData<'_>, theta: &[f64]) -> Result<ScoreSet> {
    let p = theta.len();
    let pairs: Vec<(f64, Vec<f64>)> = match *data {
        BoostData::Claims { claims, loss, .. } => claims
            .par_iter()
            .map(|c| {
                let s = conformity_score(&c.combined(theta)?, loss)?;
                let g = match s.active_claim {
                    Some(j) => c.base_scores[j].clone(),
                    None => vec![0.0; p],
                };
                Ok((s.value, g))
            })
            .collect::<Result<_>>()?,
        BoostData::Regression { score_features, y, .. } => (0..y.len())
            .map(|i| {
                let x = score_features.row(i);
                let (z, clamped) = clamp_scale(dot(x, theta));
                let s = y[i].abs() / z.abs();
                let g = if clamped {
                    vec![0.0; p]
                } else {
                    let c = -y[i].abs() * z.signum() / (z * z);
                    x.iter().map(|v| c * v).collect()
                };
                (s, g)
            })
            .collect(),
    };
    let (value, grad) = pairs.into_iter().unzip();
    Ok(ScoreSet { value, grad })
}

/// Cutoff rule used inside the training loop.
#[derive(Debug, Clone, Copy)]
enum CutoffRule {
    Conditional { full_basis: bool },
    Marginal { alpha: f64 },
}

/// Cutoff and its gradient at each fold-2 point (`None` when unbounded).
type HeldOut = Vec<Option<(f64, Vec<f64>)>>;

fn fold_cutoffs(
    data: &BoostData<'_>,
    scores: &ScoreSet,
    levels: &[f64],
    fold1: &[usize],
    fold2: &[usize],
    rule: CutoffRule,
    s1: &[f64],
) -> Result<HeldOut> {
    let features = data.features();
    let f1 = features.select_rows(fold1);
    let l1: Vec<f64> = fold1.iter().map(|&i| levels[i]).collect();
    let grad_of = |basis: &[usize]| -> Vec<Vec<f64>> {
        basis.iter().map(|&k| scores.grad[fold1[k]].clone()).collect()
    };
    match rule {
        CutoffRule::Conditional { full_basis: false } => {
            let sol = solve_pinball_qr(&f1, s1, &LevelVector::new(l1)?)?;
            let dsb = grad_of(&sol.basis);
            fold2
                .iter()
                .map(|&i| {
                    let x = features.row(i);
                    let g = tau_gradient(&sol.basis, &f1, &dsb, x)?;
                    Ok(Some((dot(x, &sol.beta), g)))
                })
                .collect()
        }
        CutoffRule::Conditional { full_basis: true } => {
            let cal = ConditionalCalibrator::new(f1.clone(), s1, &LevelVector::new(l1)?)?;
            fold2
                .par_iter()
                .map(|&i| {
                    let x = features.row(i);
                    match cal.nonrandomized_vertex(x, levels[i]) {
                        Ok(v) => {
                            let g = tau_gradient(&v.basis, &f1, &grad_of(&v.basis), x)?;
                            Ok(Some((v.tau, g)))
                        }
                        Err(Error::UnboundedCutoff { .. }) => Ok(None),
                        Err(e) => Err(e),
                    }
                })
                .collect()
        }
        CutoffRule::Marginal { alpha } => {
            let n1 = fold1.len();
            let k = ((1.0 - alpha) * (n1 + 1) as f64 - 1e-9).ceil() as usize;
            if k > n1 {
                return Err(Error::InsufficientData { have: n1, need: k });
            }
            let mut order: Vec<usize> = (0..n1).collect();
            order.sort_by(|&a, &b| s1[a].total_cmp(&s1[b]).then(a.cmp(&b)));
            let pick = order[k - 1];
            let tau = s1[pick];
            let g = scores.grad[fold1[pick]].clone();
            Ok(fold2.iter().map(|_| Some((tau, g.clone()))).collect())
        }
    }
}

fn recoverable(e: &Error) -> bool {
    matches!(
        e,
        Error::SingularBasis { .. } | Error::NotConverged { .. } | Error::DegenerateDesign(_)
    )
}

/// Smoothed objective (to be minimized) and its gradient for one step.
fn step(
    data: &BoostData<'_>,
    theta: &[f64],
    levels: &[f64],
    config: &BoostConfig,
    rule: CutoffRule,
    t: usize,
) -> Result<(f64, Vec<f64>, usize)> {
    let n = data.len();
    let p = theta.len();
    let scores = evaluate_scores(data, theta)?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "boost-split", t as u64)));
    let n1 = ((config.split_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let fold2 = idx.split_off(n1);
    let fold1 = idx;

    let raw: Vec<f64> = fold1.iter().map(|&i| scores.value[i]).collect();
    let s1 = floor_scores(&raw)?;
    let held = match fold_cutoffs(data, &scores, levels, &fold1, &fold2, rule, &s1) {
        Err(e) if recoverable(&e) => {
            let magnitude = default_dither_magnitude(&s1);
            tracing::warn!(step = t, error = %e, "degenerate boosting step, dithering scores");
            let dithered = crate::qr::dither(&s1, magnitude, derive_seed(config.seed, "boost-dither", t as u64))?;
            fold_cutoffs(data, &scores, levels, &fold1, &fold2, rule, &dithered).map_err(|e2| {
                Error::Contract(format!("boosting step {t} failed after dithering: {e2}"))
            })?
        }
        other => other?,
    };

    let lambda = config.sigmoid_temperature;
    let terms: Vec<Option<(f64, Vec<f64>)>> = fold2
        .par_iter()
        .zip(held.par_iter())
        .map(|(&i, h)| -> Result<Option<(f64, Vec<f64>)>> {
            let Some((tau, dtau)) = h else { return Ok(None) };
            match *data {
                BoostData::Claims { claims, .. } => {
                    let c = &claims[i];
                    let mut val = 0.0;
                    let mut g = vec![0.0; p];
                    for b in &c.base_scores {
                        let z = (tau - dot(b, theta)) / lambda;
                        let s = sigmoid(z);
                        val += s;
                        let w = s * (1.0 - s) / lambda;
                        for k in 0..p {
                            g[k] += w * (dtau[k] - b[k]);
                        }
                    }
                    Ok(Some((val, g)))
                }
                BoostData::Regression { score_features, .. } => {
                    let x = score_features.row(i);
                    let (z, clamped) = clamp_scale(dot(x, theta));
                    let val = 2.0 * tau * z.abs();
                    let g = (0..p)
                        .map(|k| {
                            let direct = if clamped { 0.0 } else { tau * z.signum() * x[k] };
                            2.0 * (dtau[k] * z.abs() + direct)
                        })
                        .collect();
                    Ok(Some((val, g)))
                }
            }
        })
        .collect::<Result<_>>()?;

    let used = terms.iter().flatten().count();
    let skipped = terms.len() - used;
    if used == 0 {
        return Err(Error::Contract(format!(
            "boosting step {t}: every held-out cutoff is unbounded"
        )));
    }
    let mut obj = 0.0;
    let mut grad = vec![0.0; p];
    for (v, g) in terms.iter().flatten() {
        obj += v;
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    obj /= used as f64;
    grad.iter_mut().for_each(|a| *a /= used as f64);

    // keep θ away from xᵀθ = 0 for the scaled family
    if let BoostData::Regression { score_features, .. } = *data {
        for i in 0..n {
            let x = score_features.row(i);
            let z = dot(x, theta);
            if z.abs() < SCALE_FLOOR {
                obj += (1.0 - z.abs() / SCALE_FLOOR) / n as f64;
                let sgn = if z < 0.0 { -1.0 } else { 1.0 };
                for k in 0..p {
                    grad[k] -= sgn * x[k] / (SCALE_FLOOR * n as f64);
                }
            }
        }
    }
    Ok((obj, grad, skipped))
}

fn check_inputs(
    data: &BoostData<'_>,
    family: &ParamScoreFamily,
    objective: BoostObjective,
    config: &BoostConfig,
) -> Result<()> {
    config.validate()?;
    let n = data.len();
    if n < 2 {
        return Err(Error::InsufficientData { have: n, need: 2 });
    }
    let p = family.theta.len();
    match (data, family.kind, objective) {
        (BoostData::Claims { claims, .. }, FamilyKind::LinearClaimEnsemble, BoostObjective::ClaimRetention) => {
            if claims.len() != n {
                return Err(Error::Validation("claims and features differ in length".into()));
            }
            for (i, c) in claims.iter().enumerate() {
                if c.base_scores.len() != c.annotations.len() || c.base_scores.iter().any(|b| b.len() != p) {
                    return Err(Error::Validation(format!(
                        "output {i}: each claim needs {p} base scores and one annotation"
                    )));
                }
            }
        }
        (BoostData::Regression { score_features, y, .. }, FamilyKind::ScaledResidual, BoostObjective::IntervalLength) => {
            if score_features.rows() != n || y.len() != n {
                return Err(Error::Validation("regression inputs differ in length".into()));
            }
            if score_features.cols() != p {
                return Err(Error::Validation(format!(
                    "theta has {p} entries, score features have {}",
                    score_features.cols()
                )));
            }
        }
        _ => {
            return Err(Error::Validation(
                "score family, objective and data kind do not match".into(),
            ))
        }
    }
    Ok(())
}

fn run(
    data: &BoostData<'_>,
    family: &ParamScoreFamily,
    levels: &[f64],
    config: &BoostConfig,
    rule: CutoffRule,
) -> Result<BoostResult> {
    let mut state = AdamState::new(family.theta.clone(), config.learning_rate);
    let mut trace = Vec::with_capacity(config.steps);
    let mut skipped = 0;
    for t in 0..config.steps {
        let (obj, grad, s) = step(data, &state.params, levels, config, rule, t)?;
        state = adam_step(&state, &grad).map_err(|e| match e {
            Error::NonFiniteGradient { detail, .. } => Error::NonFiniteGradient {
                step: t,
                detail: format!("{detail}; theta = {:?}", state.params),
            },
            other => other,
        })?;
        trace.push(obj);
        skipped += s;
        tracing::trace!(step = t, objective = obj, "boost step");
    }
    Ok(BoostResult {
        theta: state.params,
        objective_trace: trace,
        skipped_points: skipped,
    })
}

/// Tune `θ` through the conditional cutoff.
///
/// Claim retention minimizes the smoothed count of removed claims
/// `Σ_j σ((τ̂_i − p_θ(C_ij))/λ)`; interval length minimizes `2τ̂_i|x_iᵀθ|`.
/// Both are averaged over held-out points.
pub fn conditional_boost(
    data: &BoostData<'_>,
    family: &ParamScoreFamily,
    objective: BoostObjective,
    levels: &LevelVector,
    config: &BoostConfig,
) -> Result<BoostResult> {
    check_inputs(data, family, objective, config)?;
    if levels.len() != data.len() {
        return Err(Error::Validation("one level per boosting point is required".into()));
    }
    run(
        data,
        family,
        levels.as_slice(),
        config,
        CutoffRule::Conditional {
            full_basis: config.use_full_basis,
        },
    )
}

/// Same loop with the split-conformal order statistic as the cutoff.
pub fn marginal_boost_baseline(
    data: &BoostData<'_>,
    family: &ParamScoreFamily,
    objective: BoostObjective,
    alpha: f64,
    config: &BoostConfig,
) -> Result<BoostResult> {
    check_inputs(data, family, objective, config)?;
    let levels = LevelVector::constant(alpha, data.len())?;
    run(data, family, levels.as_slice(), config, CutoffRule::Marginal { alpha })
}
