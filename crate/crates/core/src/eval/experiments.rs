//! Repeated-trial experiments on synthetic data.

use super::{
    abs_normal_coverage, calibration_curve, coverage_by_group, normal_cdf, run_trials,
    synth_claim_mixture, synth_gaussian_alpha, synth_hetero, unit_bins, ClaimMixtureConfig,
    CoverageReport, TrialPlan,
};
use crate::boost::{
    conditional_boost, marginal_boost_baseline, BoostConfig, BoostData, BoostObjective,
    EnsembleClaims, ParamScoreFamily,
};
use crate::conformal::{conformity_score, filter, tau_or_infinite, ConditionalCalibrator, MonotoneLoss};
use crate::error::{Error, Result};
use crate::level::{
    augment_features, drop_dependent_columns, estimate_level_function, LevelData, LevelFunction,
    LevelSettings, QualityCriterion, QualityInputs,
};
use crate::qr::{FeatureMatrix, LevelVector};
use crate::seed::derive_seed;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// `⌈(1−α)(n+1)⌉`-th smallest score, `+∞` when that exceeds `n`.
pub fn split_conformal_quantile(scores: &[f64], alpha: f64) -> f64 {
    let n = scores.len();
    let k = ((1.0 - alpha) * (n as f64 + 1.0) - 1e-9).ceil() as usize;
    if k == 0 {
        return f64::NEG_INFINITY;
    }
    if k > n {
        return f64::INFINITY;
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    s[k - 1]
}

fn covered(s: f64, tau: f64) -> f64 {
    f64::from(u8::from(s <= tau))
}

/// Marginal check: one test point per trial, `(X, Y) ~ N(0, I₂)`,
/// features `(1, X)`, score `Y`, randomized cutoff at a fixed level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMarginalConfig {
    pub plan: TrialPlan,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlFrequency {
    pub frequency: f64,
    pub trials: usize,
    pub stderr: f64,
}

pub fn gaussian_marginal(cfg: &GaussianMarginalConfig) -> Result<ControlFrequency> {
    let plan = &cfg.plan;
    let n = plan.calib_size;
    let hits = run_trials(plan, |t| {
        let d = synth_gaussian_alpha(n + plan.test_size, plan.trial_seed("gaussian-marginal", t));
        let rows: Vec<Vec<f64>> = d.x[..n].iter().map(|&x| vec![1.0, x]).collect();
        let cal = ConditionalCalibrator::new(
            FeatureMatrix::from_rows(&rows)?,
            &d.y[..n],
            &LevelVector::constant(cfg.alpha, n)?,
        )?;
        let mut hit = 0.0;
        for j in n..n + plan.test_size {
            let c = cal.cutoff_randomized(&[1.0, d.x[j]], cfg.alpha, plan.trial_seed("gaussian-draw", t * plan.test_size + j));
            hit += covered(d.y[j], tau_or_infinite(c)?);
        }
        Ok(hit)
    })?;
    let total = (plan.trials * plan.test_size) as f64;
    let frequency = hits.iter().sum::<f64>() / total;
    Ok(ControlFrequency {
        frequency,
        trials: plan.trials,
        stderr: ((1.0 - cfg.alpha) * cfg.alpha / total).sqrt(),
    })
}

/// Two disjoint groups with different noise levels; features are the group
/// indicators and the score is `|Y|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCoverageConfig {
    pub plan: TrialPlan,
    pub alpha: f64,
    pub group_probs: [f64; 2],
    pub group_sd: [f64; 2],
}

pub fn group_coverage(cfg: &GroupCoverageConfig) -> Result<CoverageReport> {
    let plan = &cfg.plan;
    let n = plan.calib_size;
    let z = Normal::new(0.0, 1.0).expect("unit normal");
    let draws = run_trials(plan, |t| {
        let mut rng = ChaCha8Rng::seed_from_u64(plan.trial_seed("group-coverage", t));
        let total = n + plan.test_size;
        let mut rows = Vec::with_capacity(total);
        let mut labels = Vec::with_capacity(total);
        let mut s = Vec::with_capacity(total);
        for _ in 0..total {
            let g = usize::from(!rng.gen_bool(cfg.group_probs[0]));
            let mut r = vec![0.0, 0.0];
            r[g] = 1.0;
            rows.push(r);
            labels.push(g);
            s.push((cfg.group_sd[g] * z.sample(&mut rng)).abs());
        }
        let cal = ConditionalCalibrator::new(
            FeatureMatrix::from_rows(&rows[..n])?,
            &s[..n],
            &LevelVector::constant(cfg.alpha, n)?,
        )?;
        (n..total)
            .map(|j| {
                let c = cal.cutoff_randomized(&rows[j], cfg.alpha, derive_seed(plan.seed, "group-draw", (t * total + j) as u64));
                Ok((labels[j], covered(s[j], tau_or_infinite(c)?)))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let flat: Vec<(usize, f64)> = draws.into_iter().flatten().collect();
    let labels: Vec<usize> = flat.iter().map(|p| p.0).collect();
    let out: Vec<f64> = flat.iter().map(|p| p.1).collect();
    let nominal = vec![1.0 - cfg.alpha; out.len()];
    coverage_by_group(&out, &labels, &["group_a".into(), "group_b".into()], Some(&nominal))
}

/// Ten `X¹` decile-style indicators on `[1, 10]`.
pub fn decile_row(x1: f64) -> Vec<f64> {
    let k = (((x1 - 1.0) / 0.9).floor().max(0.0) as usize).min(9);
    let mut r = vec![0.0; 10];
    r[k] = 1.0;
    r
}

fn decile_of(x1: f64) -> usize {
    decile_row(x1).iter().position(|&v| v == 1.0).unwrap_or(0)
}

/// Boosting the interval scale `|Y|/|θ₁X¹ + θ₂X²|` on the heteroskedastic
/// instance, with and without the conditional cutoff in the loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeteroBoostConfig {
    pub alpha: f64,
    pub n_train: usize,
    pub n_eval: usize,
    /// Random calibration/test halves of the evaluation sample.
    pub eval_splits: usize,
    pub boost: BoostConfig,
    pub seed: u64,
}

impl Default for HeteroBoostConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            n_train: 1000,
            n_eval: 2000,
            eval_splits: 20,
            boost: BoostConfig::default(),
            seed: 0,
        }
    }
}

/// Coverage by decile and mean interval length for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodEvaluation {
    pub theta: Vec<f64>,
    pub decile_coverage: CoverageReport,
    pub mean_length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeteroBoostReport {
    pub conditional: MethodEvaluation,
    pub marginal: MethodEvaluation,
    pub initial: MethodEvaluation,
    pub conditional_trace: Vec<f64>,
}

fn scaled_scores(x1: &[f64], x2: &[f64], y: &[f64], theta: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let scale: Vec<f64> = x1
        .iter()
        .zip(x2)
        .map(|(a, b)| (theta[0] * a + theta[1] * b).abs())
        .collect();
    let s = y.iter().zip(&scale).map(|(v, m)| v.abs() / m).collect();
    (s, scale)
}

fn evaluate_scale(
    cfg: &HeteroBoostConfig,
    data: &super::HeteroData,
    theta: &[f64],
    conditional: bool,
) -> Result<MethodEvaluation> {
    let n = data.len();
    let (s, scale) = scaled_scores(&data.x1, &data.x2, &data.y, theta);
    if scale.iter().any(|&m| m == 0.0) {
        return Err(Error::DegenerateScore("zero interval scale".into()));
    }
    let splits = TrialPlan { trials: cfg.eval_splits, calib_size: n / 2, test_size: n - n / 2, seed: cfg.seed };
    let per_split = run_trials(&splits, |t| {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(splits.trial_seed("hetero-eval", t)));
        let (cal_idx, test_idx) = idx.split_at(n / 2);
        let cal_s: Vec<f64> = cal_idx.iter().map(|&i| s[i]).collect();
        let mut taus = [f64::NAN; 10];
        if conditional {
            let rows: Vec<Vec<f64>> = cal_idx.iter().map(|&i| decile_row(data.x1[i])).collect();
            let (f, kept) = drop_dependent_columns(&FeatureMatrix::from_rows(&rows)?);
            let cal = ConditionalCalibrator::new(f, &cal_s, &LevelVector::constant(cfg.alpha, cal_idx.len())?)?;
            for (k, tau) in taus.iter_mut().enumerate() {
                let mut r = vec![0.0; 10];
                r[k] = 1.0;
                let x: Vec<f64> = kept.iter().map(|&j| r[j]).collect();
                if x.iter().all(|&v| v == 0.0) {
                    *tau = f64::INFINITY;
                } else {
                    *tau = tau_or_infinite(cal.cutoff_nonrandomized(&x, cfg.alpha))?;
                }
            }
        } else {
            taus = [split_conformal_quantile(&cal_s, cfg.alpha); 10];
        }
        Ok(test_idx
            .iter()
            .map(|&i| {
                let tau = taus[decile_of(data.x1[i])];
                (decile_of(data.x1[i]), covered(s[i], tau), 2.0 * tau * scale[i])
            })
            .collect::<Vec<_>>())
    })?;
    let flat: Vec<(usize, f64, f64)> = per_split.into_iter().flatten().collect();
    let labels: Vec<usize> = flat.iter().map(|p| p.0).collect();
    let out: Vec<f64> = flat.iter().map(|p| p.1).collect();
    let names: Vec<String> = (0..10).map(|k| format!("decile_{k}")).collect();
    let nominal = vec![1.0 - cfg.alpha; out.len()];
    Ok(MethodEvaluation {
        theta: theta.to_vec(),
        decile_coverage: coverage_by_group(&out, &labels, &names, Some(&nominal))?,
        mean_length: flat.iter().map(|p| p.2).sum::<f64>() / flat.len() as f64,
    })
}

pub fn hetero_boosting(cfg: &HeteroBoostConfig) -> Result<HeteroBoostReport> {
    let train = synth_hetero(cfg.n_train, derive_seed(cfg.seed, "hetero-train", 0));
    let eval = synth_hetero(cfg.n_eval, derive_seed(cfg.seed, "hetero-eval-data", 0));
    let rows: Vec<Vec<f64>> = train.x1.iter().map(|&x| decile_row(x)).collect();
    let (features, _) = drop_dependent_columns(&FeatureMatrix::from_rows(&rows)?);
    let sf: Vec<Vec<f64>> = train.x1.iter().zip(&train.x2).map(|(&a, &b)| vec![a, b]).collect();
    let score_features = FeatureMatrix::from_rows(&sf)?;
    let data = BoostData::Regression { features: &features, score_features: &score_features, y: &train.y };
    let family = ParamScoreFamily::scaled_residual(2);
    let levels = LevelVector::constant(cfg.alpha, cfg.n_train)?;
    let cond = conditional_boost(&data, &family, BoostObjective::IntervalLength, &levels, &cfg.boost)?;
    let marg = marginal_boost_baseline(&data, &family, BoostObjective::IntervalLength, cfg.alpha, &cfg.boost)?;
    Ok(HeteroBoostReport {
        conditional: evaluate_scale(cfg, &eval, &cond.theta, true)?,
        marginal: evaluate_scale(cfg, &eval, &marg.theta, false)?,
        initial: evaluate_scale(cfg, &eval, &family.theta, true)?,
        conditional_trace: cond.objective_trace,
    })
}

/// Level function fit to keep intervals below a length budget on the
/// heteroskedastic instance, then checked on fresh calibration sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthControlConfig {
    pub max_length: f64,
    pub n_estimate: usize,
    pub plan: TrialPlan,
    pub settings: LevelSettings,
    /// Number of equal-width level bins added to the calibration features.
    pub level_bins: usize,
    /// Powers of `X¹` used in both the level function and the calibration
    /// features (`1, X¹, …, (X¹)^k`).
    pub degree: usize,
}

impl Default for LengthControlConfig {
    fn default() -> Self {
        Self {
            max_length: 500.0,
            n_estimate: 2000,
            plan: TrialPlan { trials: 200, calib_size: 1000, test_size: 1, seed: 0 },
            settings: LevelSettings::default(),
            level_bins: 10,
            degree: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthControlReport {
    pub level_function: LevelFunction,
    /// Share of test intervals longer than the budget.
    pub over_budget: f64,
    /// Exact conditional coverage given the cutoff, binned by nominal level.
    pub calibration: CoverageReport,
    pub lengths: Vec<f64>,
    pub nominal: Vec<f64>,
    pub realized: Vec<f64>,
}

fn level_features(x1: f64, degree: usize) -> Vec<f64> {
    (0..=degree).map(|k| x1.powi(k as i32)).collect()
}

pub fn length_control(cfg: &LengthControlConfig) -> Result<LengthControlReport> {
    let plan = &cfg.plan;
    let est = synth_hetero(cfg.n_estimate, derive_seed(plan.seed, "length-estimate", 0));
    let g = FeatureMatrix::from_rows(
        &(0..est.len()).map(|i| level_features(est.x1[i], cfg.degree)).collect::<Vec<_>>(),
    )?;
    let scores: Vec<f64> = est.y.iter().map(|v| v.abs()).collect();
    let ones = vec![1.0; est.len()];
    let fit = estimate_level_function(
        &LevelData { features: &g, scores: &scores, inputs: QualityInputs::Intervals { scales: &ones } },
        QualityCriterion::IntervalLengthAtMost(cfg.max_length),
        &cfg.settings,
        derive_seed(plan.seed, "length-split", 0),
    )?;
    let level = fit.function;
    let edges = unit_bins(cfg.level_bins);
    let n = plan.calib_size;
    let per_trial = run_trials(plan, |t| {
        let d = synth_hetero(n + plan.test_size, plan.trial_seed("length-trial", t));
        let rows: Vec<Vec<f64>> = (0..d.len()).map(|i| level_features(d.x1[i], cfg.degree)).collect();
        let alpha: Vec<f64> = rows.iter().map(|r| level.evaluate(r)).collect();
        let base = FeatureMatrix::from_rows(
            &rows.iter().zip(&alpha).map(|(r, &a)| [r.as_slice(), &[a]].concat()).collect::<Vec<_>>(),
        )?;
        let (full, _) = drop_dependent_columns(&augment_features(&base, &alpha, &edges, None)?);
        let cal_idx: Vec<usize> = (0..n).collect();
        let s: Vec<f64> = d.y[..n].iter().map(|v| v.abs()).collect();
        let cal = ConditionalCalibrator::new(full.select_rows(&cal_idx), &s, &LevelVector::new(alpha[..n].to_vec())?)?;
        (n..d.len())
            .map(|j| {
                let c = cal.cutoff_randomized(full.row(j), alpha[j], derive_seed(plan.seed, "length-draw", (t * d.len() + j) as u64));
                let tau = tau_or_infinite(c)?;
                Ok((2.0 * tau, 1.0 - alpha[j], abs_normal_coverage(tau, d.noise_sd(j))))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let flat: Vec<(f64, f64, f64)> = per_trial.into_iter().flatten().collect();
    let lengths: Vec<f64> = flat.iter().map(|p| p.0).collect();
    let nominal: Vec<f64> = flat.iter().map(|p| p.1).collect();
    let realized: Vec<f64> = flat.iter().map(|p| p.2).collect();
    Ok(LengthControlReport {
        level_function: level,
        over_budget: lengths.iter().filter(|&&l| l > cfg.max_length).count() as f64 / lengths.len() as f64,
        calibration: calibration_curve(&nominal, &realized, &unit_bins(10))?,
        lengths,
        nominal,
        realized,
    })
}

/// `(X, Y) ~ N(0, I₂)`, level `α(X) = σ(X)`, score `Y`; compares the
/// feature class `{1, α(X)}` against intercept only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelCalibrationConfig {
    pub plan: TrialPlan,
    pub bins: usize,
}

impl Default for LevelCalibrationConfig {
    fn default() -> Self {
        Self {
            plan: TrialPlan { trials: 500, calib_size: 1000, test_size: 1, seed: 0 },
            bins: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelCalibrationReport {
    pub with_level: CoverageReport,
    pub intercept_only: CoverageReport,
}

pub fn level_calibration(cfg: &LevelCalibrationConfig) -> Result<LevelCalibrationReport> {
    let plan = &cfg.plan;
    let n = plan.calib_size;
    let per_trial = run_trials(plan, |t| {
        let d = synth_gaussian_alpha(n + plan.test_size, plan.trial_seed("level-calibration", t));
        let levels = LevelVector::new(d.alpha[..n].to_vec())?;
        let rows: Vec<Vec<f64>> = d.alpha[..n].iter().map(|&a| vec![1.0, a]).collect();
        let with = ConditionalCalibrator::new(FeatureMatrix::from_rows(&rows)?, &d.y[..n], &levels)?;
        let plain = ConditionalCalibrator::new(FeatureMatrix::intercept_only(n), &d.y[..n], &levels)?;
        (n..d.x.len())
            .map(|j| {
                let a = d.alpha[j];
                let draw = derive_seed(plan.seed, "level-draw", (t * d.x.len() + j) as u64);
                let t1 = tau_or_infinite(with.cutoff_randomized(&[1.0, a], a, draw))?;
                let t0 = tau_or_infinite(plain.cutoff_randomized(&[1.0], a, draw))?;
                Ok((1.0 - a, normal_cdf(t1), normal_cdf(t0)))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let flat: Vec<(f64, f64, f64)> = per_trial.into_iter().flatten().collect();
    let nominal: Vec<f64> = flat.iter().map(|p| p.0).collect();
    let edges = unit_bins(cfg.bins);
    Ok(LevelCalibrationReport {
        with_level: calibration_curve(&nominal, &flat.iter().map(|p| p.1).collect::<Vec<_>>(), &edges)?,
        intercept_only: calibration_curve(&nominal, &flat.iter().map(|p| p.2).collect::<Vec<_>>(), &edges)?,
    })
}

/// Boosted vs uniform ensembles of claim scores on synthetic outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimBoostConfig {
    pub trials: usize,
    pub n_boost: usize,
    pub n_calib: usize,
    pub n_test: usize,
    pub alpha: f64,
    /// Number of false claims tolerated.
    pub budget: f64,
    pub mixture: ClaimMixtureConfig,
    pub boost: BoostConfig,
    pub seed: u64,
}

impl Default for ClaimBoostConfig {
    fn default() -> Self {
        Self {
            trials: 50,
            n_boost: 400,
            n_calib: 400,
            n_test: 400,
            alpha: 0.1,
            budget: 0.0,
            mixture: ClaimMixtureConfig::default(),
            boost: BoostConfig {
                learning_rate: 0.01,
                steps: 200,
                sigmoid_temperature: 0.1,
                ..BoostConfig::default()
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimBoostTrial {
    pub theta: Vec<f64>,
    pub boosted_retention: f64,
    pub uniform_retention: f64,
    /// Share of test outputs whose retained claims satisfy the loss budget.
    pub boosted_control: f64,
    pub uniform_control: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimBoostReport {
    pub trials: Vec<ClaimBoostTrial>,
    /// Share of trials where boosting retained at least as much.
    pub boosted_at_least_uniform: f64,
}

fn retention_and_control(
    calib: &[super::SynthClaimRecord],
    test: &[super::SynthClaimRecord],
    theta: &[f64],
    loss: &MonotoneLoss,
    alpha: f64,
) -> Result<(f64, f64)> {
    let cal_sets = calib.iter().map(|r| r.claims.combined(theta)).collect::<Result<Vec<_>>>()?;
    let s = cal_sets
        .iter()
        .map(|c| conformity_score(c, loss).map(|v| v.value))
        .collect::<Result<Vec<_>>>()?;
    let f = FeatureMatrix::from_rows(&calib.iter().map(|r| r.features.clone()).collect::<Vec<_>>())?;
    let cal = ConditionalCalibrator::new(f, &s, &LevelVector::constant(alpha, calib.len())?)?;
    let taus = [
        tau_or_infinite(cal.cutoff_nonrandomized(&[1.0, 0.0], alpha))?,
        tau_or_infinite(cal.cutoff_nonrandomized(&[1.0, 1.0], alpha))?,
    ];
    let (mut kept, mut ok, mut counted) = (0.0, 0.0, 0usize);
    for r in test {
        let c = r.claims.combined(theta)?;
        let retained = filter(&c, taus[r.group]);
        ok += f64::from(u8::from(loss.is_controlled(&c, &retained)));
        if !c.is_empty() {
            kept += retained.len() as f64 / c.len() as f64;
            counted += 1;
        }
    }
    Ok((kept / counted.max(1) as f64, ok / test.len() as f64))
}

pub fn claim_boosting(cfg: &ClaimBoostConfig) -> Result<ClaimBoostReport> {
    let total = cfg.n_boost + cfg.n_calib + cfg.n_test;
    let plan = TrialPlan { trials: cfg.trials, calib_size: cfg.n_calib, test_size: cfg.n_test, seed: cfg.seed };
    let loss = MonotoneLoss::count_false(cfg.budget);
    let names: Vec<String> = (0..4).map(|k| format!("base_{k}")).collect();
    let trials = run_trials(&plan, |t| {
        let data = synth_claim_mixture(total, plan.trial_seed("claim-mixture", t), &cfg.mixture)?;
        let (boost_part, rest) = data.split_at(cfg.n_boost);
        let (calib, test) = rest.split_at(cfg.n_calib);
        let features = FeatureMatrix::from_rows(&boost_part.iter().map(|r| r.features.clone()).collect::<Vec<_>>())?;
        let claims: Vec<EnsembleClaims> = boost_part.iter().map(|r| r.claims.clone()).collect();
        let family = ParamScoreFamily::uniform_ensemble(names.clone());
        let bcfg = BoostConfig { seed: derive_seed(cfg.seed, "claim-boost", t as u64), ..cfg.boost.clone() };
        let res = conditional_boost(
            &BoostData::Claims { features: &features, claims: &claims, loss: &loss },
            &family,
            BoostObjective::ClaimRetention,
            &LevelVector::constant(cfg.alpha, cfg.n_boost)?,
            &bcfg,
        )?;
        let (br, bc) = retention_and_control(calib, test, &res.theta, &loss, cfg.alpha)?;
        let (ur, uc) = retention_and_control(calib, test, &family.theta, &loss, cfg.alpha)?;
        Ok(ClaimBoostTrial { theta: res.theta, boosted_retention: br, uniform_retention: ur, boosted_control: bc, uniform_control: uc })
    })?;
    let wins = trials.iter().filter(|t| t.boosted_retention >= t.uniform_retention).count();
    Ok(ClaimBoostReport {
        boosted_at_least_uniform: wins as f64 / trials.len() as f64,
        trials,
    })
}
