use super::config::{Experiment, Generator, LevelMode, LossKindConfig, RunConfig};
use super::records::{load_claims, write_claims, ClaimDataset, ClaimEntry, ClaimRecordLine};
use super::{csv_bytes, report_csv, write_atomic, write_json, Manifest};
use crate::boost::{conditional_boost, BoostData, BoostObjective, ParamScoreFamily};
use crate::conformal::{conformity_score, filter, tau_or_infinite, ConditionalCalibrator, Cutoff, MonotoneLoss};
use crate::error::{Error, Result};
use crate::eval::experiments::{
    claim_boosting, gaussian_marginal, group_coverage, hetero_boosting, length_control,
    level_calibration,
};
use crate::eval::{
    calibration_curve, coverage_by_group, retention_stats, synth_claim_mixture, synth_gaussian_alpha,
    synth_hetero, CoverageReport,
};
use crate::level::{
    augment_features, drop_dependent_columns, estimate_level_function, LevelData, LevelFunction,
    LevelSettings, QualityInputs,
};
use crate::qr::{FeatureMatrix, LevelVector};
use crate::seed::derive_seed;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Synth,
    Calibrate,
    Filter,
    Boost,
    EstimateAlpha,
    Evaluate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Calibrate => "calibrate",
            Command::Filter => "filter",
            Command::Boost => "boost",
            Command::EstimateAlpha => "estimate-alpha",
            Command::Evaluate => "evaluate",
        }
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "synth" => Command::Synth,
            "calibrate" => Command::Calibrate,
            "filter" => Command::Filter,
            "boost" => Command::Boost,
            "estimate-alpha" => Command::EstimateAlpha,
            "evaluate" => Command::Evaluate,
            other => return Err(Error::Config(format!("unknown command '{other}'"))),
        })
    }
}

/// Files written by one command, manifest last.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub files: Vec<PathBuf>,
}

/// Ensemble weights written by `boost`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaArtifact {
    pub config_hash: String,
    pub seed: u64,
    pub methods: Vec<String>,
    pub theta: Vec<f64>,
    pub objective_trace: Vec<f64>,
    pub skipped_points: usize,
}

/// Level function written by `estimate-alpha`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelArtifact {
    pub config_hash: String,
    pub seed: u64,
    /// Names of the inputs the coefficients apply to.
    pub inputs: Vec<String>,
    pub function: LevelFunction,
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    out: &'a Path,
    manifest: Manifest,
}

impl Ctx<'_> {
    fn seed(&mut self, label: &str) -> u64 {
        let s = derive_seed(self.cfg.seed, label, 0);
        self.manifest.sub_seeds.insert(label.to_string(), s);
        s
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(self.out.join(name), bytes)?;
        self.manifest.files.push(name.to_string());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, v: &T) -> Result<()> {
        write_json(self.out.join(name), v)?;
        self.manifest.files.push(name.to_string());
        Ok(())
    }

    fn report(&mut self, name: &str, r: &CoverageReport) -> Result<()> {
        self.write(&format!("{name}.csv"), &report_csv(r)?)
    }
}

/// Run one workflow and write its artifacts plus `manifest-<command>.json`
/// under the configured output directory.
pub fn run_command(command: Command, cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let out = cfg.out_dir.as_path();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut ctx = Ctx {
        cfg,
        out,
        manifest: Manifest {
            command: command.name().to_string(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            sub_seeds: BTreeMap::new(),
            splits: BTreeMap::new(),
            groups: Vec::new(),
            files: Vec::new(),
        },
    };
    match command {
        Command::Synth => synth(&mut ctx)?,
        Command::Evaluate if cfg.evaluate.experiment != Experiment::Claims => experiment(&mut ctx)?,
        _ => claims_command(command, &mut ctx)?,
    }
    let name = format!("manifest-{}.json", command.name());
    let manifest = ctx.manifest.clone();
    write_json(out.join(&name), &manifest)?;
    let mut files: Vec<PathBuf> = manifest.files.iter().map(|f| out.join(f)).collect();
    files.push(out.join(name));
    Ok(RunOutput { files })
}

fn synth(ctx: &mut Ctx<'_>) -> Result<()> {
    let s = ctx.cfg.synth.clone();
    let seed = ctx.seed("synth");
    match s.generator {
        Generator::Hetero => {
            let d = synth_hetero(s.n, seed);
            let rows: Vec<(f64, f64, f64)> = (0..d.len()).map(|i| (d.x1[i], d.x2[i], d.y[i])).collect();
            ctx.write("hetero.csv", &csv_bytes(&["x1", "x2", "y"], &rows)?)
        }
        Generator::GaussianAlpha => {
            let d = synth_gaussian_alpha(s.n, seed);
            let rows: Vec<(f64, f64, f64)> = (0..d.x.len()).map(|i| (d.x[i], d.y[i], d.alpha[i])).collect();
            ctx.write("gaussian_alpha.csv", &csv_bytes(&["x", "y", "alpha"], &rows)?)
        }
        Generator::Claims => {
            let recs = synth_claim_mixture(s.n, seed, &s.mixture)?;
            let ds = ClaimDataset {
                records: recs
                    .iter()
                    .enumerate()
                    .map(|(i, r)| ClaimRecordLine {
                        id: format!("r{i:06}"),
                        group: format!("g{}", r.group),
                        features: [("group_flag".to_string(), r.group as f64)].into_iter().collect(),
                        claims: r
                            .claims
                            .base_scores
                            .iter()
                            .zip(&r.claims.annotations)
                            .map(|(b, &w)| ClaimEntry {
                                scores: b.iter().enumerate().map(|(k, &v)| (format!("base_{k}"), v)).collect(),
                                annotation: w,
                                text: None,
                            })
                            .collect(),
                    })
                    .collect(),
            };
            write_claims(ctx.out.join("claims.jsonl"), &ds)?;
            ctx.manifest.files.push("claims.jsonl".into());
            Ok(())
        }
    }
}

fn experiment(ctx: &mut Ctx<'_>) -> Result<()> {
    let cfg = ctx.cfg;
    let ev = &cfg.evaluate;
    let seed = ctx.seed("evaluate");
    let alpha = cfg.level.alpha;
    match ev.experiment {
        Experiment::Claims => unreachable!("handled by the claim workflow"),
        Experiment::GaussianMarginal => {
            let r = gaussian_marginal(&ev.gaussian_marginal(seed, alpha))?;
            ctx.write_json("gaussian_marginal.json", &r)
        }
        Experiment::GroupCoverage => {
            let r = group_coverage(&ev.group_coverage(seed, alpha))?;
            ctx.manifest.groups = vec!["group_a".into(), "group_b".into()];
            ctx.report("group_coverage", &r)
        }
        Experiment::HeteroBoost => {
            let r = hetero_boosting(&ev.hetero_boost(seed, alpha, &cfg.boost))?;
            ctx.manifest.groups = (0..10).map(|k| format!("decile_{k}")).collect();
            ctx.report("conditional_deciles", &r.conditional.decile_coverage)?;
            ctx.report("marginal_deciles", &r.marginal.decile_coverage)?;
            ctx.report("initial_deciles", &r.initial.decile_coverage)?;
            let trace: Vec<(usize, f64)> = r.conditional_trace.iter().copied().enumerate().collect();
            ctx.write("conditional_trace.csv", &csv_bytes(&["step", "objective"], &trace)?)?;
            ctx.write_json("hetero_boost.json", &r)
        }
        Experiment::LengthControl => {
            let r = length_control(&ev.length_control(seed))?;
            ctx.report("length_calibration", &r.calibration)?;
            let rows: Vec<(f64, f64, f64)> =
                (0..r.lengths.len()).map(|i| (r.nominal[i], r.realized[i], r.lengths[i])).collect();
            ctx.write("length_trials.csv", &csv_bytes(&["nominal", "realized", "length"], &rows)?)?;
            ctx.write_json("length_control.json", &r.level_function)
        }
        Experiment::LevelCalibration => {
            let r = level_calibration(&ev.level_calibration(seed))?;
            ctx.report("calibration_with_level", &r.with_level)?;
            ctx.report("calibration_intercept_only", &r.intercept_only)
        }
        Experiment::ClaimBoost => {
            let r = claim_boosting(&ev.claim_boost(seed, alpha, &cfg.synth.mixture))?;
            ctx.write_json("claim_boost.json", &r)
        }
    }
}

/// Claim data with the configured splits, features and scores.
struct Prepared {
    ds: ClaimDataset,
    fit: Vec<usize>,
    calib: Vec<usize>,
    test: Vec<usize>,
    methods: Vec<String>,
    theta: Vec<f64>,
    loss: MonotoneLoss,
    groups: Vec<String>,
    /// Names of the base feature columns.
    inputs: Vec<String>,
}

impl Prepared {
    fn base_row(&self, r: &ClaimRecordLine, cfg: &RunConfig) -> Result<Vec<f64>> {
        let fc = &cfg.function_class;
        let mut row = Vec::with_capacity(self.inputs.len());
        if fc.intercept {
            row.push(1.0);
        }
        for c in &fc.columns {
            row.push(*r.features.get(c).ok_or_else(|| {
                Error::Config(format!("function-class column '{c}' missing from record {}", r.id))
            })?);
        }
        if fc.group_indicators {
            row.extend(self.groups.iter().map(|g| f64::from(u8::from(*g == r.group))));
        }
        if row.is_empty() {
            return Err(Error::Config("function class has no columns".into()));
        }
        Ok(row)
    }

    fn base_rows(&self, idx: &[usize], cfg: &RunConfig) -> Result<Vec<Vec<f64>>> {
        idx.iter().map(|&i| self.base_row(&self.ds.records[i], cfg)).collect()
    }

    fn scores(&self, idx: &[usize]) -> Result<Vec<f64>> {
        idx.iter()
            .map(|&i| {
                let c = self.ds.records[i].ensemble(&self.methods)?.combined(&self.theta)?;
                Ok(conformity_score(&c, &self.loss)?.value)
            })
            .collect()
    }

    fn ids(&self, idx: &[usize]) -> Vec<String> {
        idx.iter().map(|&i| self.ds.records[i].id.clone()).collect()
    }
}

fn prepare(ctx: &mut Ctx<'_>) -> Result<Prepared> {
    let cfg = ctx.cfg;
    let path = cfg
        .data
        .claims
        .as_ref()
        .ok_or_else(|| Error::Config("data.claims is required for this command".into()))?;
    let ds = load_claims(path)?;
    let mut seen = std::collections::HashSet::new();
    if let Some(r) = ds.records.iter().find(|r| !seen.insert(r.id.as_str())) {
        return Err(Error::Validation(format!("duplicate record id '{}'", r.id)));
    }
    let methods = if cfg.data.score_methods.is_empty() {
        ds.shared_methods()
    } else {
        cfg.data.score_methods.clone()
    };
    let theta = match &cfg.data.theta {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let art: ThetaArtifact = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
            if art.methods != methods {
                return Err(Error::Config(format!(
                    "theta was fit on methods {:?}, configured {:?}",
                    art.methods, methods
                )));
            }
            art.theta
        }
        None => ParamScoreFamily::uniform_ensemble(methods.clone()).theta,
    };
    let LossKindConfig::CountFalse = cfg.loss.kind;
    let loss = MonotoneLoss::count_false(cfg.loss.lambda);

    let n = ds.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(ctx.seed("splits")));
    let n_fit = (cfg.splits.fit * n as f64).round() as usize;
    let n_cal = ((cfg.splits.calibration * n as f64).round() as usize).min(n - n_fit);
    let test = idx.split_off(n_fit + n_cal);
    let calib = idx.split_off(n_fit);
    let fit = idx;

    let fc = &cfg.function_class;
    let mut inputs = Vec::new();
    if fc.intercept {
        inputs.push("intercept".to_string());
    }
    inputs.extend(fc.columns.iter().cloned());
    let groups = ds.groups();
    if fc.group_indicators {
        inputs.extend(groups.iter().map(|g| format!("group={g}")));
    }
    let p = Prepared { ds, fit, calib, test, methods, theta, loss, groups, inputs };
    for (role, ids) in [("fit", &p.fit), ("calibration", &p.calib), ("test", &p.test)] {
        ctx.manifest.splits.insert(role.to_string(), p.ids(ids));
    }
    ctx.manifest.groups = p.groups.clone();
    Ok(p)
}

fn load_level(cfg: &RunConfig, inputs: &[String]) -> Result<Option<LevelFunction>> {
    if cfg.level.mode == LevelMode::Fixed {
        return Ok(None);
    }
    let p = cfg
        .level
        .function
        .as_ref()
        .ok_or_else(|| Error::Config("adaptive level requires level.function".into()))?;
    let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
    let art: LevelArtifact = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    if art.inputs != inputs {
        return Err(Error::Config(format!(
            "level function inputs {:?} differ from the function class {:?}",
            art.inputs, inputs
        )));
    }
    Ok(Some(art.function))
}

/// Per-test cutoffs with their levels.
struct Calibrated {
    alpha: Vec<f64>,
    tau: Vec<f64>,
}

fn calibrate_test(ctx: &mut Ctx<'_>, p: &Prepared) -> Result<Calibrated> {
    let cfg = ctx.cfg;
    if p.test.is_empty() {
        return Ok(Calibrated { alpha: Vec::new(), tau: Vec::new() });
    }
    let draw_seed = ctx.seed("cutoff");
    let level = load_level(cfg, &p.inputs)?;
    let both: Vec<usize> = p.calib.iter().chain(&p.test).copied().collect();
    let base = FeatureMatrix::from_rows(&p.base_rows(&both, cfg)?)?;
    let alpha: Vec<f64> = match &level {
        Some(f) => f.evaluate_all(&base),
        None => vec![cfg.level.alpha; both.len()],
    };
    let full = match level {
        Some(_) => {
            let with_alpha = base.with_columns(&[alpha.clone()])?;
            augment_features(&with_alpha, &alpha, &cfg.function_class.level_bins, None)?
        }
        None => base,
    };
    let nc = p.calib.len();
    let cal_rows: Vec<usize> = (0..nc).collect();
    let (cal_f, kept) = drop_dependent_columns(&full.select_rows(&cal_rows));
    let cal = ConditionalCalibrator::new(cal_f, &p.scores(&p.calib)?, &LevelVector::new(alpha[..nc].to_vec())?)?;
    let tau = (nc..both.len())
        .map(|j| {
            let x: Vec<f64> = kept.iter().map(|&c| full.row(j)[c]).collect();
            let c: Result<Cutoff> = if cfg.level.randomized {
                cal.cutoff_randomized(&x, alpha[j], derive_seed(draw_seed, "test", (j - nc) as u64))
            } else {
                cal.cutoff_nonrandomized(&x, alpha[j])
            };
            tau_or_infinite(c)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Calibrated { alpha: alpha[nc..].to_vec(), tau })
}

#[derive(Serialize)]
struct RetainedLine<'a> {
    id: &'a str,
    alpha: f64,
    tau: f64,
    retained: Vec<usize>,
}

fn claims_command(command: Command, ctx: &mut Ctx<'_>) -> Result<()> {
    let cfg = ctx.cfg;
    let p = prepare(ctx)?;
    match command {
        Command::Calibrate => {
            let c = calibrate_test(ctx, &p)?;
            let rows: Vec<(String, f64, f64, f64)> = p
                .test
                .iter()
                .enumerate()
                .map(|(k, &i)| (p.ds.records[i].id.clone(), c.alpha[k], 1.0 - c.alpha[k], c.tau[k]))
                .collect();
            ctx.write("cutoffs.csv", &csv_bytes(&["id", "alpha", "nominal", "tau"], &rows)?)
        }
        Command::Filter => {
            let c = calibrate_test(ctx, &p)?;
            let mut text = String::new();
            for (k, &i) in p.test.iter().enumerate() {
                let r = &p.ds.records[i];
                let set = r.ensemble(&p.methods)?.combined(&p.theta)?;
                let line = RetainedLine { id: &r.id, alpha: c.alpha[k], tau: c.tau[k], retained: filter(&set, c.tau[k]) };
                text.push_str(&serde_json::to_string(&line).map_err(|e| Error::Validation(e.to_string()))?);
                text.push('\n');
            }
            ctx.write("retained.jsonl", text.as_bytes())
        }
        Command::Evaluate => {
            let c = calibrate_test(ctx, &p)?;
            let sets = p
                .test
                .iter()
                .map(|&i| p.ds.records[i].ensemble(&p.methods)?.combined(&p.theta))
                .collect::<Result<Vec<_>>>()?;
            let kept: Vec<Vec<usize>> = sets.iter().zip(&c.tau).map(|(s, &t)| filter(s, t)).collect();
            let outcomes: Vec<f64> = sets
                .iter()
                .zip(&kept)
                .map(|(s, k)| f64::from(u8::from(p.loss.is_controlled(s, k))))
                .collect();
            let nominal: Vec<f64> = c.alpha.iter().map(|a| 1.0 - a).collect();
            let labels: Vec<usize> = p
                .test
                .iter()
                .map(|&i| p.groups.binary_search(&p.ds.records[i].group).unwrap_or(0))
                .collect();
            ctx.report("coverage_by_group", &coverage_by_group(&outcomes, &labels, &p.groups, Some(&nominal))?)?;
            ctx.report("calibration", &calibration_curve(&nominal, &outcomes, &cfg.evaluate.bins)?)?;
            let stats = retention_stats(&sets, &kept)?;
            let rows: Vec<(String, Option<f64>)> = p
                .test
                .iter()
                .zip(&stats.fractions)
                .map(|(&i, f)| (p.ds.records[i].id.clone(), *f))
                .collect();
            ctx.write("retention.csv", &csv_bytes(&["id", "retention"], &rows)?)?;
            ctx.write_json("retention_summary.json", &stats_summary(&stats))
        }
        Command::Boost => {
            let seed = ctx.seed("boost");
            let rows = p.base_rows(&p.fit, cfg)?;
            let (features, kept) = drop_dependent_columns(&FeatureMatrix::from_rows(&rows)?);
            let claims = p
                .fit
                .iter()
                .map(|&i| p.ds.records[i].ensemble(&p.methods))
                .collect::<Result<Vec<_>>>()?;
            let base = FeatureMatrix::from_rows(&rows)?;
            let levels = match load_level(cfg, &p.inputs)? {
                Some(f) => LevelVector::new(f.evaluate_all(&base))?,
                None => LevelVector::constant(cfg.level.alpha, p.fit.len())?,
            };
            tracing::info!(columns = kept.len(), records = p.fit.len(), "boosting ensemble weights");
            let mut family = ParamScoreFamily::uniform_ensemble(p.methods.clone());
            family.theta = p.theta.clone();
            let res = conditional_boost(
                &BoostData::Claims { features: &features, claims: &claims, loss: &p.loss },
                &family,
                BoostObjective::ClaimRetention,
                &levels,
                &cfg.boost.to_config(seed),
            )?;
            let trace: Vec<(usize, f64)> = res.objective_trace.iter().copied().enumerate().collect();
            ctx.write("boost_trace.csv", &csv_bytes(&["step", "objective"], &trace)?)?;
            let art = ThetaArtifact {
                config_hash: ctx.manifest.config_hash.clone(),
                seed,
                methods: p.methods.clone(),
                theta: res.theta,
                objective_trace: res.objective_trace,
                skipped_points: res.skipped_points,
            };
            ctx.write_json("theta.json", &art)
        }
        Command::EstimateAlpha => {
            let seed = ctx.seed("estimate-alpha");
            let features = FeatureMatrix::from_rows(&p.base_rows(&p.fit, cfg)?)?;
            let scores = p.scores(&p.fit)?;
            let sets = p
                .fit
                .iter()
                .map(|&i| p.ds.records[i].ensemble(&p.methods)?.combined(&p.theta))
                .collect::<Result<Vec<_>>>()?;
            let ae = &cfg.alpha_estimation;
            let est = estimate_level_function(
                &LevelData { features: &features, scores: &scores, inputs: QualityInputs::Claims(&sets) },
                ae.criterion,
                &LevelSettings { grid: ae.grid.clone(), fit_quantile: ae.fit_quantile, truncation: ae.truncation },
                seed,
            )?;
            let art = LevelArtifact {
                config_hash: ctx.manifest.config_hash.clone(),
                seed,
                inputs: p.inputs.clone(),
                function: est.function,
            };
            ctx.write_json("level_function.json", &art)
        }
        Command::Synth => unreachable!("synth does not read claim data"),
    }
}

#[derive(Serialize)]
struct RetentionSummary {
    mean: f64,
    mean_with_empty_as_zero: f64,
    empty_outputs: usize,
    outputs: usize,
}

fn stats_summary(s: &crate::eval::RetentionStats) -> RetentionSummary {
    RetentionSummary {
        mean: s.mean,
        mean_with_empty_as_zero: s.mean_with_empty_as_zero,
        empty_outputs: s.empty_outputs,
        outputs: s.fractions.len(),
    }
}
