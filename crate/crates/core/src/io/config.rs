use crate::boost::BoostConfig;
use crate::error::{Error, Result};
use crate::eval::experiments::{
    ClaimBoostConfig, GaussianMarginalConfig, GroupCoverageConfig, HeteroBoostConfig,
    LengthControlConfig, LevelCalibrationConfig,
};
use crate::eval::{ClaimMixtureConfig, TrialPlan};
use crate::level::{default_grid, QualityCriterion};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Top-level run configuration, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub function_class: FunctionClassConfig,
    pub loss: LossConfig,
    pub level: LevelConfig,
    pub splits: SplitConfig,
    pub boost: BoostBlock,
    pub alpha_estimation: AlphaEstimationConfig,
    pub synth: SynthConfig,
    pub evaluate: EvaluateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            data: DataConfig::default(),
            function_class: FunctionClassConfig::default(),
            loss: LossConfig::default(),
            level: LevelConfig::default(),
            splits: SplitConfig::default(),
            boost: BoostBlock::default(),
            alpha_estimation: AlphaEstimationConfig::default(),
            synth: SynthConfig::default(),
            evaluate: EvaluateConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Newline-delimited claim records.
    pub claims: Option<PathBuf>,
    /// Score methods combined into the claim confidence; defaults to every
    /// method shared by all claims.
    pub score_methods: Vec<String>,
    /// Ensemble weights (for example from `boost`); uniform when absent.
    pub theta: Option<PathBuf>,
}

/// Columns of the calibration function class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FunctionClassConfig {
    pub intercept: bool,
    /// Record features used as linear terms.
    pub columns: Vec<String>,
    /// One indicator per group label.
    pub group_indicators: bool,
    /// Level-bin edges added when the level is adaptive.
    pub level_bins: Vec<f64>,
}

impl Default for FunctionClassConfig {
    fn default() -> Self {
        Self {
            intercept: true,
            columns: Vec::new(),
            group_indicators: false,
            level_bins: (0..=20).map(|k| f64::from(k) * 0.05).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKindConfig {
    CountFalse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKindConfig,
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { kind: LossKindConfig::CountFalse, lambda: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelMode {
    Fixed,
    Adaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LevelConfig {
    pub mode: LevelMode,
    pub alpha: f64,
    /// Level function written by `estimate-alpha`; used in adaptive mode.
    pub function: Option<PathBuf>,
    pub randomized: bool,
}

impl Default for LevelConfig {
    fn default() -> Self {
        Self { mode: LevelMode::Fixed, alpha: 0.1, function: None, randomized: false }
    }
}

/// Shares of the records used for boosting/level estimation and for
/// calibration; the rest are test records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub fit: f64,
    pub calibration: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { fit: 0.3, calibration: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoostBlock {
    pub learning_rate: f64,
    pub steps: usize,
    pub temperature: f64,
    pub split_fraction: f64,
    pub use_full_basis: bool,
}

impl Default for BoostBlock {
    fn default() -> Self {
        let b = BoostConfig::default();
        Self {
            learning_rate: b.learning_rate,
            steps: b.steps,
            temperature: b.sigmoid_temperature,
            split_fraction: b.split_fraction,
            use_full_basis: b.use_full_basis,
        }
    }
}

impl BoostBlock {
    pub fn to_config(&self, seed: u64) -> BoostConfig {
        BoostConfig {
            learning_rate: self.learning_rate,
            steps: self.steps,
            sigmoid_temperature: self.temperature,
            split_fraction: self.split_fraction,
            seed,
            use_full_basis: self.use_full_basis,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlphaEstimationConfig {
    pub grid: Vec<f64>,
    pub criterion: QualityCriterion,
    pub fit_quantile: f64,
    pub truncation: (f64, f64),
}

impl Default for AlphaEstimationConfig {
    fn default() -> Self {
        Self {
            grid: default_grid(),
            criterion: QualityCriterion::RetentionAtLeast(0.7),
            fit_quantile: 0.85,
            truncation: (0.1, 0.99),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    Hetero,
    GaussianAlpha,
    Claims,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub generator: Generator,
    pub n: usize,
    pub mixture: ClaimMixtureConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { generator: Generator::Claims, n: 1000, mixture: ClaimMixtureConfig::default() }
    }
}

/// Which synthetic experiment `evaluate` runs; `claims` evaluates the
/// configured claim data on its test split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Claims,
    GaussianMarginal,
    GroupCoverage,
    HeteroBoost,
    LengthControl,
    LevelCalibration,
    ClaimBoost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub experiment: Experiment,
    /// Trial count override for the synthetic experiments.
    pub trials: Option<usize>,
    /// Nominal-level bin edges for calibration curves.
    pub bins: Vec<f64>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            experiment: Experiment::Claims,
            trials: None,
            bins: (0..=10).map(|k| f64::from(k) / 10.0).collect(),
        }
    }
}

impl EvaluateConfig {
    fn plan(&self, trials: usize, calib_size: usize, seed: u64) -> TrialPlan {
        TrialPlan { trials: self.trials.unwrap_or(trials), calib_size, test_size: 1, seed }
    }

    pub fn gaussian_marginal(&self, seed: u64, alpha: f64) -> GaussianMarginalConfig {
        GaussianMarginalConfig { plan: self.plan(2000, 200, seed), alpha }
    }

    pub fn group_coverage(&self, seed: u64, alpha: f64) -> GroupCoverageConfig {
        GroupCoverageConfig {
            plan: self.plan(2000, 200, seed),
            alpha,
            group_probs: [0.3, 0.7],
            group_sd: [1.0, 3.0],
        }
    }

    pub fn hetero_boost(&self, seed: u64, alpha: f64, boost: &BoostBlock) -> HeteroBoostConfig {
        HeteroBoostConfig { alpha, boost: boost.to_config(seed), seed, ..HeteroBoostConfig::default() }
    }

    pub fn length_control(&self, seed: u64) -> LengthControlConfig {
        let d = LengthControlConfig::default();
        LengthControlConfig { plan: self.plan(d.plan.trials, d.plan.calib_size, seed), ..d }
    }

    pub fn level_calibration(&self, seed: u64) -> LevelCalibrationConfig {
        let d = LevelCalibrationConfig::default();
        LevelCalibrationConfig { plan: self.plan(d.plan.trials, d.plan.calib_size, seed), ..d }
    }

    pub fn claim_boost(&self, seed: u64, alpha: f64, mixture: &ClaimMixtureConfig) -> ClaimBoostConfig {
        let d = ClaimBoostConfig::default();
        ClaimBoostConfig {
            trials: self.trials.unwrap_or(d.trials),
            alpha,
            mixture: mixture.clone(),
            seed,
            ..d
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        // data paths are relative to the config file
        if let Some(dir) = path.parent() {
            for p in [&mut cfg.data.claims, &mut cfg.data.theta, &mut cfg.level.function]
                .into_iter()
                .flatten()
            {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.level.alpha;
        if !(a > 0.0 && a < 1.0) {
            return Err(Error::Config(format!("level.alpha = {a} must lie in (0, 1)")));
        }
        let s = &self.splits;
        if !(s.fit >= 0.0 && s.calibration > 0.0 && s.fit + s.calibration < 1.0) {
            return Err(Error::Config("splits must be non-negative with fit + calibration < 1".into()));
        }
        if !(self.loss.lambda >= 0.0) {
            return Err(Error::Config("loss.lambda must be non-negative".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c.level.alpha, 0.1);
        assert_eq!(c.alpha_estimation.criterion, QualityCriterion::RetentionAtLeast(0.7));
        assert_eq!(c.hash(), RunConfig::default().hash());
    }

    #[test]
    fn parses_blocks() {
        let c = RunConfig::from_toml(
            r#"
seed = 7
[function_class]
columns = ["len"]
group_indicators = true
[level]
mode = "adaptive"
[alpha_estimation]
criterion = { kind = "retention_at_least", threshold = 0.5 }
"#,
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.level.mode, LevelMode::Adaptive);
        assert_eq!(c.alpha_estimation.criterion.threshold(), 0.5);
        assert_ne!(c.hash(), RunConfig::default().hash());
    }

    #[test]
    fn rejects_bad_values() {
        assert!(matches!(RunConfig::from_toml("[level]\nalpha = 1.5"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("bogus = 1"), Err(Error::Config(_))));
        assert!(RunConfig::from_toml("[splits]\nfit = 0.6\ncalibration = 0.5").is_err());
    }
}
