//! Synthetic generators, coverage metrics and repeated-trial experiments.
pub mod experiments;
mod metrics;
mod synth;

pub use metrics::{
    calibration_curve, coverage_by_group, retention_stats, shift_weighted_coverage, CoverageReport,
    ReportRow, RetentionStats, WeightedCoverage,
};
pub use synth::{
    abs_normal_coverage, normal_cdf, sigmoid_level, synth_claim_mixture, synth_gaussian_alpha,
    synth_hetero, ClaimMixtureConfig, GaussianAlphaData, HeteroData, SynthClaimRecord,
};

use crate::error::{Error, Result};
use crate::seed::derive_seed;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Sizes and seeding for a batch of independent trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialPlan {
    pub trials: usize,
    pub calib_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl TrialPlan {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 || self.calib_size == 0 || self.test_size == 0 {
            return Err(Error::Validation(
                "trials, calib_size and test_size must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Seed of trial `t`, independent of how trials are scheduled.
    pub fn trial_seed(&self, label: &str, t: usize) -> u64 {
        derive_seed(self.seed, label, t as u64)
    }
}

/// Run `f(t)` for every trial in parallel; results keep trial order.
pub fn run_trials<T, F>(plan: &TrialPlan, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    plan.validate()?;
    (0..plan.trials).into_par_iter().map(|t| f(t)).collect()
}

/// `[0, w, 2w, …, 1]`.
pub fn unit_bins(k: usize) -> Vec<f64> {
    (0..=k).map(|j| j as f64 / k as f64).collect()
}
