//! Conformity scores, claim filtering and conditional cutoffs.

mod claims;
mod cutoff;
mod interval;

pub use claims::{
    conformity_score, filter, score_from_loss, ConformityScore, CustomLossFn, LossKind,
    MonotoneLoss, ScoredClaimSet,
};
pub use cutoff::{
    cutoff_nonrandomized, cutoff_randomized, floor_scores, tau_or_infinite,
    ConditionalCalibrator, Cutoff, CutoffVertex,
};
pub use interval::{predict_interval, Interval, IntervalScore};
