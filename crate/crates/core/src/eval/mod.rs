//! Metrics, batch-norm recalibration and parameter-distribution diagnostics.

mod distribution;
mod metrics;
mod precise;
mod select;

pub use distribution::{
    distribution_report, wasserstein1, DistributionReport, GroupHistogram, PairDivergence, ParamGroupKind,
    ReportInput, BINS,
};
pub use metrics::{argmax_classes, evaluate, evaluate_with, ConfusionMatrix, Metrics, EVAL_BATCH};
pub use precise::{precise_bn, ChannelMoments};
pub use select::{bank_divergences, select_bank, BankChoice};
