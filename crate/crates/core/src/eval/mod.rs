//! ROC analysis, Youden operating points, and bootstrap statistics.

pub mod bootstrap;
pub mod roc;

pub use bootstrap::{
    average_report, bootstrap_compare, bootstrap_compare_labels, bootstrap_metric, bootstrap_report, percentile,
    BootstrapResult, Distribution, LabelReport, MetricReport, Summary, DEFAULT_REDRAWS,
};
pub use roc::{auroc, metrics_at, roc_curve, trapezoid_area, youden_threshold, OperatingPoint, ScoredSet};
