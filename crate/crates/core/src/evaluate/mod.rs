//! Screening metrics, bootstrap intervals, operating points and the
//! significance tests used for ablation comparisons.

pub mod metrics;
pub mod stats;

pub use metrics::{
    auprc, auroc, bootstrap_ci, bootstrap_replicate, metrics_report, operating_points,
    weighted_auroc, ConfidenceInterval, EvaluationConfig, MetricFn, MetricsReport,
    OperatingPoint, DEFAULT_RECALL_TARGETS,
};
pub use stats::{friedman_nemenyi, wilcoxon_signed_rank, StatTestResult};
