//! Training loss and evaluation metrics.

mod focal;
mod metrics;

pub use focal::{sigmoid_focal_loss, total_loss, FieldLabels, FocalConfig, LossBreakdown};
pub use metrics::{
    action_in_top5, class_balanced_recall, evaluate_fields, in_topk, mean_top5_recall, pair_in_top5,
    topk_indices,
    ClassRecall, Field, MetricReport, RecallResult, Subset, TOP_K,
};
