//! Losses, optimization, augmentation, metrics and reports.

pub mod augment;
pub mod data;
pub mod evaluate;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod report;
pub mod trainer;

pub use augment::{augment, AugmentConfig, Geometric};
pub use data::{batch_tensor, load_samples, Sample};
pub use evaluate::{comparison_table, evaluate, oracle_report, predict, ClassMetrics, MetricReport, PredictOptions};
pub use loss::{total_loss, LossOutput, LossWeights, SampleTargets};
pub use metrics::{confusion_matrix, dice, iou, map50, precision_recall, round_half_even, ConfusionMatrix};
pub use optim::Sgd;
pub use report::{overlay, plot_confusion, plot_history, plot_metric_bars, side_by_side};
pub use trainer::{train, train_model, EpochRecord, History, TrainConfig, TrainOutcome};
