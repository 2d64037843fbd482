//! Experiment driver: configuration, datasets, training/evaluation loops,
//! metrics and run reports.

pub mod config;
pub mod data;
pub mod metrics;
pub mod report;
pub mod trainer;

pub use config::{parse_kv, Task, TrainConfig};
pub use metrics::ConfusionMatrix;
pub use report::{report, LinePlot};
pub use trainer::{
    default_eval_crop, eval_classify_accuracy, evaluate, train, train_with_stop, MetricRecord,
    StopRule, TrainOutcome,
};
