//! Dataset generation, training, prediction and evaluation.

pub mod dataset;
pub mod eval;
pub mod predict;
pub mod train;

pub use dataset::{generate_dataset, Dataset, DatasetConfig, DatasetManifest, Fold, Profile};
pub use eval::{diff_map, evaluate, pair_evaluate, EvalReport, Estimator, PairEvalConfig};
pub use predict::{predict, predict_batch};
pub use train::{finetune, train, FinetuneMode, TrainConfig, TrainOutcome};
