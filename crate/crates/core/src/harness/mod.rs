//! Experiment configuration, training, evaluation, exports and the CLI.

pub mod cli;
pub mod config;
pub mod export;
pub mod matrix;
pub mod metrics;
pub mod train;

pub use config::{DatasetConfig, ExperimentConfig, Preset, TokenizerConfig};
pub use export::{attention_dump, forecast_rows, write_attention, write_curve, write_embeddings, write_forecast, AttentionDump, AttentionMap};
pub use matrix::{aggregate, read_results, run_matrix, MatrixReport, ResultRow};
pub use metrics::{mae, mse, MetricAccumulator};
pub use train::{
    build_model, evaluate, evaluate_windows, evaluate_with, load_checkpoint, naive_forecast, predict_batch,
    save_checkpoint, train, CurvePoint, EvalMetrics, PreparedData, RunSpec, TrainOutcome,
};
