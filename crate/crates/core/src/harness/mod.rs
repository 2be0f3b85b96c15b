//! Training runs, loss traces, evaluation and cross-validation.

mod config;
mod eval;
mod run;
mod trace;
mod train;

pub use config::{LossKind, RunConfig};
pub use eval::{evaluate, predict_slice};
pub use run::{
    config_path, cross_validate, load_model, manifest_path, summary_csv, train_to_dir, write_run,
    CrossValidation, FoldResult, CHECKPOINT_FILE, METRICS_FILE, SUMMARY_FILE, SUMMARY_HEADER,
    TRACE_FILE,
};
pub use trace::{parse_trace_csv, read_trace_csv, EpochMean, TraceRow, TrainTrace, TRACE_HEADER};
pub use train::{prepare_triplets, train_run};
