//! Experiment orchestration: flat-file configuration, heldout evaluation,
//! run directories with logs and checkpoints, and the post-hoc analyses
//! (run comparison, reward-component correlation).

pub mod compare;
pub mod config;
pub mod correlation;
pub mod evaluate;
pub mod experiment;

pub use compare::{compare_runs, read_report, ReportRow};
pub use config::ExperimentConfig;
pub use correlation::{correlation_analysis, pearson, read_detail_log, CorrelationReport};
pub use evaluate::{evaluate, write_eval_csv, DecodeMode, EvalReport, EvalRow};
pub use experiment::{run_experiment, FileSink};
