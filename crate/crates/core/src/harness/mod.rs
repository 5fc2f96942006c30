//! Experiment orchestration, metrics, persistence and the CLI.

pub mod cli;
mod experiment;
mod metrics;

pub use experiment::{
    cached_reference_maps, classifier_checkpoint, compare, evaluate, load_encoder, metrics_csv, reevaluate,
    reference_maps, run_arms, run_experiment, train_classifier, trial_adapters, trial_dataset, write_outputs, Arm,
    ClassifierTrainConfig, ExperimentConfig, Progress, RecordFile, RunRecord, Summary, TrialAdapters, TrialMetrics,
    TrialRow, CONFIG_FILE, DEFAULT_ENCODER_NAME, METRICS_FILE, RECORD_FILE,
};
pub use metrics::{histogram, jsd, outcome_divergence, Stat, DEFAULT_BINS};
