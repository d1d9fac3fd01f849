//! Experiment orchestration: configuration, multi-seed runs, certification
//! campaigns, comparison tables and per-neuron statistics.

pub mod config;
pub mod experiment;
pub mod report;
pub mod visualize;

pub use config::{default_arms, rho_sweep_arms, ArmConfig, CertifyConfig, DatasetConfig, ExperimentConfig, VisualizeConfig};
pub use experiment::{run_experiment, run_id, train_run, write_train_log, ExperimentResult, Manifest, RunOutput};
pub use report::{arm_rows, report_dir, tables, ArmRow, RunRecord, Tables};
pub use visualize::{layer_stats, neuron_rows, smooth_exceedance, write_neuron_csv, NeuronRow};
