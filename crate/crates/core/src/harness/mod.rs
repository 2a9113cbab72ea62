//! Experiment orchestration: configs, training runs, sweeps, checkpoints,
//! table export and plot data.

mod checkpoint;
mod config;
mod export;
mod plots;
mod run;
mod selftest;
mod sweep;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, MANIFEST_FILE, PARAMS_FILE};
pub use config::{ExperimentConfig, Task};
pub use export::{
    export_lut, export_model_luts, export_resolution, infer_with_luts, load_luts, lut_file_name, probe_lut_export,
};
pub use plots::{emit_plot_data, linspace, PlotData, PlotKind, CURVE_POINTS, DEFAULT_GRID};
pub use run::{
    compute_metrics, derive_seed, evaluate_checkpoint, gmm_spec, prepare_data, run_experiment, train, write_run, HistoryRow, Metrics, RunReport,
    RunStatus, TrainedRun, AUTO_MPG_ENV, CHECKPOINT_DIR, DEFAULT_AUTO_MPG_PATH, CONFIG_FILE, HISTORY_FILE, REPORT_FILE,
};
pub use selftest::{run_selftest, CheckOutcome};
pub use sweep::{
    comparison_kinds, run_comparison, run_sweep, write_comparison_csv, write_sweep_csv, ComparisonRow, SweepResult,
    SweepRow,
};
