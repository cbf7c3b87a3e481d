//! Episode runner, metrics, safety checks and multi-seed evaluation.

pub mod config;
pub mod episode;
pub mod evaluate;
pub mod metrics;
pub mod safety;

pub use config::{ablate, sweep, EvalSection, RunConfig, SweepSection, TrainSection, ABLATION_ROWS};
pub use episode::{run_episode, run_episode_with, ControllerKind, DecisionRecord, EpisodeOptions, EpisodeOutput, Refiner};
pub use evaluate::{
    digest, evaluate, plot_series, read_json, summarize_records, summary_table, write_csv, write_json, write_plotdata,
    EmergencySpec, EvalSpec, PlotPoint, RunManifest, SeedRecord, Stat, SummaryRow, Workload,
};
pub use metrics::{metrics_from_log, metrics_from_vehicles, MetricsRecord};
pub use safety::{check_episode, green_durations, Violation};
