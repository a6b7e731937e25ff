//! Config-driven experiments: parsing, running, JSON results and plots.

mod config;
mod plot;
mod runner;

pub use config::{DatasetSpec, ExperimentConfig, TaskLayout};
pub use plot::{accuracy_plot_svg, emit_plots, heatmap_svg, Series};
pub use runner::{
    aggregate, method_slug, output_dir, run_experiment, Aggregate, AggregateRecord, EnergyRecord,
    ExperimentOutcome, RunRecord, RunStatus, HEATMAP_MAX_PARAMS, SCHEMA_VERSION,
};
