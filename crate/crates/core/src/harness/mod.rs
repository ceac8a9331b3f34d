//! Multi-epoch experiments: configuration, the training loop, and sweeps
//! over optimizers, `alpha` values and filter ratios.

mod config;
mod run;
mod sweeps;

pub use config::{ArchConfig, DataSource, ExperimentConfig, FilterConfig, Seeds};
pub use run::{
    prepare_data, run_experiment, train, EpochSummary, ExperimentReport, NoopObserver,
    PreparedData, TrainObserver, TrainedModel,
};
pub use sweeps::{
    compare_methods, default_alpha_grid, filter_ratio_sweep, grid_search_alpha, ComparisonTable,
    FilterSweepRow, GridRow, GridSearchResult, MethodRow,
};
