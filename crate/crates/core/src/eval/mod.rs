//! Evaluation harness: toy data, the energy-distance quality proxy, threshold sweeps
//! and report files.

pub mod dataset;
pub mod energy;
pub mod report;
pub mod sweep;

pub use dataset::{DatasetKind, Splits, ToyDataset};
pub use energy::{energy_distance, EnergyTest};
pub use report::{emit_report, read_csv, read_json_lines, ReportFormat, ReportTable};
pub use sweep::{
    default_grid, dominating_labels, eta_sweep, evaluate, paired_nll_difference, weakly_dominates, EvalReport,
    QualitySource, SweepConfig,
};
