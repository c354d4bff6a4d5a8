//! Run orchestration: manifests, resumable training runs, sweeps and
//! aggregation of finished runs into plot-ready tables.

mod aggregate;
mod manifest;
mod run;
mod sweep;

pub use aggregate::{aggregate, find_runs, AggregateSummary, CellStats, Correlation, FieldStats, AGGREGATE_SCHEMA};
pub use manifest::{RunManifest, MANIFEST_SCHEMA};
pub use run::{
    evaluate_run, phases, prepare_dataset, probe_run, read_probe, read_reports, run_condition, run_with_dataset, Phase, RunOptions, RunOutcome, CHECKPOINT_FILE,
    DONE_FILE, LOSSES_FILE, MANIFEST_FILE, MAPPING_FILE, PROBE_FILE, REPORTS_FILE,
};
pub use sweep::{sweep, SweepGrid, SweepSummary};
