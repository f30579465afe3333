//! Experiment runner and the verification / export commands behind the CLI.

mod config;
mod export;
mod run;
mod verify;

pub use config::{CheckBounds, DatasetKind, ExperimentConfig, InitKind};
pub use export::{cmd_export_boundary, cmd_export_histogram, gate_histogram, BOUNDARY_X, BOUNDARY_Y};
pub use run::{
    adapt_growth, build_model, check_outcome, cmd_train, load_data, metrics_row, trainer_config, RunOutcome,
    METRICS_HEADER,
};
pub use verify::{cmd_verify_arm, ArmReport, ObjectiveKind, QuadraticObjective};

use crate::error::NpnError;
use crate::net::{ArchSpec, Template};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_CHECK: i32 = 4;

/// Process exit status for an error.
pub fn exit_code(err: &NpnError) -> i32 {
    match err {
        NpnError::Config(_) | NpnError::Parse { .. } | NpnError::Usage(_) => EXIT_CONFIG,
        NpnError::Numeric(_) => EXIT_NUMERIC,
        NpnError::Io { .. } => EXIT_FAILURE,
    }
}

pub fn cmd_count_params(template: &str, arch: &str) -> crate::Result<usize> {
    let template: Template = template.parse()?;
    let arch: ArchSpec = arch.parse()?;
    template.count_params(&arch)
}
