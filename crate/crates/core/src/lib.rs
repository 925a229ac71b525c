//! Sequential estimation-adjusted urn designs: simulation, limiting
//! proportions, and CLT covariances by closed form and quadrature.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod asymptotics;
pub mod design;
pub mod error;
pub mod expr;
pub mod format;
pub mod linalg;
pub mod model;
pub mod montecarlo;
pub mod quadrature;
pub mod rng;
pub mod stats;
pub mod urn;
pub mod validate;

pub use asymptotics::{
    corollary32_variances, example2_closed_form, example3_closed_form, full_report,
    printed_closed_form, rpw_reference_variances, spectral_gap, stationary_proportion,
    AsymptoticReport, PrintedClosedForm, ReportOptions, RpwReference,
};
pub use design::{
    bhs_design, classic_rpw_design, generic_target_design, optimal_allocation_design,
    rpw_target_design, target_design_from_expr, Design, DesignId,
};
pub use error::{Result, SeuError};
pub use model::{ArmDistribution, ResponseModel};
pub use montecarlo::{run_batch, BatchConfig, EnsembleStats};
pub use rng::RngStream;
pub use urn::{init_state, run_trial, UrnState};
pub use validate::{validate_design, ValidationReport};
