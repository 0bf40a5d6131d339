//! Finite-sample checks of the leave-one-out, leave-one-predictor-out and
//! distributional approximations.

pub mod law;
pub mod loo;
pub mod lop;
pub mod sweep;
pub mod trace;

pub use law::{residual_law_check, KsMethod, LawCheck};
pub use loo::{loo_indices, loo_report, loo_report_with, summarize_loo, LooOptions, LooReport, LooRow, LooSummary};
pub use lop::{lop_report, LopReport, LopSummary};
pub use sweep::{
    c_tau_concentration, predictors, second_moment_identity, variance_sweep, CtauSummary, SecondMoment, VarianceRow,
    VarianceSweep,
};
pub use trace::{trace_perturbation, trace_perturbation_check, TraceCheck, TracePerturbation};
