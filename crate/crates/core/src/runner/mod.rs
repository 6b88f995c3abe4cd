//! Experiment orchestration: per-session training, baselines, ablation
//! sweeps, reporting and gradient verification.

mod config;
mod gradcheck;
mod report;
mod sweep;
mod train;

pub use config::{DatasetSource, LossToggles, Method, ReplayBudget, RunConfig};
pub use gradcheck::{grad_check_suite, GradCheckConfig, GradCheckReport, TermCheck};
pub use report::{write_outputs, LossSummary, RunReport, SessionMetrics, METRICS_HEADER};
pub use sweep::{ablation_rows, run_sweep, AblationRow, SweepReport, SweepRow};
pub use train::{run_experiment, run_experiment_with_state, train_session, RunState, SessionContext};
