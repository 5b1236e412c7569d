//! Config-driven sweeps: parse a TOML experiment, run every arm on every
//! seed in parallel, and write logs, curves, a summary and a plot.

mod config;
mod output;
mod run;

pub use config::{
    ArmConfig, ArmPlan, BaseEnv, CompareSpec, EnvConfig, EvalConfig, ExperimentConfig, FailureSpec, LoggingConfig, MdpSource,
    Metric, WrapperSpec,
};
pub use output::{emit_outputs, load_sweep, render_svg, report, seed_csv_path, Sweep};
pub use run::{
    aggregate, eval_seeds, run_experiment, run_single, ArmSummary, ComparisonEntry, CurvePoint, EvalSummary, RunEntry,
    RunFailure, RunOutcome, Summary,
};
