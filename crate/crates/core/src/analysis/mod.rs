//! Experiments and oracles for estimator moments, convergence bounds, cost
//! accounting and jvp spikes.

pub mod bounds;
pub mod checks;
pub mod experiment;
pub mod objectives;
pub mod spikes;
pub mod suites;

pub use bounds::{check_bound, theorem_bound, BoundInputs, BoundMethod, TheoryBound};
pub use experiment::{
    convergence_experiment, tune_eta, MethodKind, RunConfig, RunOutcome, RunRecord, Variant,
};
pub use objectives::{ObjectiveSpec, Problem};
pub use spikes::{jvp_spike_report, SpikeSummary};
pub use suites::{cost_benchmark, run_suite, CheckResult, Comparison, CostBenchmark, Suite};
