//! Transfer scenarios, the run configuration and report emission.

pub mod config;
pub mod report;
pub mod runner;
pub mod scenario;

pub use config::{parse_scenarios, RunConfig};
pub use report::{check_consistency, emit_table, markdown_report, parse_csv, records_to_csv, Report, RunMetadata};
pub use runner::{
    check_scenario, load_scenario_data, predict_file, predict_with, run_scenario, run_suite, train_scenario,
    LoadAudit, ScenarioData, ScenarioOutcome,
};
pub use scenario::Scenario;
