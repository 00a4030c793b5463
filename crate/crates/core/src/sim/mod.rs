//! Deterministic scenario simulation over independent sub-domain stacks.

pub mod config;
pub mod engine;
pub mod generate;
pub mod presets;
pub mod report;
pub mod validate;

pub use config::ScenarioConfig;
pub use engine::{error_absorption, run_scenario, RunResult, SimError};
pub use presets::load_preset;
pub use report::{build_reports, RunReports};
pub use validate::{validate_str, ConfigError};
