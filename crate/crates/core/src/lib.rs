//! Layered decision orchestration with hash-chained evidence, an
//! escalation policy, earned autonomy and a 17-metric trust report.
//!
//! Start with [`sim::run_scenario`] and [`artifacts::write_run`], or read
//! the guide under `book/`.

pub mod artifacts;
pub mod audit;
pub mod evidence;
pub mod inventory;
pub mod metrics;
pub mod policy;
pub mod rng;
pub mod rules;
pub mod sim;
pub mod supervision;
pub mod types;

// keeps the guide's snippets compiling
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/evidence.md")]
    pub struct Evidence;
    #[doc = include_str!("../../../book/src/rules_and_components.md")]
    pub struct RulesAndComponents;
    #[doc = include_str!("../../../book/src/policy.md")]
    pub struct Policy;
    #[doc = include_str!("../../../book/src/supervision.md")]
    pub struct Supervision;
    #[doc = include_str!("../../../book/src/metrics.md")]
    pub struct Metrics;
    #[doc = include_str!("../../../book/src/simulation.md")]
    pub struct Simulation;
}
