//! Declarative scenario configuration.
//!
//! A scenario is a single JSON document. Task generators are finite
//! distributions (weighted categoricals and uniform ranges) so a scenario
//! stays serializable and diffable.

use std::collections::BTreeMap;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::inventory::ComponentDescriptor;
use crate::metrics::{AdequacyRequirement, CompositeConfig, MetricName};
use crate::policy::{AutonomyLevel, AutonomyThresholds, EscalationTriggerSpec, InvocationPlan};
use crate::rules::RuleSet;
use crate::supervision::AdjudicatorModel;
use crate::types::{CostWeights, RiskClass};

fn default_tick_limit() -> u64 {
    u64::MAX / 4
}

fn one_u64() -> u64 {
    1
}

fn one_f64() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario_id: String,
    #[serde(default)]
    pub seed: u64,
    /// Tasks in each sub-domain's own stream (a sub-domain may override).
    pub n_tasks: usize,
    /// The run fails if any task finalizes after this tick.
    #[serde(default = "default_tick_limit")]
    pub tick_limit: u64,
    #[serde(default)]
    pub cost_weights: CostWeights,
    #[schemars(length(min = 1))]
    pub sub_domains: Vec<SubDomainConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pipelines: Vec<CrossDomainPipeline>,
    #[serde(default)]
    pub report: ReportConfig,
}

impl ScenarioConfig {
    pub fn sub_domain(&self, label: &str) -> Option<&SubDomainConfig> {
        self.sub_domains.iter().find(|s| s.label == label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SubDomainConfig {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_tasks: Option<usize>,
    /// Ticks between consecutive task arrivals.
    #[serde(default = "one_u64")]
    pub arrival_interval: u64,
    #[schemars(length(min = 1))]
    pub task_generator: Vec<TaskTypeGenerator>,
    #[serde(default)]
    pub ruleset: RuleSet,
    #[schemars(length(min = 1))]
    pub components: Vec<ComponentDescriptor>,
    pub plans: Vec<InvocationPlan>,
    pub trigger: EscalationTriggerSpec,
    pub adjudicator: AdjudicatorModel,
    #[serde(default)]
    pub context: ContextPolicy,
    #[serde(default)]
    pub autonomy: AutonomyConfig,
    #[serde(default)]
    pub perturbation: PerturbationConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parsimony: Option<ParsimonyConfig>,
}

impl SubDomainConfig {
    pub fn component(&self, id: &str) -> Option<&ComponentDescriptor> {
        self.components.iter().find(|c| c.component_id == id)
    }

    pub fn generator(&self, task_type: &str) -> Option<&TaskTypeGenerator> {
        self.task_generator.iter().find(|g| g.task_type == task_type)
    }

    pub fn plan(&self, task_type: &str) -> Option<&InvocationPlan> {
        self.plans.iter().find(|p| p.task_type == task_type)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct TaskTypeGenerator {
    pub task_type: String,
    /// Relative frequency in the sub-domain's stream.
    #[serde(default = "one_f64")]
    #[schemars(range(min = 0.0))]
    pub weight: f64,
    /// Every decision label the task type admits.
    #[schemars(length(min = 2))]
    pub alphabet: Vec<String>,
    /// Ground-truth label weights.
    pub labels: BTreeMap<String, f64>,
    /// Risk class weights.
    pub risk: BTreeMap<RiskClass, f64>,
    /// Risk class weights conditional on the ground-truth label.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub label_risk: BTreeMap<String, BTreeMap<RiskClass, f64>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub features: BTreeMap<String, FeatureDist>,
    /// Feature distributions conditional on the ground-truth label.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub label_features: BTreeMap<String, BTreeMap<String, FeatureDist>>,
    #[serde(default)]
    pub context: ContextGenerator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum FeatureDist {
    Uniform { low: f64, high: f64 },
    Categorical(BTreeMap<String, f64>),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct ContextGenerator {
    pub min_items: usize,
    pub max_items: usize,
    #[schemars(range(min = 0.0, max = 1.0))]
    pub relevant_probability: f64,
    /// Items are stamped up to this many ticks before task creation.
    pub max_age: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct ContextPolicy {
    /// Freshest items supplied on the first pass; re-invocations get all.
    pub first_pass_items: usize,
    #[schemars(range(min = 1))]
    pub freshness_horizon: u64,
}

impl Default for ContextPolicy {
    fn default() -> Self {
        ContextPolicy {
            first_pass_items: 3,
            freshness_horizon: 100,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct AutonomyConfig {
    pub thresholds: AutonomyThresholds,
    /// Starting level per task type; unlisted types start at `advise_only`.
    pub initial: BTreeMap<String, AutonomyLevel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbationConfig {
    #[schemars(range(min = 0.0))]
    pub magnitude: f64,
    #[schemars(range(min = 1))]
    pub replicas: usize,
    /// Leading tasks of the stream that are probed.
    pub samples: usize,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        PerturbationConfig {
            magnitude: 0.05,
            replicas: 20,
            samples: 50,
        }
    }
}

fn default_eval_samples() -> usize {
    2000
}

/// Which deployment the parsimony ratio assesses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ParsimonyConfig {
    pub task_type: String,
    pub deployed: String,
    #[serde(default)]
    pub requirement: AdequacyRequirement,
    #[serde(default = "default_eval_samples")]
    #[schemars(range(min = 1))]
    pub eval_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct CrossDomainPipeline {
    pub pipeline_id: String,
    pub instances: usize,
    #[serde(default = "one_u64")]
    pub arrival_interval: u64,
    /// The decision of stage k becomes feature `upstream_decision` of
    /// stage k+1.
    #[schemars(length(min = 2))]
    pub stages: Vec<PipelineStage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct PipelineStage {
    pub sub_domain: String,
    pub task_type: String,
}

fn default_bins() -> usize {
    10
}

fn default_windows() -> usize {
    4
}

fn default_tolerances() -> BTreeMap<MetricName, f64> {
    BTreeMap::from([
        (MetricName::ReviewBurdenIndex, 0.1),
        (MetricName::CalibrationError, 0.1),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    #[serde(default)]
    pub composite: CompositeConfig,
    #[serde(default = "default_bins")]
    #[schemars(range(min = 1))]
    pub ece_bins: usize,
    /// Windows the stability index compares.
    #[serde(default = "default_windows")]
    #[schemars(range(min = 2))]
    pub stability_windows: usize,
    /// Drift tolerance per tracked metric. Only `review_burden_index`,
    /// `calibration_error`, `override_rate` and `escalation_precision` can
    /// be tracked per window.
    #[serde(default = "default_tolerances")]
    pub stability_tolerances: BTreeMap<MetricName, f64>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            composite: CompositeConfig::default(),
            ece_bins: default_bins(),
            stability_windows: default_windows(),
            stability_tolerances: default_tolerances(),
        }
    }
}
