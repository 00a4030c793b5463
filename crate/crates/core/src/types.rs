//! Domain types shared by every layer.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, AddAssign};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

/// Logical time in integer ticks. The runtime never reads a wall clock.
pub type Tick = u64;

/// Ordered risk classes; `Low < Medium < High`.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, JsonSchema,
)]
#[serde(rename_all = "snake_case")]
pub enum RiskClass {
    Low,
    Medium,
    High,
}

impl RiskClass {
    pub fn as_str(self) -> &'static str {
        match self {
            RiskClass::Low => "low",
            RiskClass::Medium => "medium",
            RiskClass::High => "high",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "low" => Some(RiskClass::Low),
            "medium" => Some(RiskClass::Medium),
            "high" => Some(RiskClass::High),
            _ => None,
        }
    }
}

impl fmt::Display for RiskClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A named feature value: numeric or categorical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(untagged)]
pub enum FeatureValue {
    Num(f64),
    Cat(String),
}

impl FeatureValue {
    pub fn as_num(&self) -> Option<f64> {
        match self {
            FeatureValue::Num(v) => Some(*v),
            FeatureValue::Cat(_) => None,
        }
    }

    pub fn as_cat(&self) -> Option<&str> {
        match self {
            FeatureValue::Cat(s) => Some(s),
            FeatureValue::Num(_) => None,
        }
    }
}

/// A time-stamped piece of context that may be supplied to a component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextItem {
    pub key: String,
    pub value: serde_json::Value,
    pub stamped_at: Tick,
    /// Simulator ground truth for relevance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevant: Option<bool>,
}

/// A unit of work flowing through the layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub task_id: String,
    pub task_type: String,
    pub features: BTreeMap<String, FeatureValue>,
    /// Present iff the task was produced by the simulator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
    pub risk_class: RiskClass,
    #[serde(default)]
    pub context_items: Vec<ContextItem>,
    pub created_at: Tick,
    pub sub_domain: String,
}

/// Nonnegative per-axis resource cost. Addition is componentwise.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct CostVector {
    /// Simulated milliseconds.
    #[serde(default)]
    #[schemars(range(min = 0.0))]
    pub latency: f64,
    #[serde(default)]
    #[schemars(range(min = 0.0))]
    pub compute: f64,
    /// Operational spend, with training cost amortized per invocation.
    #[serde(default)]
    #[schemars(range(min = 0.0))]
    pub monetary: f64,
}

impl CostVector {
    pub const ZERO: CostVector = CostVector {
        latency: 0.0,
        compute: 0.0,
        monetary: 0.0,
    };

    pub fn new(latency: f64, compute: f64, monetary: f64) -> Self {
        CostVector {
            latency,
            compute,
            monetary,
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.latency, self.compute, self.monetary]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
    }

    pub fn scale(&self, k: f64) -> Self {
        CostVector::new(self.latency * k, self.compute * k, self.monetary * k)
    }

    pub fn scalarize(&self, w: &CostWeights) -> f64 {
        w.latency * self.latency + w.compute * self.compute + w.monetary * self.monetary
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "latency": self.latency,
            "compute": self.compute,
            "monetary": self.monetary,
        })
    }
}

impl Add for CostVector {
    type Output = CostVector;

    fn add(self, rhs: CostVector) -> CostVector {
        CostVector::new(
            self.latency + rhs.latency,
            self.compute + rhs.compute,
            self.monetary + rhs.monetary,
        )
    }
}

impl AddAssign for CostVector {
    fn add_assign(&mut self, rhs: CostVector) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for CostVector {
    fn sum<I: Iterator<Item = CostVector>>(iter: I) -> Self {
        iter.fold(CostVector::ZERO, Add::add)
    }
}

/// Per-axis weights used to collapse a [`CostVector`] into a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct CostWeights {
    #[schemars(range(min = 0.0))]
    pub latency: f64,
    #[schemars(range(min = 0.0))]
    pub compute: f64,
    #[schemars(range(min = 0.0))]
    pub monetary: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            latency: 1.0,
            compute: 1.0,
            monetary: 1.0,
        }
    }
}

/// A decision with a confidence value and provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub decision: String,
    pub confidence: f64,
    /// Layer plus component id, or `"L1"` / `"L4"`.
    pub source: String,
    pub cost: CostVector,
}

impl Verdict {
    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.confidence) && self.cost.is_valid()
    }
}
