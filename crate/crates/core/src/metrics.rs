//! The 17-metric trust suite, parsimony, and uncertainty aggregation.
//!
//! Metric values are computed elsewhere (mostly by [`crate::audit`] from
//! evidence logs). This module owns the canonical name set, the
//! cross-cutting formulas that do not belong to a single layer, the
//! orientation map used before compositing, and [`gum_combine`].

use std::collections::BTreeMap;
use std::fmt;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inventory::ComponentDescriptor;
use crate::policy::AutonomyLevel;
use crate::types::{CostWeights, Tick};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("deployed component `{0}` does not meet the adequacy requirement")]
    InadequateDeployment(String),
    #[error("no component meets the adequacy requirement")]
    NoAdequateComponent,
    #[error("no evaluation result for component `{0}`")]
    MissingEvaluation(String),
    #[error("component `{0}` has zero scalarized cost")]
    ZeroCost(String),
    #[error("stability needs at least two windows, got {0}")]
    SingleWindow(usize),
    #[error("tolerance for `{0}` must be positive")]
    NonPositiveTolerance(String),
    #[error("{weights} weights for {metrics} metrics")]
    WeightMismatch { metrics: usize, weights: usize },
    #[error("weights must be nonnegative and sum to 1 (sum = {0})")]
    InvalidWeights(f64),
    #[error("report has {got} metrics, expected {expected}")]
    IncompleteRun { got: usize, expected: usize },
    #[error("unknown metric `{0}`")]
    UnknownMetric(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, JsonSchema)]
pub enum Layer {
    L1,
    L2,
    L3,
    L4,
    #[serde(rename = "cross")]
    Cross,
    #[serde(rename = "parsimony")]
    Parsimony,
}

impl Layer {
    pub fn as_str(self) -> &'static str {
        match self {
            Layer::L1 => "L1",
            Layer::L2 => "L2",
            Layer::L3 => "L3",
            Layer::L4 => "L4",
            Layer::Cross => "cross",
            Layer::Parsimony => "parsimony",
        }
    }
}

/// How the reported uncertainty of a metric is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UncertaintyKind {
    /// Binomial standard error `sqrt(v(1−v)/n)`.
    Binomial,
    /// Standard error of a sample mean.
    SampleMean,
    /// No Type-A estimate; reported as 0.
    None,
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, JsonSchema,
)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    RuleCoverageRate,
    RuleConsistencyIndex,
    UpdateTraceabilityCoefficient,
    ContextRelevancePrecision,
    ContextFreshnessIndex,
    InputPerturbationStabilityRate,
    EscalationPrecision,
    TierCostCoefficient,
    FalsePositiveAttenuation,
    ReviewBurdenIndex,
    OverrideRate,
    SignalToNoiseRatio,
    EvidenceTrailCompleteness,
    CalibrationError,
    AutonomyBoundaryCompliance,
    OperationalStabilityIndex,
    ComputationalParsimonyRatio,
}

impl MetricName {
    /// The canonical set, in report order.
    pub const ALL: [MetricName; 17] = [
        MetricName::RuleCoverageRate,
        MetricName::RuleConsistencyIndex,
        MetricName::UpdateTraceabilityCoefficient,
        MetricName::ContextRelevancePrecision,
        MetricName::ContextFreshnessIndex,
        MetricName::InputPerturbationStabilityRate,
        MetricName::EscalationPrecision,
        MetricName::TierCostCoefficient,
        MetricName::FalsePositiveAttenuation,
        MetricName::ReviewBurdenIndex,
        MetricName::OverrideRate,
        MetricName::SignalToNoiseRatio,
        MetricName::EvidenceTrailCompleteness,
        MetricName::CalibrationError,
        MetricName::AutonomyBoundaryCompliance,
        MetricName::OperationalStabilityIndex,
        MetricName::ComputationalParsimonyRatio,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MetricName::RuleCoverageRate => "rule_coverage_rate",
            MetricName::RuleConsistencyIndex => "rule_consistency_index",
            MetricName::UpdateTraceabilityCoefficient => "update_traceability_coefficient",
            MetricName::ContextRelevancePrecision => "context_relevance_precision",
            MetricName::ContextFreshnessIndex => "context_freshness_index",
            MetricName::InputPerturbationStabilityRate => "input_perturbation_stability_rate",
            MetricName::EscalationPrecision => "escalation_precision",
            MetricName::TierCostCoefficient => "tier_cost_coefficient",
            MetricName::FalsePositiveAttenuation => "false_positive_attenuation",
            MetricName::ReviewBurdenIndex => "review_burden_index",
            MetricName::OverrideRate => "override_rate",
            MetricName::SignalToNoiseRatio => "signal_to_noise_ratio",
            MetricName::EvidenceTrailCompleteness => "evidence_trail_completeness",
            MetricName::CalibrationError => "calibration_error",
            MetricName::AutonomyBoundaryCompliance => "autonomy_boundary_compliance",
            MetricName::OperationalStabilityIndex => "operational_stability_index",
            MetricName::ComputationalParsimonyRatio => "computational_parsimony_ratio",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        MetricName::ALL.into_iter().find(|m| m.as_str() == s)
    }

    pub fn layer(self) -> Layer {
        use MetricName::*;
        match self {
            RuleCoverageRate | RuleConsistencyIndex | UpdateTraceabilityCoefficient => Layer::L1,
            ContextRelevancePrecision | ContextFreshnessIndex | InputPerturbationStabilityRate => {
                Layer::L2
            }
            EscalationPrecision | TierCostCoefficient | FalsePositiveAttenuation => Layer::L3,
            ReviewBurdenIndex | OverrideRate | SignalToNoiseRatio => Layer::L4,
            EvidenceTrailCompleteness
            | CalibrationError
            | AutonomyBoundaryCompliance
            | OperationalStabilityIndex => Layer::Cross,
            ComputationalParsimonyRatio => Layer::Parsimony,
        }
    }

    pub fn uncertainty_kind(self) -> UncertaintyKind {
        use MetricName::*;
        match self {
            ContextFreshnessIndex => UncertaintyKind::SampleMean,
            TierCostCoefficient | SignalToNoiseRatio | OperationalStabilityIndex
            | ComputationalParsimonyRatio => UncertaintyKind::None,
            _ => UncertaintyKind::Binomial,
        }
    }

    /// Ratio metrics are counts over counts, so recomputation from logs
    /// must reproduce them exactly.
    pub fn is_ratio(self) -> bool {
        self.uncertainty_kind() == UncertaintyKind::Binomial
    }

    pub fn default_orientation(self) -> Orientation {
        use MetricName::*;
        match self {
            CalibrationError | ReviewBurdenIndex | OverrideRate => Orientation::Complement,
            TierCostCoefficient => Orientation::Reciprocal,
            SignalToNoiseRatio => Orientation::Saturating,
            _ => Orientation::AsIs,
        }
    }
}

impl fmt::Display for MetricName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Maps a raw metric onto [0, 1] with higher meaning better.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    AsIs,
    /// `1 − v`.
    Complement,
    /// `1 / v`, for cost ratios that are at least 1.
    Reciprocal,
    /// `v / (1 + v)`, for unbounded nonnegative ratios.
    Saturating,
}

impl Orientation {
    /// Oriented value and uncertainty, propagating `u` through the
    /// derivative of the transform.
    pub fn apply(self, v: f64, u: f64) -> (f64, f64) {
        match self {
            Orientation::AsIs => (v, u),
            Orientation::Complement => (1.0 - v, u),
            Orientation::Reciprocal => {
                if v <= 0.0 {
                    (0.0, 0.0)
                } else {
                    (1.0 / v, u / (v * v))
                }
            }
            Orientation::Saturating => (v / (1.0 + v), u / ((1.0 + v) * (1.0 + v))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub name: MetricName,
    pub value: f64,
    pub std_uncertainty: f64,
    pub n: usize,
    pub layer: Layer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl MetricValue {
    /// Attaches the default uncertainty estimate for the metric's kind.
    pub fn new(name: MetricName, value: f64, n: usize) -> Self {
        let u = match name.uncertainty_kind() {
            UncertaintyKind::Binomial => binomial_se(value, n),
            _ => 0.0,
        };
        MetricValue {
            name,
            value,
            std_uncertainty: u,
            n,
            layer: name.layer(),
            note: None,
        }
    }

    pub fn with_uncertainty(mut self, u: f64) -> Self {
        self.std_uncertainty = u;
        self
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = Some(note.into());
        self
    }
}

/// `sqrt(v(1−v)/n)`, 0 when `n` is 0.
pub fn binomial_se(v: f64, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    (v * (1.0 - v) / n as f64).max(0.0).sqrt()
}

/// Standard error of the mean of `xs` (sample standard deviation / sqrt n).
pub fn sample_mean_se(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// Composite `Σ w·v` and combined uncertainty `sqrt(Σ w²·u²)`.
pub fn gum_combine(metrics: &[MetricValue], weights: &[f64]) -> Result<(f64, f64), MetricsError> {
    if metrics.len() != weights.len() {
        return Err(MetricsError::WeightMismatch {
            metrics: metrics.len(),
            weights: weights.len(),
        });
    }
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) || (sum - 1.0).abs() > 1e-9 {
        return Err(MetricsError::InvalidWeights(sum));
    }
    let composite = metrics.iter().zip(weights).map(|(m, w)| w * m.value).sum();
    let var: f64 = metrics
        .iter()
        .zip(weights)
        .map(|(m, w)| w * w * m.std_uncertainty * m.std_uncertainty)
        .sum();
    Ok((composite, var.sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct AdequacyRequirement {
    #[serde(default)]
    #[schemars(range(min = 0.0, max = 1.0))]
    pub min_accuracy: f64,
    #[serde(default = "one")]
    #[schemars(range(min = 0.0, max = 1.0))]
    pub max_calibration_error: f64,
    /// Milliseconds; unbounded when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    #[schemars(range(min = 0.0))]
    pub max_latency: Option<f64>,
}

fn one() -> f64 {
    1.0
}

impl Default for AdequacyRequirement {
    fn default() -> Self {
        AdequacyRequirement {
            min_accuracy: 0.0,
            max_calibration_error: 1.0,
            max_latency: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub ece: f64,
    pub latency: f64,
}

impl AdequacyRequirement {
    pub fn is_met_by(&self, e: &EvalResult) -> bool {
        e.accuracy >= self.min_accuracy
            && e.ece <= self.max_calibration_error
            && self.max_latency.is_none_or(|l| e.latency <= l)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CprResult {
    pub value: f64,
    pub cheapest_adequate: String,
    pub adequate: Vec<String>,
    pub deployed_cost: f64,
    pub cheapest_cost: f64,
}

/// Scans every component for adequacy and divides the cheapest adequate
/// scalarized cost by the deployed component's.
pub fn cpr(
    deployed: &ComponentDescriptor,
    inventory: &[ComponentDescriptor],
    requirement: &AdequacyRequirement,
    eval_results: &BTreeMap<String, EvalResult>,
    weights: &CostWeights,
) -> Result<CprResult, MetricsError> {
    let eval = |c: &ComponentDescriptor| {
        eval_results
            .get(&c.component_id)
            .ok_or_else(|| MetricsError::MissingEvaluation(c.component_id.clone()))
    };
    if !requirement.is_met_by(eval(deployed)?) {
        return Err(MetricsError::InadequateDeployment(deployed.component_id.clone()));
    }
    let mut adequate = Vec::new();
    let mut best: Option<(&ComponentDescriptor, f64)> = None;
    for c in inventory {
        if !requirement.is_met_by(eval(c)?) {
            continue;
        }
        adequate.push(c.component_id.clone());
        let cost = c.invocation_cost().scalarize(weights);
        if best.is_none_or(|(_, b)| cost < b) {
            best = Some((c, cost));
        }
    }
    let (cheapest, cheapest_cost) = best.ok_or(MetricsError::NoAdequateComponent)?;
    let deployed_cost = deployed.invocation_cost().scalarize(weights);
    if deployed_cost <= 0.0 {
        return Err(MetricsError::ZeroCost(deployed.component_id.clone()));
    }
    Ok(CprResult {
        value: cheapest_cost / deployed_cost,
        cheapest_adequate: cheapest.component_id.clone(),
        adequate,
        deployed_cost,
        cheapest_cost,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AutonomyAction {
    pub executed_level: AutonomyLevel,
    pub granted_level: AutonomyLevel,
}

pub fn autonomy_boundary_compliance(actions: &[AutonomyAction]) -> f64 {
    if actions.is_empty() {
        return 1.0;
    }
    let ok = actions
        .iter()
        .filter(|a| a.executed_level <= a.granted_level)
        .count();
    ok as f64 / actions.len() as f64
}

/// `1 − min(1, max_m max_w |m_w − m_1| / τ_m)`.
pub fn operational_stability_index(
    series: &BTreeMap<String, Vec<f64>>,
    tolerances: &BTreeMap<String, f64>,
) -> Result<f64, MetricsError> {
    let mut worst = 0.0f64;
    for (name, xs) in series {
        if xs.len() < 2 {
            return Err(MetricsError::SingleWindow(xs.len()));
        }
        let tau = tolerances.get(name).copied().unwrap_or(0.0);
        if tau <= 0.0 || !tau.is_finite() {
            return Err(MetricsError::NonPositiveTolerance(name.clone()));
        }
        for x in &xs[1..] {
            worst = worst.max((x - xs[0]).abs() / tau);
        }
    }
    Ok(1.0 - worst.min(1.0))
}

/// Compositing configuration: per-metric weights and orientations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct CompositeConfig {
    /// Missing metrics get weight 0. Defaults to equal weights.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<BTreeMap<MetricName, f64>>,
    /// Overrides of the default orientation map.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub orientation: BTreeMap<MetricName, Orientation>,
}

impl CompositeConfig {
    pub fn weight_vector(&self) -> Vec<f64> {
        match &self.weights {
            None => vec![1.0 / MetricName::ALL.len() as f64; MetricName::ALL.len()],
            Some(w) => MetricName::ALL
                .iter()
                .map(|m| w.get(m).copied().unwrap_or(0.0))
                .collect(),
        }
    }

    pub fn orientation_of(&self, m: MetricName) -> Orientation {
        self.orientation
            .get(&m)
            .copied()
            .unwrap_or_else(|| m.default_orientation())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub scenario_id: String,
    pub seed: u64,
    pub tick_span: [Tick; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustReport {
    pub scope: String,
    pub meta: RunMeta,
    pub metrics: Vec<MetricValue>,
    pub composite_trust_score: f64,
    pub composite_uncertainty: f64,
}

impl TrustReport {
    /// Checks cardinality and canonical order, orients each metric and
    /// combines them.
    pub fn assemble(
        scope: impl Into<String>,
        meta: RunMeta,
        metrics: Vec<MetricValue>,
        composite: &CompositeConfig,
    ) -> Result<TrustReport, MetricsError> {
        if metrics.len() != MetricName::ALL.len() {
            return Err(MetricsError::IncompleteRun {
                got: metrics.len(),
                expected: MetricName::ALL.len(),
            });
        }
        for (m, expected) in metrics.iter().zip(MetricName::ALL) {
            if m.name != expected {
                return Err(MetricsError::UnknownMetric(format!(
                    "{} in the position of {}",
                    m.name, expected
                )));
            }
        }
        let (score, u) = composite_of(&metrics, composite)?;
        Ok(TrustReport {
            scope: scope.into(),
            meta,
            metrics,
            composite_trust_score: score,
            composite_uncertainty: u,
        })
    }

    pub fn get(&self, name: MetricName) -> Option<&MetricValue> {
        self.metrics.iter().find(|m| m.name == name)
    }
}

/// Orients every metric per the configuration and runs [`gum_combine`].
pub fn composite_of(
    metrics: &[MetricValue],
    composite: &CompositeConfig,
) -> Result<(f64, f64), MetricsError> {
    let oriented: Vec<MetricValue> = metrics
        .iter()
        .map(|m| {
            let (v, u) = composite
                .orientation_of(m.name)
                .apply(m.value, m.std_uncertainty);
            MetricValue {
                value: v.clamp(0.0, 1.0),
                std_uncertainty: u,
                ..m.clone()
            }
        })
        .collect();
    gum_combine(&oriented, &composite.weight_vector())
}
