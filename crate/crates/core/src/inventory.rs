//! Stateless learned-component inventory.
//!
//! Components are split into L2a (classical/specialised models) and L2b
//! (generative validators). The shipped implementations are simulated: a
//! component's behavior is fully described by a [`SimulatedComponentSpec`]
//! and a random stream, so every invocation is a pure function of its
//! inputs and the stream position.

use std::collections::BTreeSet;
use std::fmt;

use rand::{Rng, RngCore};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{ContextItem, CostVector, FeatureValue, TaskInstance, Tick, Verdict};

#[derive(Debug, Error, PartialEq)]
pub enum InventoryError {
    #[error("component `{component}` does not support task type `{task_type}`")]
    UnsupportedTaskType { component: String, task_type: String },
    #[error("task `{0}` carries no ground truth; the oracle component cannot run")]
    MissingGroundTruth(String),
    #[error("decision alphabet is empty")]
    EmptyAlphabet,
    #[error("input is empty")]
    EmptyInput,
    #[error("bin count must be at least 1")]
    ZeroBins,
    #[error("task has no numeric features to perturb")]
    NoNumericFeatures,
    #[error("replica count must be at least 1")]
    ZeroReplicas,
    #[error("freshness horizon must be positive")]
    NonPositiveHorizon,
    #[error("context item `{key}` is stamped at {stamped_at}, after now = {now}")]
    ContextFromFuture { key: String, stamped_at: Tick, now: Tick },
    #[error("context item `{0}` has no relevance label")]
    MissingRelevanceLabels(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, JsonSchema)]
pub enum ComponentClass {
    L2a,
    L2b,
}

impl fmt::Display for ComponentClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ComponentClass::L2a => "L2a",
            ComponentClass::L2b => "L2b",
        })
    }
}

/// How a simulated component forms its reference decision before noise.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum DecisionMode {
    /// The task's ground truth.
    #[default]
    Oracle,
    /// `at_or_above` when the numeric feature is >= `threshold`, else `below`.
    Threshold {
        feature: String,
        threshold: f64,
        at_or_above: String,
        below: String,
    },
}

fn default_context_gain() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SimulatedComponentSpec {
    /// Probability of emitting the reference decision.
    #[schemars(range(min = 0.0, max = 1.0))]
    pub accuracy: f64,
    /// Half-width of the uniform noise added to reported confidence.
    #[serde(default)]
    #[schemars(range(min = 0.0))]
    pub confidence_noise: f64,
    /// Additive bias on reported confidence.
    #[serde(default)]
    #[schemars(range(min = -1.0, max = 1.0))]
    pub miscalibration_shift: f64,
    /// L2b only: chance of a fabricated label at confidence >= 0.9.
    #[serde(default)]
    #[schemars(range(min = 0.0, max = 1.0))]
    pub hallucination_rate: f64,
    #[serde(default)]
    pub latency_ticks: u64,
    /// Multiplier on the error probability when re-invoked with strictly
    /// more context.
    #[serde(default = "default_context_gain")]
    #[schemars(range(min = 0.0, max = 1.0))]
    pub context_gain: f64,
    #[serde(default)]
    pub decision_mode: DecisionMode,
}

impl SimulatedComponentSpec {
    pub fn with_accuracy(accuracy: f64) -> Self {
        SimulatedComponentSpec {
            accuracy,
            confidence_noise: 0.0,
            miscalibration_shift: 0.0,
            hallucination_rate: 0.0,
            latency_ticks: 0,
            context_gain: default_context_gain(),
            decision_mode: DecisionMode::Oracle,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ComponentDescriptor {
    pub component_id: String,
    pub component_class: ComponentClass,
    #[serde(default)]
    pub cost_per_invocation: CostVector,
    /// Defaults to the simulated accuracy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    #[schemars(range(min = 0.0, max = 1.0))]
    pub capability: Option<f64>,
    #[schemars(length(min = 1))]
    pub supported_task_types: BTreeSet<String>,
    pub sim: SimulatedComponentSpec,
}

impl ComponentDescriptor {
    pub fn new(
        component_id: impl Into<String>,
        class: ComponentClass,
        task_types: &[&str],
        sim: SimulatedComponentSpec,
    ) -> Self {
        ComponentDescriptor {
            component_id: component_id.into(),
            component_class: class,
            cost_per_invocation: CostVector::ZERO,
            capability: None,
            supported_task_types: task_types.iter().map(|s| s.to_string()).collect(),
            sim,
        }
    }

    pub fn with_cost(mut self, cost: CostVector) -> Self {
        self.cost_per_invocation = cost;
        self
    }

    pub fn capability(&self) -> f64 {
        self.capability.unwrap_or(self.sim.accuracy)
    }

    pub fn supports(&self, task_type: &str) -> bool {
        self.supported_task_types.contains(task_type)
    }

    /// Per-invocation cost, with `latency_ticks` added to latency (one tick
    /// is accounted as one millisecond).
    pub fn invocation_cost(&self) -> CostVector {
        let mut c = self.cost_per_invocation;
        c.latency += self.sim.latency_ticks as f64;
        c
    }

    pub fn source_tag(&self) -> String {
        format!("{}:{}", self.component_class, self.component_id)
    }

    /// Human-readable calibration profile.
    pub fn calibration_profile(&self) -> String {
        format!(
            "reported = clip(p_correct {:+.3} ± {:.3})",
            self.sim.miscalibration_shift, self.sim.confidence_noise
        )
    }
}

#[derive(Debug, Clone)]
pub struct InvocationRequest<'a> {
    pub task: &'a TaskInstance,
    /// Subset of `task.context_items`.
    pub supplied_context: Vec<ContextItem>,
    /// 1 for the first pass, > 1 for re-invocations.
    pub attempt: u32,
    /// Number of context items supplied on the first pass.
    pub baseline_context: usize,
    pub alphabet: &'a [String],
}

impl<'a> InvocationRequest<'a> {
    pub fn first_pass(task: &'a TaskInstance, alphabet: &'a [String]) -> Self {
        InvocationRequest {
            task,
            supplied_context: Vec::new(),
            attempt: 1,
            baseline_context: 0,
            alphabet,
        }
    }

    pub fn has_expanded_context(&self) -> bool {
        self.attempt > 1 && self.supplied_context.len() > self.baseline_context
    }
}

/// The random draws one invocation consumes, taken in a fixed order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvocationDraws {
    pub correct: f64,
    pub wrong_pick: f64,
    pub hallucinate: f64,
    pub hallucination_pick: f64,
    pub hallucination_confidence: f64,
    pub noise: f64,
}

impl InvocationDraws {
    pub fn sample<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        InvocationDraws {
            correct: rng.random(),
            wrong_pick: rng.random(),
            hallucinate: rng.random(),
            hallucination_pick: rng.random(),
            hallucination_confidence: rng.random(),
            noise: rng.random(),
        }
    }
}

fn pick_other<'a>(alphabet: &'a [String], exclude: &str, u: f64) -> Option<&'a String> {
    let others: Vec<&String> = alphabet.iter().filter(|l| l.as_str() != exclude).collect();
    if others.is_empty() {
        return None;
    }
    let idx = ((u * others.len() as f64) as usize).min(others.len() - 1);
    Some(others[idx])
}

/// Effective probability of emitting the reference decision for this
/// request, after any expanded-context gain.
pub fn effective_accuracy(component: &ComponentDescriptor, request: &InvocationRequest<'_>) -> f64 {
    let acc = component.sim.accuracy;
    if request.has_expanded_context() {
        1.0 - (1.0 - acc) * component.sim.context_gain
    } else {
        acc
    }
}

/// Deterministic part of an invocation: maps fixed draws to a verdict.
pub fn resolve(
    component: &ComponentDescriptor,
    request: &InvocationRequest<'_>,
    draws: &InvocationDraws,
) -> Result<Verdict, InventoryError> {
    let task = request.task;
    if !component.supports(&task.task_type) {
        return Err(InventoryError::UnsupportedTaskType {
            component: component.component_id.clone(),
            task_type: task.task_type.clone(),
        });
    }
    if request.alphabet.is_empty() {
        return Err(InventoryError::EmptyAlphabet);
    }
    let reference = match &component.sim.decision_mode {
        DecisionMode::Oracle => task
            .ground_truth
            .clone()
            .ok_or_else(|| InventoryError::MissingGroundTruth(task.task_id.clone()))?,
        DecisionMode::Threshold {
            feature,
            threshold,
            at_or_above,
            below,
        } => match task.features.get(feature).and_then(FeatureValue::as_num) {
            Some(x) if x >= *threshold => at_or_above.clone(),
            _ => below.clone(),
        },
    };
    let p_correct = effective_accuracy(component, request);
    let mut decision = if draws.correct < p_correct {
        reference.clone()
    } else {
        pick_other(request.alphabet, &reference, draws.wrong_pick)
            .cloned()
            .unwrap_or_else(|| reference.clone())
    };
    let noise = component.sim.confidence_noise * (2.0 * draws.noise - 1.0);
    let mut confidence = (p_correct + component.sim.miscalibration_shift + noise).clamp(0.0, 1.0);
    if component.component_class == ComponentClass::L2b
        && draws.hallucinate < component.sim.hallucination_rate
    {
        if let Some(fabricated) = pick_other(request.alphabet, &reference, draws.hallucination_pick)
        {
            decision = fabricated.clone();
            confidence = 0.9 + 0.1 * draws.hallucination_confidence;
        }
    }
    Ok(Verdict {
        decision,
        confidence,
        source: component.source_tag(),
        cost: component.invocation_cost(),
    })
}

/// Invokes a component. Stateless: the verdict depends only on the
/// component, the request and the stream position.
pub fn invoke<R: RngCore + ?Sized>(
    component: &ComponentDescriptor,
    request: &InvocationRequest<'_>,
    rng: &mut R,
) -> Result<Verdict, InventoryError> {
    let draws = InvocationDraws::sample(rng);
    resolve(component, request, &draws)
}

/// Fraction of perturbed replicas whose decision matches the unperturbed
/// one. Every numeric feature is jittered uniformly within `±magnitude`;
/// the decision-noise draw is shared across all replicas.
pub fn input_perturbation_stability<R: RngCore + ?Sized>(
    component: &ComponentDescriptor,
    request: &InvocationRequest<'_>,
    magnitude: f64,
    n: usize,
    rng: &mut R,
) -> Result<f64, InventoryError> {
    if n == 0 {
        return Err(InventoryError::ZeroReplicas);
    }
    let numeric: Vec<&String> = request
        .task
        .features
        .iter()
        .filter(|(_, v)| v.as_num().is_some())
        .map(|(k, _)| k)
        .collect();
    if numeric.is_empty() {
        return Err(InventoryError::NoNumericFeatures);
    }
    let draws = InvocationDraws::sample(rng);
    let base = resolve(component, request, &draws)?;
    let mut stable = 0usize;
    let mut replica = request.task.clone();
    for _ in 0..n {
        for k in &numeric {
            let x = request.task.features[*k].as_num().expect("numeric");
            let jitter = if magnitude > 0.0 {
                rng.random_range(-magnitude..=magnitude)
            } else {
                0.0
            };
            replica
                .features
                .insert((*k).clone(), FeatureValue::Num(x + jitter));
        }
        let req = InvocationRequest {
            task: &replica,
            ..request.clone()
        };
        if resolve(component, &req, &draws)?.decision == base.decision {
            stable += 1;
        }
    }
    Ok(stable as f64 / n as f64)
}

/// Per-bin statistics of a reliability diagram.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

fn bin_index(confidence: f64, bins: usize) -> usize {
    // right-closed: (k/B, (k+1)/B]; zero lands in the first bin
    let idx = (confidence * bins as f64).ceil() as isize - 1;
    idx.clamp(0, bins as isize - 1) as usize
}

/// Equal-width reliability bins over [0, 1].
pub fn reliability_bins(
    pairs: &[(f64, bool)],
    bins: usize,
) -> Result<Vec<ReliabilityBin>, InventoryError> {
    if bins == 0 {
        return Err(InventoryError::ZeroBins);
    }
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0f64; bins];
    let mut hits = vec![0usize; bins];
    for &(c, ok) in pairs {
        let b = bin_index(c, bins);
        count[b] += 1;
        conf[b] += c;
        hits[b] += ok as usize;
    }
    Ok((0..bins)
        .map(|b| {
            let n = count[b];
            ReliabilityBin {
                lower: b as f64 / bins as f64,
                upper: (b + 1) as f64 / bins as f64,
                count: n,
                mean_confidence: if n > 0 { conf[b] / n as f64 } else { 0.0 },
                accuracy: if n > 0 { hits[b] as f64 / n as f64 } else { 0.0 },
            }
        })
        .collect())
}

/// Expected calibration error, `Σ (n_b / N) · |acc_b − conf_b|` over
/// equal-width, right-closed bins. Empty bins contribute nothing.
pub fn expected_calibration_error(
    pairs: &[(f64, bool)],
    bins: usize,
) -> Result<f64, InventoryError> {
    if pairs.is_empty() {
        return Err(InventoryError::EmptyInput);
    }
    let n = pairs.len() as f64;
    Ok(reliability_bins(pairs, bins)?
        .iter()
        .filter(|b| b.count > 0)
        .map(|b| b.count as f64 / n * (b.accuracy - b.mean_confidence).abs())
        .sum())
}

/// Mean of `max(0, 1 − age / horizon)` over items; 1.0 when empty.
pub fn context_freshness_index(
    items: &[ContextItem],
    now: Tick,
    horizon: Tick,
) -> Result<f64, InventoryError> {
    if horizon == 0 {
        return Err(InventoryError::NonPositiveHorizon);
    }
    if items.is_empty() {
        return Ok(1.0);
    }
    let mut sum = 0.0;
    for it in items {
        if it.stamped_at > now {
            return Err(InventoryError::ContextFromFuture {
                key: it.key.clone(),
                stamped_at: it.stamped_at,
                now,
            });
        }
        sum += freshness(now - it.stamped_at, horizon);
    }
    Ok(sum / items.len() as f64)
}

pub fn freshness(age: Tick, horizon: Tick) -> f64 {
    (1.0 - age as f64 / horizon as f64).max(0.0)
}

/// Share of supplied items labelled relevant; 1.0 when nothing was supplied.
pub fn context_relevance_precision(supplied: &[ContextItem]) -> Result<f64, InventoryError> {
    if supplied.is_empty() {
        return Ok(1.0);
    }
    let mut relevant = 0usize;
    for it in supplied {
        match it.relevant {
            Some(true) => relevant += 1,
            Some(false) => {}
            None => return Err(InventoryError::MissingRelevanceLabels(it.key.clone())),
        }
    }
    Ok(relevant as f64 / supplied.len() as f64)
}
