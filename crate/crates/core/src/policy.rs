//! Stateful orchestration-and-escalation policy.
//!
//! [`step`] is a pure transition function over [`PolicyState`]. Given the
//! invocation plan, the escalation trigger, the rule-core outcome and the
//! current state it returns the next [`PolicyDecision`] and the successor
//! state. Rules are checked in this order:
//!
//! 1. the rule core mandates escalation;
//! 2. nothing has been invoked yet, so invoke the first plan step;
//! 3. the verdicts disagree with an inconsistency score at or above the
//!    threshold: re-invoke with expanded context while budget remains,
//!    otherwise escalate;
//! 4. joint trigger: risk at or above the threshold, accumulated confidence
//!    at or above the threshold, and the latest decision contradicts an
//!    allow/deny from the rule core or an earlier verdict;
//! 5. accumulated confidence reaches the threshold, so finalize;
//! 6. invoke the next plan step, else re-invoke while budget remains, else
//!    escalate because the budget is exhausted.
//!
//! Accumulated confidence is the noisy-OR of the trailing run of verdicts
//! that agree with the latest one; it resets on disagreement.

use std::collections::BTreeMap;
use std::fmt;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::inventory::ComponentDescriptor;
use crate::rules::{RuleAction, RuleOutcome};
use crate::types::{CostVector, CostWeights, RiskClass, TaskInstance, Verdict};

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("step called in phase {0}")]
    PhaseViolation(Phase),
    #[error("need at least two verdicts, got {0}")]
    TooFewVerdicts(usize),
    #[error("minimal path cost scalarizes to zero")]
    ZeroMinimalCost,
    #[error("autonomy window has {got} tasks, minimum is {min}")]
    InsufficientWindow { got: usize, min: usize },
    #[error("invalid plan for `{task_type}`: {detail}")]
    InvalidPlan { task_type: String, detail: String },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum OrderingMode {
    #[default]
    AsListed,
    DescendingCapability,
    AscendingCapability,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct InvocationPlan {
    pub task_type: String,
    #[schemars(length(min = 1))]
    pub steps: Vec<String>,
    #[serde(default)]
    pub ordering_mode: OrderingMode,
    /// Decision label implied by a rule-core `allow` / `deny`, keyed by the
    /// action label. Used as a contradiction witness by the joint trigger.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub l1_decisions: BTreeMap<String, String>,
}

impl InvocationPlan {
    pub fn new(task_type: impl Into<String>, steps: &[&str]) -> Self {
        InvocationPlan {
            task_type: task_type.into(),
            steps: steps.iter().map(|s| s.to_string()).collect(),
            ordering_mode: OrderingMode::AsListed,
            l1_decisions: BTreeMap::new(),
        }
    }

    /// Applies the ordering mode against the inventory, returning a plan
    /// whose steps are in execution order. Sorting is stable.
    pub fn ordered(&self, inventory: &[ComponentDescriptor]) -> Result<InvocationPlan, PolicyError> {
        let invalid = |detail: String| PolicyError::InvalidPlan {
            task_type: self.task_type.clone(),
            detail,
        };
        if self.steps.is_empty() {
            return Err(invalid("plan has no steps".into()));
        }
        let mut steps: Vec<(&String, f64)> = Vec::with_capacity(self.steps.len());
        for s in &self.steps {
            let c = inventory
                .iter()
                .find(|c| &c.component_id == s)
                .ok_or_else(|| invalid(format!("unknown component `{s}`")))?;
            if !c.supports(&self.task_type) {
                return Err(invalid(format!("component `{s}` does not support the task type")));
            }
            steps.push((s, c.capability()));
        }
        match self.ordering_mode {
            OrderingMode::AsListed => {}
            OrderingMode::DescendingCapability => steps.sort_by(|a, b| b.1.total_cmp(&a.1)),
            OrderingMode::AscendingCapability => steps.sort_by(|a, b| a.1.total_cmp(&b.1)),
        }
        Ok(InvocationPlan {
            steps: steps.into_iter().map(|(s, _)| s.clone()).collect(),
            ordering_mode: OrderingMode::AsListed,
            ..self.clone()
        })
    }

    /// Moves `component_id` to the front (rule-core routing).
    pub fn routed_to(&self, component_id: &str) -> InvocationPlan {
        let mut steps = vec![component_id.to_string()];
        steps.extend(self.steps.iter().filter(|s| *s != component_id).cloned());
        InvocationPlan {
            steps,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct EscalationTriggerSpec {
    pub risk_threshold: RiskClass,
    #[schemars(range(min = 0.0, max = 1.0))]
    pub confidence_threshold: f64,
    #[schemars(range(min = 0.0, max = 1.0))]
    pub inconsistency_threshold: f64,
    #[serde(default)]
    pub reinvocation_budget: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Ingesting,
    Inferring,
    Escalated,
    Finalized,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Ingesting => "ingesting",
            Phase::Inferring => "inferring",
            Phase::Escalated => "escalated",
            Phase::Finalized => "finalized",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyState {
    pub task_id: String,
    pub history: Vec<(String, Verdict)>,
    pub accumulated_confidence: f64,
    pub budget_remaining: u32,
    pub initial_budget: u32,
    pub risk_class: RiskClass,
    pub accumulated_cost: CostVector,
    pub phase: Phase,
    /// Index of the next plan step not yet invoked.
    pub next_step: usize,
}

impl PolicyState {
    pub fn new(task: &TaskInstance, trigger: &EscalationTriggerSpec) -> Self {
        PolicyState {
            task_id: task.task_id.clone(),
            history: Vec::new(),
            accumulated_confidence: 0.0,
            budget_remaining: trigger.reinvocation_budget,
            initial_budget: trigger.reinvocation_budget,
            risk_class: task.risk_class,
            accumulated_cost: CostVector::ZERO,
            phase: Phase::Ingesting,
            next_step: 0,
        }
    }

    /// Records the verdict returned for the latest invoke/reinvoke decision.
    pub fn record_verdict(&mut self, component_id: impl Into<String>, verdict: Verdict) {
        self.accumulated_cost += verdict.cost;
        self.history.push((component_id.into(), verdict));
        self.accumulated_confidence = accumulated_confidence(self.verdicts());
    }

    pub fn verdicts(&self) -> impl DoubleEndedIterator<Item = &Verdict> + ExactSizeIterator {
        self.history.iter().map(|(_, v)| v)
    }

    pub fn latest(&self) -> Option<&Verdict> {
        self.history.last().map(|(_, v)| v)
    }

    /// Closes an escalated case after review.
    pub fn close_after_review(&mut self) -> Result<(), PolicyError> {
        if self.phase != Phase::Escalated {
            return Err(PolicyError::PhaseViolation(self.phase));
        }
        self.phase = Phase::Finalized;
        Ok(())
    }
}

/// Noisy-OR over the trailing run of verdicts agreeing with the latest.
pub fn accumulated_confidence<'a>(
    verdicts: impl DoubleEndedIterator<Item = &'a Verdict>,
) -> f64 {
    let mut it = verdicts.rev();
    let Some(latest) = it.next() else {
        return 0.0;
    };
    let mut miss = 1.0 - latest.confidence;
    for v in it {
        if v.decision != latest.decision {
            break;
        }
        miss *= 1.0 - v.confidence;
    }
    (1.0 - miss).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EscalationReason {
    JointRiskConfidence,
    Inconsistency,
    BudgetExhausted,
    L1Mandated,
}

impl EscalationReason {
    pub fn as_str(self) -> &'static str {
        match self {
            EscalationReason::JointRiskConfidence => "joint_risk_confidence",
            EscalationReason::Inconsistency => "inconsistency",
            EscalationReason::BudgetExhausted => "budget_exhausted",
            EscalationReason::L1Mandated => "l1_mandated",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DecisionKind {
    Invoke(String),
    Reinvoke {
        component_id: String,
        expanded_context: bool,
    },
    Escalate(EscalationReason),
    Finalize(Verdict),
}

impl DecisionKind {
    pub fn label(&self) -> &'static str {
        match self {
            DecisionKind::Invoke(_) => "invoke",
            DecisionKind::Reinvoke { .. } => "reinvoke",
            DecisionKind::Escalate(_) => "escalate",
            DecisionKind::Finalize(_) => "finalize",
        }
    }
}

/// The trigger values behind a decision.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionReason {
    /// Which transition rule fired.
    pub rule: &'static str,
    pub accumulated_confidence: f64,
    pub inconsistency: f64,
    pub budget_remaining: u32,
    pub risk_class: RiskClass,
    /// What the latest decision contradicted, if anything.
    pub contradiction: Option<String>,
    /// Inconsistency or borderline confidence fired before the budget gate.
    pub soft_trigger: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyDecision {
    pub kind: DecisionKind,
    pub reason: DecisionReason,
}

impl PolicyDecision {
    pub fn escalation_reason(&self) -> Option<EscalationReason> {
        match self.kind {
            DecisionKind::Escalate(r) => Some(r),
            _ => None,
        }
    }

    pub fn reason_json(&self) -> Value {
        let r = &self.reason;
        let mut m = Map::new();
        m.insert("rule".into(), json!(r.rule));
        m.insert("accumulated_confidence".into(), json!(r.accumulated_confidence));
        m.insert("inconsistency".into(), json!(r.inconsistency));
        m.insert("budget_remaining".into(), json!(r.budget_remaining));
        m.insert("risk_class".into(), json!(r.risk_class.as_str()));
        if let Some(c) = &r.contradiction {
            m.insert("contradiction".into(), json!(c));
        }
        Value::Object(m)
    }
}

fn contradiction_with_l1(plan: &InvocationPlan, l1: &RuleOutcome, decision: &str) -> Option<String> {
    let action = l1.mandated_action.as_ref()?;
    if !matches!(action, RuleAction::Allow | RuleAction::Deny) {
        return None;
    }
    let expected = plan.l1_decisions.get(&action.label())?;
    (expected != decision).then(|| format!("l1:{}", action.label()))
}

/// One policy transition. `plan` must already be in execution order (see
/// [`InvocationPlan::ordered`]).
pub fn step(
    plan: &InvocationPlan,
    trigger: &EscalationTriggerSpec,
    l1: &RuleOutcome,
    state: &PolicyState,
) -> Result<(PolicyDecision, PolicyState), PolicyError> {
    if !matches!(state.phase, Phase::Ingesting | Phase::Inferring) {
        return Err(PolicyError::PhaseViolation(state.phase));
    }
    let mut next = state.clone();
    let acc = state.accumulated_confidence;
    let mut reason = DecisionReason {
        rule: "",
        accumulated_confidence: acc,
        inconsistency: 0.0,
        budget_remaining: state.budget_remaining,
        risk_class: state.risk_class,
        contradiction: None,
        soft_trigger: false,
    };

    let escalate = |mut next: PolicyState, why: EscalationReason, reason: DecisionReason| {
        next.phase = Phase::Escalated;
        (
            PolicyDecision {
                kind: DecisionKind::Escalate(why),
                reason,
            },
            next,
        )
    };

    if l1.mandates_escalation() {
        reason.rule = "l1_mandate";
        return Ok(escalate(next, EscalationReason::L1Mandated, reason));
    }

    let Some(latest) = state.latest() else {
        reason.rule = "first_step";
        next.phase = Phase::Inferring;
        next.next_step = 1;
        return Ok((
            PolicyDecision {
                kind: DecisionKind::Invoke(plan.steps[0].clone()),
                reason,
            },
            next,
        ));
    };

    let n = state.history.len();
    let disagrees_with_prior = state.history[..n - 1]
        .iter()
        .any(|(_, v)| v.decision != latest.decision);
    let inconsistency = if n >= 2 {
        let vs: Vec<Verdict> = state.verdicts().cloned().collect();
        detect_inconsistency(&vs)?
    } else {
        0.0
    };
    reason.inconsistency = inconsistency;

    let reinvoke = |mut next: PolicyState, reason: DecisionReason| {
        let target = if next.next_step < plan.steps.len() {
            next.next_step += 1;
            plan.steps[next.next_step - 1].clone()
        } else {
            let used = (next.initial_budget - next.budget_remaining) as usize;
            plan.steps[used % plan.steps.len()].clone()
        };
        next.budget_remaining -= 1;
        next.phase = Phase::Inferring;
        (
            PolicyDecision {
                kind: DecisionKind::Reinvoke {
                    component_id: target,
                    expanded_context: true,
                },
                reason,
            },
            next,
        )
    };

    if disagrees_with_prior && inconsistency >= trigger.inconsistency_threshold {
        reason.rule = "inconsistency";
        reason.soft_trigger = true;
        reason.contradiction = Some("prior_verdict".into());
        if state.budget_remaining > 0 {
            return Ok(reinvoke(next, reason));
        }
        let why = if state.initial_budget == 0 {
            EscalationReason::Inconsistency
        } else {
            EscalationReason::BudgetExhausted
        };
        return Ok(escalate(next, why, reason));
    }

    let contradiction = contradiction_with_l1(plan, l1, &latest.decision)
        .or_else(|| disagrees_with_prior.then(|| "prior_verdict".to_string()));
    reason.contradiction = contradiction.clone();
    if state.risk_class >= trigger.risk_threshold
        && acc >= trigger.confidence_threshold
        && contradiction.is_some()
    {
        reason.rule = "joint_trigger";
        return Ok(escalate(next, EscalationReason::JointRiskConfidence, reason));
    }

    if acc >= trigger.confidence_threshold {
        reason.rule = "confident";
        next.phase = Phase::Finalized;
        let verdict = Verdict {
            confidence: acc,
            ..latest.clone()
        };
        return Ok((
            PolicyDecision {
                kind: DecisionKind::Finalize(verdict),
                reason,
            },
            next,
        ));
    }

    if state.next_step < plan.steps.len() {
        reason.rule = "next_step";
        next.next_step += 1;
        return Ok((
            PolicyDecision {
                kind: DecisionKind::Invoke(plan.steps[state.next_step].clone()),
                reason,
            },
            next,
        ));
    }
    reason.soft_trigger = true;
    if state.budget_remaining > 0 {
        reason.rule = "low_confidence";
        return Ok(reinvoke(next, reason));
    }
    reason.rule = "budget_exhausted";
    Ok(escalate(next, EscalationReason::BudgetExhausted, reason))
}

/// `1 − modal count / total`: 0 when unanimous, 0.5 for an even binary split.
pub fn detect_inconsistency(verdicts: &[Verdict]) -> Result<f64, PolicyError> {
    if verdicts.len() < 2 {
        return Err(PolicyError::TooFewVerdicts(verdicts.len()));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for v in verdicts {
        *counts.entry(v.decision.as_str()).or_default() += 1;
    }
    let modal = counts.values().copied().max().unwrap_or(0);
    Ok(1.0 - modal as f64 / verdicts.len() as f64)
}

pub fn tier_cost_coefficient(
    executed: &CostVector,
    minimal: &CostVector,
    weights: &CostWeights,
) -> Result<f64, PolicyError> {
    let denom = minimal.scalarize(weights);
    if denom <= 0.0 {
        return Err(PolicyError::ZeroMinimalCost);
    }
    Ok(executed.scalarize(weights) / denom)
}

/// Share of escalations whose pre-escalation decision was wrong. Each entry
/// is `(pre_escalation_decision, ground_truth)`.
pub fn escalation_precision<S: AsRef<str>>(escalations: &[(S, S)]) -> f64 {
    if escalations.is_empty() {
        return 1.0;
    }
    let warranted = escalations
        .iter()
        .filter(|(v, t)| v.as_ref() != t.as_ref())
        .count();
    warranted as f64 / escalations.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SoftTriggerCandidate {
    /// The decision before the trigger already matched ground truth.
    pub was_spurious: bool,
    /// The task finished without reaching human review.
    pub suppressed_by_reinvocation: bool,
}

pub fn false_positive_attenuation(candidates: &[SoftTriggerCandidate]) -> f64 {
    let spurious: Vec<_> = candidates.iter().filter(|c| c.was_spurious).collect();
    if spurious.is_empty() {
        return 1.0;
    }
    let suppressed = spurious
        .iter()
        .filter(|c| c.suppressed_by_reinvocation)
        .count();
    suppressed as f64 / spurious.len() as f64
}

#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, JsonSchema,
)]
#[serde(rename_all = "snake_case")]
pub enum AutonomyLevel {
    #[default]
    AdviseOnly,
    ActWithReview,
    ActAutonomously,
}

impl AutonomyLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            AutonomyLevel::AdviseOnly => "advise_only",
            AutonomyLevel::ActWithReview => "act_with_review",
            AutonomyLevel::ActAutonomously => "act_autonomously",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "advise_only" => Some(AutonomyLevel::AdviseOnly),
            "act_with_review" => Some(AutonomyLevel::ActWithReview),
            "act_autonomously" => Some(AutonomyLevel::ActAutonomously),
            _ => None,
        }
    }

    fn promoted(self) -> Self {
        match self {
            AutonomyLevel::AdviseOnly => AutonomyLevel::ActWithReview,
            _ => AutonomyLevel::ActAutonomously,
        }
    }

    fn demoted(self) -> Self {
        match self {
            AutonomyLevel::ActAutonomously => AutonomyLevel::ActWithReview,
            _ => AutonomyLevel::AdviseOnly,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct AutonomyThresholds {
    pub max_override_rate: f64,
    pub max_calibration_error: f64,
    pub min_escalation_precision: f64,
    pub window: usize,
    /// A metric missing its threshold by this factor (on the error side)
    /// triggers demotion.
    pub demotion_factor: f64,
}

impl Default for AutonomyThresholds {
    fn default() -> Self {
        AutonomyThresholds {
            max_override_rate: 0.05,
            max_calibration_error: 0.05,
            min_escalation_precision: 0.8,
            window: 100,
            demotion_factor: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowMetrics {
    pub escalation_precision: f64,
    pub override_rate: f64,
    pub calibration_error: f64,
    pub n_tasks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AutonomyChange {
    pub task_type: String,
    pub old_level: AutonomyLevel,
    pub new_level: AutonomyLevel,
    pub justification: String,
    pub window: WindowMetrics,
}

impl AutonomyChange {
    pub fn payload(&self) -> Map<String, Value> {
        let mut m = Map::new();
        m.insert("task_type".into(), json!(self.task_type));
        m.insert("old_level".into(), json!(self.old_level.as_str()));
        m.insert("new_level".into(), json!(self.new_level.as_str()));
        m.insert("justification".into(), json!(self.justification));
        m.insert(
            "window".into(),
            json!({
                "escalation_precision": self.window.escalation_precision,
                "override_rate": self.window.override_rate,
                "calibration_error": self.window.calibration_error,
                "n_tasks": self.window.n_tasks,
            }),
        );
        m
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AutonomyLedger {
    pub thresholds: AutonomyThresholds,
    pub levels: BTreeMap<String, AutonomyLevel>,
    /// The window snapshot behind each task type's current level.
    pub supporting_window: BTreeMap<String, WindowMetrics>,
    pub history: Vec<AutonomyChange>,
}

impl AutonomyLedger {
    pub fn new(thresholds: AutonomyThresholds) -> Self {
        AutonomyLedger {
            thresholds,
            ..Default::default()
        }
    }

    pub fn level(&self, task_type: &str) -> AutonomyLevel {
        self.levels.get(task_type).copied().unwrap_or_default()
    }

    pub fn with_level(mut self, task_type: impl Into<String>, level: AutonomyLevel) -> Self {
        self.levels.insert(task_type.into(), level);
        self
    }
}

/// Promotes one level when every metric clears its threshold strictly,
/// demotes one level when any metric misses by the demotion factor, and
/// otherwise leaves the level unchanged.
pub fn update_autonomy(
    ledger: &AutonomyLedger,
    task_type: &str,
    m: WindowMetrics,
) -> Result<AutonomyLedger, PolicyError> {
    let th = &ledger.thresholds;
    if m.n_tasks < th.window {
        return Err(PolicyError::InsufficientWindow {
            got: m.n_tasks,
            min: th.window,
        });
    }
    let promote = m.override_rate < th.max_override_rate
        && m.calibration_error < th.max_calibration_error
        && m.escalation_precision > th.min_escalation_precision;
    let k = th.demotion_factor;
    let demote = m.override_rate >= k * th.max_override_rate
        || m.calibration_error >= k * th.max_calibration_error
        || 1.0 - m.escalation_precision >= k * (1.0 - th.min_escalation_precision);

    let old = ledger.level(task_type);
    let new = if promote {
        old.promoted()
    } else if demote {
        old.demoted()
    } else {
        old
    };
    let mut next = ledger.clone();
    next.supporting_window.insert(task_type.to_string(), m);
    if new != old {
        let verb = if promote { "promote" } else { "demote" };
        next.levels.insert(task_type.to_string(), new);
        next.history.push(AutonomyChange {
            task_type: task_type.to_string(),
            old_level: old,
            new_level: new,
            justification: format!(
                "{verb}: escalation_precision={:.4} override_rate={:.4} calibration_error={:.4} over {} tasks",
                m.escalation_precision, m.override_rate, m.calibration_error, m.n_tasks
            ),
            window: m,
        });
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inventory::{ComponentClass, SimulatedComponentSpec};
    use crate::rules::MatchedRule;
    use std::collections::BTreeMap;

    fn task(risk: RiskClass) -> TaskInstance {
        TaskInstance {
            task_id: "t".into(),
            task_type: "triage".into(),
            features: BTreeMap::new(),
            ground_truth: None,
            risk_class: risk,
            context_items: vec![],
            created_at: 0,
            sub_domain: "d".into(),
        }
    }

    fn verdict(d: &str, c: f64) -> Verdict {
        Verdict {
            decision: d.into(),
            confidence: c,
            source: "L2a:x".into(),
            cost: CostVector::new(1.0, 0.0, 0.0),
        }
    }

    fn trigger(budget: u32) -> EscalationTriggerSpec {
        EscalationTriggerSpec {
            risk_threshold: RiskClass::High,
            confidence_threshold: 0.9,
            inconsistency_threshold: 0.5,
            reinvocation_budget: budget,
        }
    }

    fn outcome(action: Option<RuleAction>) -> RuleOutcome {
        RuleOutcome {
            matched: action
                .iter()
                .map(|a| MatchedRule {
                    rule_id: "r".into(),
                    version: 1,
                    priority: 0,
                    action: a.clone(),
                })
                .collect(),
            mandated_action: action,
            conflicts: vec![],
        }
    }

    #[test]
    fn single_step_happy_path_finalizes() {
        let plan = InvocationPlan::new("triage", &["a"]);
        let tr = trigger(0);
        let l1 = outcome(None);
        let s0 = PolicyState::new(&task(RiskClass::Low), &tr);
        let (d, mut s1) = step(&plan, &tr, &l1, &s0).unwrap();
        assert_eq!(d.kind, DecisionKind::Invoke("a".into()));
        assert_eq!(s1.phase, Phase::Inferring);
        s1.record_verdict("a", verdict("approve", 0.99));
        let (d, s2) = step(&plan, &tr, &l1, &s1).unwrap();
        match d.kind {
            DecisionKind::Finalize(v) => {
                assert_eq!(v.decision, "approve");
                assert!((v.confidence - 0.99).abs() < 1e-12);
            }
            other => panic!("expected finalize, got {other:?}"),
        }
        assert_eq!(s2.phase, Phase::Finalized);
        assert!(matches!(
            step(&plan, &tr, &l1, &s2),
            Err(PolicyError::PhaseViolation(Phase::Finalized))
        ));
    }

    #[test]
    fn l1_mandate_takes_precedence() {
        let plan = InvocationPlan::new("triage", &["a"]);
        let tr = trigger(3);
        let l1 = outcome(Some(RuleAction::MandateEscalation));
        let mut s = PolicyState::new(&task(RiskClass::Low), &tr);
        let (d, _) = step(&plan, &tr, &l1, &s).unwrap();
        assert_eq!(d.escalation_reason(), Some(EscalationReason::L1Mandated));
        s.phase = Phase::Inferring;
        s.record_verdict("a", verdict("approve", 0.999));
        let (d, after) = step(&plan, &tr, &l1, &s).unwrap();
        assert_eq!(d.escalation_reason(), Some(EscalationReason::L1Mandated));
        assert_eq!(after.phase, Phase::Escalated);
    }

    fn two_verdict_state(budget: u32) -> (InvocationPlan, EscalationTriggerSpec, PolicyState) {
        let plan = InvocationPlan::new("triage", &["a", "b"]);
        let tr = trigger(budget);
        let mut s = PolicyState::new(&task(RiskClass::Low), &tr);
        s.phase = Phase::Inferring;
        s.next_step = 2;
        s.record_verdict("a", verdict("approve", 0.95));
        s.record_verdict("b", verdict("deny", 0.9));
        (plan, tr, s)
    }

    #[test]
    fn disagreement_reinvokes_then_escalates() {
        // inconsistency({approve, deny}) = 0.5 >= 0.5; budget 1 -> reinvoke
        let (plan, tr, s) = two_verdict_state(1);
        let (d, next) = step(&plan, &tr, &outcome(None), &s).unwrap();
        assert_eq!(
            d.kind,
            DecisionKind::Reinvoke {
                component_id: "a".into(),
                expanded_context: true
            }
        );
        assert!(d.reason.soft_trigger);
        assert_eq!(next.budget_remaining, 0);

        // same state with the budget consumed -> escalate as budget_exhausted
        let mut spent = s.clone();
        spent.budget_remaining = 0;
        let (d, _) = step(&plan, &tr, &outcome(None), &spent).unwrap();
        assert_eq!(d.escalation_reason(), Some(EscalationReason::BudgetExhausted));

        // no budget configured at all -> escalate as inconsistency
        let (plan, tr, s) = two_verdict_state(0);
        let (d, _) = step(&plan, &tr, &outcome(None), &s).unwrap();
        assert_eq!(d.escalation_reason(), Some(EscalationReason::Inconsistency));
    }

    #[test]
    fn joint_trigger_needs_contradiction() {
        let mut plan = InvocationPlan::new("triage", &["a"]);
        plan.l1_decisions.insert("deny".into(), "deny".into());
        let tr = trigger(0);
        let mut s = PolicyState::new(&task(RiskClass::High), &tr);
        s.phase = Phase::Inferring;
        s.next_step = 1;
        s.record_verdict("a", verdict("approve", 0.97));
        // uncontradicted confident verdict finalizes even at high risk
        let (d, _) = step(&plan, &tr, &outcome(None), &s).unwrap();
        assert_eq!(d.kind.label(), "finalize");
        // the rule core says deny: confident approve is a confident error
        let (d, _) = step(&plan, &tr, &outcome(Some(RuleAction::Deny)), &s).unwrap();
        assert_eq!(d.escalation_reason(), Some(EscalationReason::JointRiskConfidence));
        assert_eq!(d.reason.contradiction.as_deref(), Some("l1:deny"));
        // same at low risk finalizes
        let mut low = s.clone();
        low.risk_class = RiskClass::Low;
        let (d, _) = step(&plan, &tr, &outcome(Some(RuleAction::Deny)), &low).unwrap();
        assert_eq!(d.kind.label(), "finalize");
    }

    #[test]
    fn low_confidence_walks_the_plan_then_exhausts_budget() {
        let plan = InvocationPlan::new("triage", &["a", "b"]);
        let tr = trigger(1);
        let l1 = outcome(None);
        let mut s = PolicyState::new(&task(RiskClass::Low), &tr);
        let (d, next) = step(&plan, &tr, &l1, &s).unwrap();
        assert_eq!(d.kind, DecisionKind::Invoke("a".into()));
        s = next;
        s.record_verdict("a", verdict("approve", 0.5));
        let (d, next) = step(&plan, &tr, &l1, &s).unwrap();
        assert_eq!(d.kind, DecisionKind::Invoke("b".into()));
        s = next;
        // agreeing verdicts combine: 1 - 0.5 * 0.7 = 0.65 < 0.9
        s.record_verdict("b", verdict("approve", 0.3));
        assert!((s.accumulated_confidence - 0.65).abs() < 1e-12);
        let (d, next) = step(&plan, &tr, &l1, &s).unwrap();
        assert_eq!(d.kind.label(), "reinvoke");
        assert!(d.reason.soft_trigger);
        s = next;
        s.record_verdict("a", verdict("approve", 0.2));
        let (d, _) = step(&plan, &tr, &l1, &s).unwrap();
        assert_eq!(d.escalation_reason(), Some(EscalationReason::BudgetExhausted));
        assert_eq!(s.budget_remaining, 0);
    }

    #[test]
    fn accumulated_confidence_resets_on_disagreement() {
        let vs = [verdict("a", 0.5), verdict("a", 0.5), verdict("b", 0.6)];
        assert!((accumulated_confidence(vs.iter()) - 0.6).abs() < 1e-12);
        let vs = [verdict("b", 0.9), verdict("a", 0.5), verdict("a", 0.5)];
        assert!((accumulated_confidence(vs.iter()) - 0.75).abs() < 1e-12);
        assert_eq!(accumulated_confidence([].iter()), 0.0);
    }

    #[test]
    fn inconsistency_examples() {
        let v = |d| verdict(d, 0.5);
        assert_eq!(detect_inconsistency(&[v("a"), v("a")]).unwrap(), 0.0);
        assert_eq!(detect_inconsistency(&[v("a"), v("d")]).unwrap(), 0.5);
        let x = detect_inconsistency(&[v("a"), v("a"), v("d")]).unwrap();
        assert!((x - (1.0 - 2.0 / 3.0)).abs() < 1e-12);
        assert_eq!(
            detect_inconsistency(&[v("a")]),
            Err(PolicyError::TooFewVerdicts(1))
        );
    }

    #[test]
    fn tier_cost_examples() {
        let w = CostWeights::default();
        let m = CostVector::new(2.0, 1.0, 0.5);
        assert_eq!(tier_cost_coefficient(&m, &m, &w).unwrap(), 1.0);
        assert_eq!(tier_cost_coefficient(&m.scale(3.0), &m, &w).unwrap(), 3.0);
        let w = CostWeights {
            latency: 1.0,
            compute: 1.0,
            monetary: 0.0,
        };
        let v = tier_cost_coefficient(
            &CostVector::new(10.0, 2.0, 1.0),
            &CostVector::new(5.0, 1.0, 1.0),
            &w,
        )
        .unwrap();
        assert_eq!(v, 2.0);
        assert_eq!(
            tier_cost_coefficient(&m, &CostVector::ZERO, &w),
            Err(PolicyError::ZeroMinimalCost)
        );
    }

    #[test]
    fn escalation_precision_examples() {
        let all_wrong = [("a", "b"), ("b", "a")];
        assert_eq!(escalation_precision(&all_wrong), 1.0);
        assert_eq!(escalation_precision(&[("a", "a")]), 0.0);
        let mixed = [("a", "b"), ("a", "b"), ("a", "b"), ("a", "a"), ("b", "b")];
        assert_eq!(escalation_precision(&mixed), 0.6);
        assert_eq!(escalation_precision::<&str>(&[]), 1.0);
    }

    #[test]
    fn fpa_examples() {
        assert_eq!(false_positive_attenuation(&[]), 1.0);
        let c = |s, p| SoftTriggerCandidate {
            was_spurious: s,
            suppressed_by_reinvocation: p,
        };
        let four = [c(true, true), c(true, true), c(true, true), c(true, false), c(false, false)];
        assert_eq!(false_positive_attenuation(&four), 0.75);
        assert_eq!(false_positive_attenuation(&[c(true, false), c(true, false)]), 0.0);
    }

    fn wm(ep: f64, or: f64, ce: f64, n: usize) -> WindowMetrics {
        WindowMetrics {
            escalation_precision: ep,
            override_rate: or,
            calibration_error: ce,
            n_tasks: n,
        }
    }

    #[test]
    fn autonomy_promotion_and_demotion() {
        let l = AutonomyLedger::default();
        let up = update_autonomy(&l, "triage", wm(0.9, 0.01, 0.01, 500)).unwrap();
        assert_eq!(up.level("triage"), AutonomyLevel::ActWithReview);
        assert_eq!(up.history.len(), 1);
        assert_eq!(up.history[0].payload()["new_level"], "act_with_review");

        let top = AutonomyLedger::default().with_level("triage", AutonomyLevel::ActAutonomously);
        let down = update_autonomy(&top, "triage", wm(0.9, 0.2, 0.01, 500)).unwrap();
        assert_eq!(down.level("triage"), AutonomyLevel::ActWithReview);

        let same = update_autonomy(&l, "triage", wm(0.8, 0.05, 0.05, 100)).unwrap();
        assert_eq!(same.level("triage"), AutonomyLevel::AdviseOnly);
        assert!(same.history.is_empty());

        assert_eq!(
            update_autonomy(&l, "triage", wm(0.9, 0.0, 0.0, 99)),
            Err(PolicyError::InsufficientWindow { got: 99, min: 100 })
        );
    }

    #[test]
    fn ordering_modes_sort_by_capability() {
        let mk = |id: &str, acc| {
            ComponentDescriptor::new(id, ComponentClass::L2a, &["triage"], SimulatedComponentSpec::with_accuracy(acc))
        };
        let inv = vec![mk("weak", 0.6), mk("strong", 0.9), mk("mid", 0.75)];
        let mut plan = InvocationPlan::new("triage", &["weak", "strong", "mid"]);
        plan.ordering_mode = OrderingMode::DescendingCapability;
        assert_eq!(plan.ordered(&inv).unwrap().steps, ["strong", "mid", "weak"]);
        plan.ordering_mode = OrderingMode::AscendingCapability;
        assert_eq!(plan.ordered(&inv).unwrap().steps, ["weak", "mid", "strong"]);
        let bad = InvocationPlan::new("triage", &["ghost"]);
        assert!(bad.ordered(&inv).is_err());
        assert_eq!(plan.routed_to("mid").steps, ["mid", "weak", "strong"]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        // Drive a full trace with arbitrary verdicts and check the budget
        // and joint-trigger invariants at every step.
        proptest! {
            #[test]
            fn traces_respect_invariants(
                verdicts in prop::collection::vec((0u8..3, 0.0f64..=1.0), 1..12),
                budget in 0u32..4,
                risk in 0u8..3,
                conf_th in 0.3f64..1.0,
                inc_th in 0.0f64..0.7,
                steps in 1usize..4,
            ) {
                let names: Vec<String> = (0..steps).map(|i| format!("c{i}")).collect();
                let refs: Vec<&str> = names.iter().map(String::as_str).collect();
                let plan = InvocationPlan::new("triage", &refs);
                let tr = EscalationTriggerSpec {
                    risk_threshold: RiskClass::Medium,
                    confidence_threshold: conf_th,
                    inconsistency_threshold: inc_th,
                    reinvocation_budget: budget,
                };
                let rc = [RiskClass::Low, RiskClass::Medium, RiskClass::High][risk as usize];
                let l1 = outcome(None);
                let mut s = PolicyState::new(&task(rc), &tr);
                let mut feed = verdicts.iter().cycle();
                let mut last_budget = s.budget_remaining;
                for _ in 0..64 {
                    let (d, next) = step(&plan, &tr, &l1, &s).unwrap();
                    // replay is identical
                    prop_assert_eq!(step(&plan, &tr, &l1, &s).unwrap(), (d.clone(), next.clone()));
                    prop_assert!(next.budget_remaining <= last_budget);
                    last_budget = next.budget_remaining;
                    match &d.kind {
                        DecisionKind::Invoke(c) | DecisionKind::Reinvoke { component_id: c, .. } => {
                            s = next;
                            let (l, conf) = feed.next().unwrap();
                            s.record_verdict(c.clone(), verdict(["a", "b", "c"][*l as usize], *conf));
                        }
                        DecisionKind::Escalate(r) => {
                            if *r == EscalationReason::BudgetExhausted {
                                prop_assert_eq!(next.budget_remaining, 0);
                            }
                            if *r == EscalationReason::JointRiskConfidence {
                                prop_assert!(s.risk_class >= tr.risk_threshold);
                                prop_assert!(s.accumulated_confidence >= tr.confidence_threshold);
                            }
                            break;
                        }
                        DecisionKind::Finalize(v) => {
                            prop_assert!(v.confidence >= tr.confidence_threshold);
                            break;
                        }
                    }
                }
                prop_assert!(matches!(s.phase, Phase::Inferring | Phase::Ingesting));
            }
        }
    }
}
