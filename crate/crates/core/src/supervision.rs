//! Simulated human adjudication and review workload metrics.
//!
//! A case only reaches the adjudicator as an [`EscalatedCase`], which can be
//! built solely from an escalate decision of the policy. That keeps human
//! review an architectural layer rather than a hook any caller can reach.

use rand::Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::policy::{EscalationReason, Phase, PolicyDecision, PolicyState};
use crate::rng::StreamRng;
use crate::types::{CostVector, RiskClass, TaskInstance, Verdict};

#[derive(Debug, Error, PartialEq)]
pub enum SupervisionError {
    #[error("case `{0}` did not arrive through an escalate decision")]
    NotEscalated(String),
    #[error("task `{0}` has no ground truth")]
    MissingGroundTruth(String),
    #[error("task `{0}` has an alphabet with fewer than two labels")]
    AlphabetTooSmall(String),
    #[error("review run has no tasks")]
    EmptyRun,
    #[error("{escalated} escalations exceed {total} tasks")]
    InvalidCounts { escalated: usize, total: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct AdjudicatorModel {
    #[schemars(range(min = 0.0, max = 1.0))]
    pub competence: f64,
    #[serde(default)]
    pub review_cost: CostVector,
    #[serde(default)]
    pub veto_enabled: bool,
    /// Ticks a review takes.
    #[serde(default)]
    pub review_ticks: u64,
}

impl AdjudicatorModel {
    pub fn new(competence: f64) -> Self {
        AdjudicatorModel {
            competence,
            review_cost: CostVector::ZERO,
            veto_enabled: false,
            review_ticks: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReviewAction {
    Uphold,
    Override(String),
    /// Blocks a high-risk action outright; the reviewer's ruling stands.
    Veto,
}

impl ReviewAction {
    pub fn label(&self) -> &'static str {
        match self {
            ReviewAction::Uphold => "uphold",
            ReviewAction::Override(_) => "override",
            ReviewAction::Veto => "veto",
        }
    }

    /// Override and veto both reverse the automated decision.
    pub fn reverses(&self) -> bool {
        !matches!(self, ReviewAction::Uphold)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReviewOutcome {
    pub task_id: String,
    pub action: ReviewAction,
    pub warranted: bool,
    pub cost: CostVector,
    /// The decision the task finalizes with after review.
    pub final_decision: String,
}

impl ReviewOutcome {
    pub fn payload(&self, overridden: Option<&str>) -> Map<String, Value> {
        let mut m = Map::new();
        m.insert("task_id".into(), json!(self.task_id));
        m.insert("outcome".into(), json!(self.action.label()));
        m.insert("ruling".into(), json!(self.final_decision));
        m.insert("warranted".into(), json!(self.warranted));
        m.insert("cost".into(), self.cost.to_json());
        if let Some(d) = overridden {
            m.insert("overridden_decision".into(), json!(d));
        }
        m
    }
}

/// A case handed to review. Only constructible from an escalate decision.
#[derive(Debug, Clone)]
pub struct EscalatedCase<'a> {
    pub task: &'a TaskInstance,
    pub alphabet: &'a [String],
    /// The latest automated verdict, absent when the rule core escalated
    /// before any component ran.
    pub verdict: Option<&'a Verdict>,
    pub reason: EscalationReason,
}

impl<'a> EscalatedCase<'a> {
    pub fn from_decision(
        task: &'a TaskInstance,
        alphabet: &'a [String],
        decision: &PolicyDecision,
        state: &'a PolicyState,
    ) -> Result<Self, SupervisionError> {
        let reason = decision
            .escalation_reason()
            .filter(|_| state.phase == Phase::Escalated && state.task_id == task.task_id)
            .ok_or_else(|| SupervisionError::NotEscalated(task.task_id.clone()))?;
        Ok(EscalatedCase {
            task,
            alphabet,
            verdict: state.latest(),
            reason,
        })
    }
}

fn wrong_label<'a>(alphabet: &'a [String], truth: &str, rng: &mut StreamRng) -> &'a str {
    let wrong: Vec<&String> = alphabet.iter().filter(|l| *l != truth).collect();
    wrong[rng.random_range(0..wrong.len())]
}

/// With probability `competence` the ruling equals ground truth; otherwise
/// it is the opposite ruling. Draws: one uniform for competence, then one
/// for the wrong label when needed.
pub fn adjudicate(
    model: &AdjudicatorModel,
    case: &EscalatedCase<'_>,
    rng: &mut StreamRng,
) -> Result<ReviewOutcome, SupervisionError> {
    let task = case.task;
    let truth = task
        .ground_truth
        .as_deref()
        .ok_or_else(|| SupervisionError::MissingGroundTruth(task.task_id.clone()))?;
    if case.alphabet.len() < 2 {
        return Err(SupervisionError::AlphabetTooSmall(task.task_id.clone()));
    }
    let correct_ruling = rng.random::<f64>() < model.competence;
    let (action, final_decision) = match case.verdict {
        Some(v) => {
            let verdict_right = v.decision == truth;
            match (verdict_right, correct_ruling) {
                (true, true) | (false, false) => (ReviewAction::Uphold, v.decision.clone()),
                (false, true) => (ReviewAction::Override(truth.to_string()), truth.to_string()),
                (true, false) => {
                    let l = wrong_label(case.alphabet, truth, rng).to_string();
                    (ReviewAction::Override(l.clone()), l)
                }
            }
        }
        None => {
            let l = if correct_ruling {
                truth.to_string()
            } else {
                wrong_label(case.alphabet, truth, rng).to_string()
            };
            (ReviewAction::Override(l.clone()), l)
        }
    };
    let action = match action {
        ReviewAction::Override(_)
            if model.veto_enabled && case.verdict.is_some() && task.risk_class == RiskClass::High =>
        {
            ReviewAction::Veto
        }
        a => a,
    };
    Ok(ReviewOutcome {
        task_id: task.task_id.clone(),
        action,
        warranted: case.verdict.is_some_and(|v| v.decision != truth),
        cost: model.review_cost,
        final_decision,
    })
}

pub fn review_burden_index(n_escalated: usize, n_total: usize) -> Result<f64, SupervisionError> {
    if n_total == 0 {
        return Err(SupervisionError::EmptyRun);
    }
    if n_escalated > n_total {
        return Err(SupervisionError::InvalidCounts {
            escalated: n_escalated,
            total: n_total,
        });
    }
    Ok(n_escalated as f64 / n_total as f64)
}

/// Share of reviews that reversed the automated decision (override or veto).
pub fn override_rate(reviews: &[ReviewOutcome]) -> f64 {
    if reviews.is_empty() {
        return 0.0;
    }
    reviews.iter().filter(|r| r.action.reverses()).count() as f64 / reviews.len() as f64
}

pub fn escalation_snr(reviews: &[ReviewOutcome]) -> f64 {
    let warranted = reviews.iter().filter(|r| r.warranted).count();
    snr_from_counts(warranted, reviews.len() - warranted)
}

pub fn snr_from_counts(warranted: usize, unwarranted: usize) -> f64 {
    warranted as f64 / unwarranted.max(1) as f64
}
