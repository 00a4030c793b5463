//! Metrics recomputed from evidence logs alone.
//!
//! The simulator and the `verify` command both call [`log_metrics`] on
//! trails, so a report can be re-derived from the persisted JSONL without
//! access to the run's in-memory state. Every number here comes from a
//! record payload.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::evidence::{default_schema, record_is_complete, EventKind, EvidenceRecord, EvidenceTrail};
use crate::inventory::{context_relevance_precision, expected_calibration_error, freshness};
use crate::metrics::{
    autonomy_boundary_compliance, operational_stability_index, sample_mean_se, AutonomyAction,
    MetricName, MetricValue,
};
use crate::policy::{escalation_precision, false_positive_attenuation, AutonomyLevel, SoftTriggerCandidate};
use crate::rules::{coverage_from_witnesses, consistency_from_witnesses, RuleAction, Witness};
use crate::supervision::snr_from_counts;
use crate::types::{ContextItem, Tick};

#[derive(Debug, Error, PartialEq)]
pub enum AuditError {
    #[error("trail `{task_id}` record {seq}: missing or invalid field `{field}`")]
    Field {
        task_id: String,
        seq: u64,
        field: String,
    },
}

/// Parameters a log recomputation needs beyond the logs themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditParams {
    pub ece_bins: usize,
    pub stability_windows: usize,
    pub stability_tolerances: BTreeMap<MetricName, f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct AbsorptionStats {
    /// Tasks with a first-pass verdict.
    pub tasks_with_first_pass: usize,
    pub first_pass_errors: usize,
    pub absorbed: usize,
    pub error_absorption: f64,
}

impl AbsorptionStats {
    pub fn from_counts(tasks_with_first_pass: usize, first_pass_errors: usize, absorbed: usize) -> Self {
        AbsorptionStats {
            tasks_with_first_pass,
            first_pass_errors,
            absorbed,
            error_absorption: if first_pass_errors == 0 {
                1.0
            } else {
                absorbed as f64 / first_pass_errors as f64
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogMetrics {
    pub metrics: BTreeMap<MetricName, MetricValue>,
    pub absorption: AbsorptionStats,
    pub tick_span: [Tick; 2],
    pub n_tasks: usize,
}

struct Invocation {
    decision: String,
    confidence: f64,
    cost_scalar: f64,
    tick: Tick,
    horizon: Tick,
    context: Vec<ContextItem>,
}

struct Finalization {
    decision: String,
    ground_truth: Option<String>,
    first_pass: Option<String>,
    minimal_cost: f64,
    executed: AutonomyLevel,
    granted: AutonomyLevel,
    created_at: Tick,
    finalized_at: Tick,
}

struct Review {
    reverses: bool,
    warranted: bool,
}

/// What a task trail says, extracted once.
struct TaskFacts {
    witness: Witness,
    invocations: Vec<Invocation>,
    /// Latest decision at the first soft trigger, if one fired.
    first_soft_trigger: Option<Option<String>>,
    /// Pre-escalation decision; `Some(None)` when escalated before any
    /// component ran.
    escalation: Option<Option<String>>,
    review: Option<Review>,
    fin: Finalization,
}

impl TaskFacts {
    fn pairs(&self) -> impl Iterator<Item = (f64, bool)> + '_ {
        let truth = self.fin.ground_truth.as_deref();
        self.invocations
            .iter()
            .map(move |i| (i.confidence, Some(i.decision.as_str()) == truth))
    }
}

fn field_err(trail: &EvidenceTrail, r: &EvidenceRecord, field: &str) -> AuditError {
    AuditError::Field {
        task_id: trail.task_id.clone(),
        seq: r.seq,
        field: field.to_string(),
    }
}

fn req_str(t: &EvidenceTrail, r: &EvidenceRecord, f: &str) -> Result<String, AuditError> {
    r.str_field(f).map(str::to_string).ok_or_else(|| field_err(t, r, f))
}

fn req_f64(t: &EvidenceTrail, r: &EvidenceRecord, f: &str) -> Result<f64, AuditError> {
    r.f64_field(f).ok_or_else(|| field_err(t, r, f))
}

fn req_u64(t: &EvidenceTrail, r: &EvidenceRecord, f: &str) -> Result<u64, AuditError> {
    r.payload.get(f).and_then(|v| v.as_u64()).ok_or_else(|| field_err(t, r, f))
}

fn req_level(t: &EvidenceTrail, r: &EvidenceRecord, f: &str) -> Result<AutonomyLevel, AuditError> {
    r.str_field(f)
        .and_then(AutonomyLevel::parse)
        .ok_or_else(|| field_err(t, r, f))
}

fn parse_context(t: &EvidenceTrail, r: &EvidenceRecord) -> Result<Vec<ContextItem>, AuditError> {
    let arr = r
        .payload
        .get("context")
        .and_then(|v| v.as_array())
        .ok_or_else(|| field_err(t, r, "context"))?;
    arr.iter()
        .map(|it| {
            let key = it.get("key").and_then(|v| v.as_str());
            let stamped = it.get("stamped_at").and_then(|v| v.as_u64());
            match (key, stamped) {
                (Some(key), Some(stamped_at)) => Ok(ContextItem {
                    key: key.to_string(),
                    value: serde_json::Value::Null,
                    stamped_at,
                    relevant: it.get("relevant").and_then(|v| v.as_bool()),
                }),
                _ => Err(field_err(t, r, "context")),
            }
        })
        .collect()
}

/// Extracts task facts; `None` for trails without a finalization record
/// (governance trails).
fn task_facts(label: &str, t: &EvidenceTrail) -> Result<Option<TaskFacts>, AuditError> {
    let mut witness = Witness::new();
    let mut invocations = Vec::new();
    let mut first_soft_trigger = None;
    let mut escalation = None;
    let mut review = None;
    let mut fin = None;
    for r in &t.records {
        match r.event_kind {
            EventKind::RuleFired => {
                let id = req_str(t, r, "rule_id")?;
                let action = RuleAction::parse_label(&req_str(t, r, "outcome")?)
                    .ok_or_else(|| field_err(t, r, "outcome"))?;
                witness.push((format!("{label}/{id}"), action));
            }
            EventKind::Invocation => invocations.push(Invocation {
                decision: req_str(t, r, "decision")?,
                confidence: req_f64(t, r, "confidence")?,
                cost_scalar: req_f64(t, r, "cost_scalar")?,
                tick: req_u64(t, r, "tick")?,
                horizon: req_u64(t, r, "freshness_horizon")?,
                context: parse_context(t, r)?,
            }),
            EventKind::PolicyDecision => {
                if r.bool_field("soft_trigger") == Some(true) && first_soft_trigger.is_none() {
                    first_soft_trigger = Some(r.str_field("latest_decision").map(str::to_string));
                }
            }
            EventKind::Escalation => {
                escalation = Some(invocations.last().map(|i: &Invocation| i.decision.clone()));
            }
            EventKind::Adjudication => {
                let outcome = req_str(t, r, "outcome")?;
                review = Some(Review {
                    reverses: outcome != "uphold",
                    warranted: r
                        .bool_field("warranted")
                        .ok_or_else(|| field_err(t, r, "warranted"))?,
                });
            }
            EventKind::Finalization => {
                fin = Some(Finalization {
                    decision: req_str(t, r, "decision")?,
                    ground_truth: r.str_field("ground_truth").map(str::to_string),
                    first_pass: r.str_field("first_pass_decision").map(str::to_string),
                    minimal_cost: req_f64(t, r, "minimal_path_cost")?,
                    executed: req_level(t, r, "executed_level")?,
                    granted: req_level(t, r, "granted_level")?,
                    created_at: req_u64(t, r, "created_at")?,
                    finalized_at: req_u64(t, r, "finalized_at")?,
                });
            }
            EventKind::AutonomyChange => {}
        }
    }
    Ok(fin.map(|fin| TaskFacts {
        witness,
        invocations,
        first_soft_trigger,
        escalation,
        review,
        fin,
    }))
}

fn window_value(m: MetricName, tasks: &[&TaskFacts], bins: usize) -> f64 {
    match m {
        MetricName::ReviewBurdenIndex => {
            tasks.iter().filter(|t| t.escalation.is_some()).count() as f64 / tasks.len() as f64
        }
        MetricName::CalibrationError => {
            let pairs: Vec<_> = tasks.iter().flat_map(|t| t.pairs()).collect();
            expected_calibration_error(&pairs, bins).unwrap_or(0.0)
        }
        MetricName::OverrideRate => {
            let rs: Vec<_> = tasks.iter().filter_map(|t| t.review.as_ref()).collect();
            if rs.is_empty() {
                0.0
            } else {
                rs.iter().filter(|r| r.reverses).count() as f64 / rs.len() as f64
            }
        }
        MetricName::EscalationPrecision => {
            let e: Vec<(&str, &str)> = tasks
                .iter()
                .filter_map(|t| {
                    let pre = t.escalation.as_ref()?.as_deref()?;
                    Some((pre, t.fin.ground_truth.as_deref()?))
                })
                .collect();
            escalation_precision(&e)
        }
        _ => 0.0,
    }
}

/// Computes every metric that is a function of the logs: all but
/// `update_traceability_coefficient`, `input_perturbation_stability_rate`
/// and `computational_parsimony_ratio`, which depend on configuration.
///
/// `groups` pairs each sub-domain label with its trails; rule ids are
/// qualified by the label so equal ids in different sub-domains stay apart.
pub fn log_metrics(
    groups: &[(&str, &[EvidenceTrail])],
    params: &AuditParams,
) -> Result<LogMetrics, AuditError> {
    let schema = default_schema();
    let mut tasks: Vec<TaskFacts> = Vec::new();
    let (mut n_records, mut n_complete) = (0usize, 0usize);
    for (label, trails) in groups {
        for t in *trails {
            for r in &t.records {
                n_records += 1;
                if record_is_complete(r, &schema).unwrap_or(false) {
                    n_complete += 1;
                }
            }
            if let Some(f) = task_facts(label, t)? {
                tasks.push(f);
            }
        }
    }
    let n = tasks.len();
    let mut out: BTreeMap<MetricName, MetricValue> = BTreeMap::new();
    let mut put = |m: MetricValue| {
        out.insert(m.name, m);
    };

    // L1
    let witnesses: Vec<Witness> = tasks.iter().map(|t| t.witness.clone()).collect();
    match coverage_from_witnesses(&witnesses) {
        Ok(v) => put(MetricValue::new(MetricName::RuleCoverageRate, v, n)),
        Err(_) => put(MetricValue::new(MetricName::RuleCoverageRate, 0.0, 0).with_note("no tasks")),
    }
    match consistency_from_witnesses(&witnesses) {
        Ok((v, pairs)) => put(MetricValue::new(MetricName::RuleConsistencyIndex, v, pairs)),
        Err(_) => put(MetricValue::new(MetricName::RuleConsistencyIndex, 1.0, 0).with_note("no tasks")),
    }

    // L2
    let mut supplied: Vec<ContextItem> = Vec::new();
    let mut fresh: Vec<f64> = Vec::new();
    for inv in tasks.iter().flat_map(|t| &t.invocations) {
        for it in &inv.context {
            fresh.push(freshness(inv.tick.saturating_sub(it.stamped_at), inv.horizon.max(1)));
        }
        supplied.extend(inv.context.iter().cloned());
    }
    let crp = context_relevance_precision(&supplied).unwrap_or(0.0);
    put(MetricValue::new(MetricName::ContextRelevancePrecision, crp, supplied.len()));
    let cfi = if fresh.is_empty() {
        1.0
    } else {
        fresh.iter().sum::<f64>() / fresh.len() as f64
    };
    put(MetricValue::new(MetricName::ContextFreshnessIndex, cfi, fresh.len())
        .with_uncertainty(sample_mean_se(&fresh)));

    // L3
    let esc: Vec<(&str, &str)> = tasks
        .iter()
        .filter_map(|t| {
            let pre = t.escalation.as_ref()?.as_deref()?;
            Some((pre, t.fin.ground_truth.as_deref()?))
        })
        .collect();
    put(MetricValue::new(MetricName::EscalationPrecision, escalation_precision(&esc), esc.len()));

    let invoked: Vec<&TaskFacts> = tasks.iter().filter(|t| !t.invocations.is_empty()).collect();
    let executed: f64 = invoked
        .iter()
        .flat_map(|t| &t.invocations)
        .map(|i| i.cost_scalar)
        .sum();
    let minimal: f64 = invoked.iter().map(|t| t.fin.minimal_cost).sum();
    let tcc = if minimal > 0.0 {
        MetricValue::new(MetricName::TierCostCoefficient, executed / minimal, invoked.len())
    } else {
        MetricValue::new(MetricName::TierCostCoefficient, 1.0, invoked.len())
            .with_note("no priced invocations")
    };
    put(tcc);

    let candidates: Vec<SoftTriggerCandidate> = tasks
        .iter()
        .filter_map(|t| {
            let latest = t.first_soft_trigger.as_ref()?;
            Some(SoftTriggerCandidate {
                was_spurious: latest.is_some() && *latest == t.fin.ground_truth,
                suppressed_by_reinvocation: t.escalation.is_none(),
            })
        })
        .collect();
    let spurious = candidates.iter().filter(|c| c.was_spurious).count();
    put(MetricValue::new(
        MetricName::FalsePositiveAttenuation,
        false_positive_attenuation(&candidates),
        spurious,
    ));

    // L4
    let n_esc = tasks.iter().filter(|t| t.escalation.is_some()).count();
    let rbi = if n == 0 { 0.0 } else { n_esc as f64 / n as f64 };
    put(MetricValue::new(MetricName::ReviewBurdenIndex, rbi, n));
    let reviews: Vec<&Review> = tasks.iter().filter_map(|t| t.review.as_ref()).collect();
    let reversals = reviews.iter().filter(|r| r.reverses).count();
    let or = if reviews.is_empty() {
        0.0
    } else {
        reversals as f64 / reviews.len() as f64
    };
    put(MetricValue::new(MetricName::OverrideRate, or, reviews.len()));
    let warranted = reviews.iter().filter(|r| r.warranted).count();
    put(MetricValue::new(
        MetricName::SignalToNoiseRatio,
        snr_from_counts(warranted, reviews.len() - warranted),
        reviews.len(),
    ));

    // cross-cutting
    let etc = if n_records == 0 {
        1.0
    } else {
        n_complete as f64 / n_records as f64
    };
    put(MetricValue::new(MetricName::EvidenceTrailCompleteness, etc, n_records));

    let pairs: Vec<(f64, bool)> = tasks.iter().flat_map(|t| t.pairs()).collect();
    match expected_calibration_error(&pairs, params.ece_bins) {
        Ok(v) => put(MetricValue::new(MetricName::CalibrationError, v, pairs.len())),
        Err(_) => put(MetricValue::new(MetricName::CalibrationError, 0.0, 0).with_note("no invocations")),
    }

    let actions: Vec<AutonomyAction> = tasks
        .iter()
        .map(|t| AutonomyAction {
            executed_level: t.fin.executed,
            granted_level: t.fin.granted,
        })
        .collect();
    put(MetricValue::new(
        MetricName::AutonomyBoundaryCompliance,
        autonomy_boundary_compliance(&actions),
        n,
    ));

    let w = params.stability_windows;
    let osi = if w >= 2 && n >= w {
        let refs: Vec<&TaskFacts> = tasks.iter().collect();
        let windows: Vec<&[&TaskFacts]> = (0..w).map(|k| &refs[k * n / w..(k + 1) * n / w]).collect();
        let series: BTreeMap<String, Vec<f64>> = params
            .stability_tolerances
            .keys()
            .map(|m| {
                let xs = windows.iter().map(|win| window_value(*m, win, params.ece_bins)).collect();
                (m.as_str().to_string(), xs)
            })
            .collect();
        let tol: BTreeMap<String, f64> = params
            .stability_tolerances
            .iter()
            .map(|(m, t)| (m.as_str().to_string(), *t))
            .collect();
        match operational_stability_index(&series, &tol) {
            Ok(v) => MetricValue::new(MetricName::OperationalStabilityIndex, v, w),
            Err(e) => MetricValue::new(MetricName::OperationalStabilityIndex, 0.0, w).with_note(e.to_string()),
        }
    } else {
        MetricValue::new(MetricName::OperationalStabilityIndex, 1.0, 0)
            .with_note("fewer tasks than stability windows")
    };
    put(osi);

    let mut with_first = 0;
    let mut errors = 0;
    let mut absorbed = 0;
    for t in &tasks {
        let (Some(fp), Some(truth)) = (&t.fin.first_pass, &t.fin.ground_truth) else {
            continue;
        };
        with_first += 1;
        if fp != truth {
            errors += 1;
            if &t.fin.decision == truth {
                absorbed += 1;
            }
        }
    }

    let tick_span = if tasks.is_empty() {
        [0, 0]
    } else {
        [
            tasks.iter().map(|t| t.fin.created_at).min().unwrap_or(0),
            tasks.iter().map(|t| t.fin.finalized_at).max().unwrap_or(0),
        ]
    };

    Ok(LogMetrics {
        metrics: out,
        absorption: AbsorptionStats::from_counts(with_first, errors, absorbed),
        tick_span,
        n_tasks: n,
    })
}

/// The metrics [`log_metrics`] produces.
pub const LOG_DERIVED: [MetricName; 14] = [
    MetricName::RuleCoverageRate,
    MetricName::RuleConsistencyIndex,
    MetricName::ContextRelevancePrecision,
    MetricName::ContextFreshnessIndex,
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
];
