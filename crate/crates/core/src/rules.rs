//! Deterministic rule core.
//!
//! Rules are non-learned: a guard is a conjunction of comparisons over a
//! task's features, risk class and task type, and an action. Disjunction is
//! expressed as several rules. Conflicts are detected empirically, as guard
//! overlaps witnessed on a corpus of tasks.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::evidence::{canonical_json, ZERO_DIGEST};
use crate::types::{FeatureValue, RiskClass, TaskInstance, Tick};

#[derive(Debug, Error, PartialEq)]
pub enum RuleError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("invalid rule set: {0}")]
    InvalidRuleSet(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub enum CompareOp {
    #[serde(rename = "=")]
    Eq,
    #[serde(rename = "!=")]
    Ne,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "in")]
    In,
}

/// One comparison. `field` names a feature, or one of the reserved task
/// attributes `risk_class` and `task_type`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct Condition {
    pub field: String,
    pub op: CompareOp,
    pub value: Value,
}

impl Condition {
    pub fn new(field: impl Into<String>, op: CompareOp, value: Value) -> Self {
        Condition {
            field: field.into(),
            op,
            value,
        }
    }

    /// Total: a missing field or a type mismatch evaluates to `false`.
    pub fn holds(&self, task: &TaskInstance) -> bool {
        match self.field.as_str() {
            "risk_class" => self.holds_risk(task.risk_class),
            "task_type" => self.holds_str(&task.task_type),
            name => match task.features.get(name) {
                Some(FeatureValue::Num(x)) => self.holds_num(*x),
                Some(FeatureValue::Cat(s)) => self.holds_str(s),
                None => false,
            },
        }
    }

    fn holds_num(&self, x: f64) -> bool {
        if self.op == CompareOp::In {
            return self
                .value
                .as_array()
                .is_some_and(|xs| xs.iter().filter_map(Value::as_f64).any(|v| v == x));
        }
        let Some(v) = self.value.as_f64() else {
            return false;
        };
        compare(x.partial_cmp(&v), self.op)
    }

    fn holds_str(&self, s: &str) -> bool {
        if self.op == CompareOp::In {
            return self
                .value
                .as_array()
                .is_some_and(|xs| xs.iter().filter_map(Value::as_str).any(|v| v == s));
        }
        let Some(v) = self.value.as_str() else {
            return false;
        };
        compare(Some(s.cmp(v)), self.op)
    }

    fn holds_risk(&self, r: RiskClass) -> bool {
        if self.op == CompareOp::In {
            return self.value.as_array().is_some_and(|xs| {
                xs.iter()
                    .filter_map(|v| v.as_str().and_then(RiskClass::parse))
                    .any(|v| v == r)
            });
        }
        let Some(v) = self.value.as_str().and_then(RiskClass::parse) else {
            return false;
        };
        compare(Some(r.cmp(&v)), self.op)
    }
}

fn compare(ord: Option<std::cmp::Ordering>, op: CompareOp) -> bool {
    use std::cmp::Ordering::*;
    let Some(ord) = ord else { return false };
    match op {
        CompareOp::Eq => ord == Equal,
        CompareOp::Ne => ord != Equal,
        CompareOp::Lt => ord == Less,
        CompareOp::Le => ord != Greater,
        CompareOp::Gt => ord == Greater,
        CompareOp::Ge => ord != Less,
        CompareOp::In => false,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum RuleAction {
    Allow,
    Deny,
    MandateEscalation,
    Route(String),
}

impl RuleAction {
    /// Stable string form used in evidence payloads.
    pub fn label(&self) -> String {
        match self {
            RuleAction::Allow => "allow".into(),
            RuleAction::Deny => "deny".into(),
            RuleAction::MandateEscalation => "mandate_escalation".into(),
            RuleAction::Route(c) => format!("route:{c}"),
        }
    }

    pub fn parse_label(s: &str) -> Option<Self> {
        match s {
            "allow" => Some(RuleAction::Allow),
            "deny" => Some(RuleAction::Deny),
            "mandate_escalation" => Some(RuleAction::MandateEscalation),
            _ => s
                .strip_prefix("route:")
                .map(|c| RuleAction::Route(c.to_string())),
        }
    }

    /// Allow vs deny, or two distinct route targets.
    pub fn conflicts_with(&self, other: &RuleAction) -> bool {
        match (self, other) {
            (RuleAction::Allow, RuleAction::Deny) | (RuleAction::Deny, RuleAction::Allow) => true,
            (RuleAction::Route(a), RuleAction::Route(b)) => a != b,
            _ => false,
        }
    }
}

impl fmt::Display for RuleAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct Rule {
    pub rule_id: String,
    #[schemars(range(min = 1))]
    pub version: u32,
    /// Conjunction; an empty guard matches every task.
    #[serde(default)]
    pub guard: Vec<Condition>,
    pub action: RuleAction,
    #[serde(default)]
    pub priority: i64,
    /// Superseded versions stay in the set with `active = false` so update
    /// hashes can be checked.
    #[serde(default = "default_true")]
    pub active: bool,
}

impl Rule {
    pub fn new(rule_id: impl Into<String>, guard: Vec<Condition>, action: RuleAction) -> Self {
        Rule {
            rule_id: rule_id.into(),
            version: 1,
            guard,
            action,
            priority: 0,
            active: true,
        }
    }

    pub fn with_priority(mut self, p: i64) -> Self {
        self.priority = p;
        self
    }

    pub fn matches(&self, task: &TaskInstance) -> bool {
        self.guard.iter().all(|c| c.holds(task))
    }

    /// Digest of the canonical form (the `active` flag is excluded).
    pub fn digest(&self) -> String {
        let v = serde_json::json!({
            "rule_id": self.rule_id,
            "version": self.version,
            "guard": serde_json::to_value(&self.guard).expect("guard serializes"),
            "action": serde_json::to_value(&self.action).expect("action serializes"),
            "priority": self.priority,
        });
        hex::encode(Sha256::digest(canonical_json(&v).as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct RuleUpdate {
    pub rule_id: String,
    pub new_version: u32,
    #[serde(default)]
    pub author: String,
    #[serde(default)]
    pub timestamp: Option<Tick>,
    #[serde(default)]
    pub rationale: String,
    /// Digest of the replaced version; the zero digest for a new rule.
    pub prior_version_hash: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct RuleSet {
    #[serde(default)]
    pub rules: Vec<Rule>,
    #[serde(default)]
    pub update_log: Vec<RuleUpdate>,
}

impl RuleSet {
    pub fn new(rules: Vec<Rule>) -> Self {
        RuleSet {
            rules,
            update_log: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), RuleError> {
        let mut seen = BTreeSet::new();
        let mut active = BTreeSet::new();
        for r in &self.rules {
            if r.version < 1 {
                return Err(RuleError::InvalidRuleSet(format!(
                    "rule `{}` has version 0",
                    r.rule_id
                )));
            }
            if !seen.insert((r.rule_id.as_str(), r.version)) {
                return Err(RuleError::InvalidRuleSet(format!(
                    "duplicate version {} of rule `{}`",
                    r.version, r.rule_id
                )));
            }
            if r.active && !active.insert(r.rule_id.as_str()) {
                return Err(RuleError::InvalidRuleSet(format!(
                    "more than one active version of rule `{}`",
                    r.rule_id
                )));
            }
        }
        Ok(())
    }

    pub fn active_rules(&self) -> impl Iterator<Item = &Rule> {
        self.rules.iter().filter(|r| r.active)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchedRule {
    pub rule_id: String,
    pub version: u32,
    pub priority: i64,
    pub action: RuleAction,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RuleOutcome {
    /// Ordered by priority (descending), then rule id.
    pub matched: Vec<MatchedRule>,
    /// Action of the highest-priority matched rule.
    pub mandated_action: Option<RuleAction>,
    /// Pairs of matched rule ids with contradictory actions, each pair
    /// ordered lexically.
    pub conflicts: Vec<(String, String)>,
}

impl RuleOutcome {
    pub fn mandates_escalation(&self) -> bool {
        self.mandated_action == Some(RuleAction::MandateEscalation)
    }
}

pub fn evaluate_rules(ruleset: &RuleSet, task: &TaskInstance) -> RuleOutcome {
    let mut matched: Vec<MatchedRule> = ruleset
        .active_rules()
        .filter(|r| r.matches(task))
        .map(|r| MatchedRule {
            rule_id: r.rule_id.clone(),
            version: r.version,
            priority: r.priority,
            action: r.action.clone(),
        })
        .collect();
    matched.sort_by(|a, b| {
        b.priority
            .cmp(&a.priority)
            .then_with(|| a.rule_id.cmp(&b.rule_id))
    });
    let conflicts = conflicting_pairs(matched.iter().map(|m| (m.rule_id.as_str(), &m.action)));
    RuleOutcome {
        mandated_action: matched.first().map(|m| m.action.clone()),
        conflicts: conflicts.into_iter().collect(),
        matched,
    }
}

fn conflicting_pairs<'a>(
    matched: impl Iterator<Item = (&'a str, &'a RuleAction)>,
) -> BTreeSet<(String, String)> {
    let matched: Vec<_> = matched.collect();
    let mut out = BTreeSet::new();
    for (i, (a, act_a)) in matched.iter().enumerate() {
        for (b, act_b) in &matched[i + 1..] {
            if act_a.conflicts_with(act_b) {
                out.insert(ordered_pair(a, b));
            }
        }
    }
    out
}

fn ordered_pair(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

/// Per-task firing witnesses: the `(rule_id, action)` pairs that matched.
pub type Witness = Vec<(String, RuleAction)>;

/// Coverage over witnesses: fraction of tasks with at least one firing.
pub fn coverage_from_witnesses(witnesses: &[Witness]) -> Result<f64, RuleError> {
    if witnesses.is_empty() {
        return Err(RuleError::EmptyCorpus);
    }
    let covered = witnesses.iter().filter(|w| !w.is_empty()).count();
    Ok(covered as f64 / witnesses.len() as f64)
}

/// Consistency over witnesses, plus the number of co-matched pairs.
pub fn consistency_from_witnesses(witnesses: &[Witness]) -> Result<(f64, usize), RuleError> {
    if witnesses.is_empty() {
        return Err(RuleError::EmptyCorpus);
    }
    let mut co_matched: BTreeSet<(String, String)> = BTreeSet::new();
    let mut conflicting: BTreeSet<(String, String)> = BTreeSet::new();
    for w in witnesses {
        for (i, (a, _)) in w.iter().enumerate() {
            for (b, _) in &w[i + 1..] {
                if a != b {
                    co_matched.insert(ordered_pair(a, b));
                }
            }
        }
        conflicting.extend(conflicting_pairs(w.iter().map(|(id, a)| (id.as_str(), a))));
    }
    if co_matched.is_empty() {
        return Ok((1.0, 0));
    }
    Ok((
        1.0 - conflicting.len() as f64 / co_matched.len() as f64,
        co_matched.len(),
    ))
}

fn witnesses(ruleset: &RuleSet, corpus: &[TaskInstance]) -> Vec<Witness> {
    corpus
        .iter()
        .map(|t| {
            evaluate_rules(ruleset, t)
                .matched
                .into_iter()
                .map(|m| (m.rule_id, m.action))
                .collect()
        })
        .collect()
}

pub fn rule_coverage_rate(ruleset: &RuleSet, corpus: &[TaskInstance]) -> Result<f64, RuleError> {
    coverage_from_witnesses(&witnesses(ruleset, corpus))
}

pub fn rule_consistency_index(
    ruleset: &RuleSet,
    corpus: &[TaskInstance],
) -> Result<f64, RuleError> {
    consistency_from_witnesses(&witnesses(ruleset, corpus)).map(|(v, _)| v)
}

/// Whether an update carries an author, a timestamp, a non-empty rationale
/// and a prior-version digest that matches the rule it replaced.
pub fn update_is_traceable(ruleset: &RuleSet, u: &RuleUpdate) -> bool {
    if u.author.trim().is_empty() || u.timestamp.is_none() || u.rationale.trim().is_empty() {
        return false;
    }
    let versions: Vec<&Rule> = ruleset
        .rules
        .iter()
        .filter(|r| r.rule_id == u.rule_id)
        .collect();
    if !versions.iter().any(|r| r.version == u.new_version) {
        return false;
    }
    let prior = versions
        .iter()
        .filter(|r| r.version < u.new_version)
        .max_by_key(|r| r.version);
    match prior {
        Some(p) => p.digest() == u.prior_version_hash,
        None => u.prior_version_hash == ZERO_DIGEST,
    }
}

pub fn update_traceability_coefficient(ruleset: &RuleSet) -> f64 {
    if ruleset.update_log.is_empty() {
        return 1.0;
    }
    let ok = ruleset
        .update_log
        .iter()
        .filter(|u| update_is_traceable(ruleset, u))
        .count();
    ok as f64 / ruleset.update_log.len() as f64
}

/// Checks that each update's version strictly exceeds every earlier update
/// of the same rule.
pub fn update_versions_monotone(log: &[RuleUpdate]) -> bool {
    let mut last: BTreeMap<&str, u32> = BTreeMap::new();
    log.iter().all(|u| {
        let prev = last.insert(u.rule_id.as_str(), u.new_version);
        prev.is_none_or(|p| u.new_version > p)
    })
}
