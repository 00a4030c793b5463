//! Discrete-event execution of a scenario.
//!
//! Each task runs the full layer stack (rule core, policy loop over the
//! component inventory, optional review) inside its own random streams, so
//! tasks can execute on any worker in any order. Results are merged in
//! task-id order before the autonomy ledger pass and persistence.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::evidence::{EventKind, EvidenceTrail};
use crate::inventory::{expected_calibration_error, invoke, InvocationRequest};
use crate::policy::{
    escalation_precision, step, update_autonomy, AutonomyLedger, AutonomyLevel, DecisionKind,
    EscalationReason, InvocationPlan, PolicyState, WindowMetrics,
};
use crate::rng::{stream, steps};
use crate::rules::{evaluate_rules, RuleAction};
use crate::sim::config::{ScenarioConfig, SubDomainConfig};
use crate::sim::generate::{freshest, generate_task, pipeline_task_id, stream_task_id};
use crate::sim::report::{build_reports, RunReports};
use crate::sim::validate::{check_semantics, ConfigError};
use crate::supervision::{adjudicate, EscalatedCase, ReviewOutcome};
use crate::types::{CostVector, CostWeights, TaskInstance, Tick};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    ConfigInvalid(#[from] ConfigError),
    #[error("task `{task_id}` finalized at tick {tick}, past the limit {limit}")]
    TickLimitExceeded {
        task_id: String,
        tick: Tick,
        limit: Tick,
    },
    #[error("no ground truth available")]
    NoGroundTruth,
    #[error("worker pool: {0}")]
    Pool(String),
    #[error("task `{task_id}`: {detail}")]
    Task { task_id: String, detail: String },
    #[error("report: {0}")]
    Report(String),
}

fn task_err(task: &TaskInstance, e: impl std::fmt::Display) -> SimError {
    SimError::Task {
        task_id: task.task_id.clone(),
        detail: e.to_string(),
    }
}

/// One sub-domain's layer stack with plans resolved to execution order.
pub struct SubDomainRuntime<'a> {
    pub cfg: &'a SubDomainConfig,
    pub seed: u64,
    pub weights: CostWeights,
    plans: BTreeMap<String, InvocationPlan>,
    minimal_cost: BTreeMap<String, f64>,
}

impl<'a> SubDomainRuntime<'a> {
    pub fn new(cfg: &'a SubDomainConfig, seed: u64, weights: CostWeights) -> Result<Self, SimError> {
        let mut plans = BTreeMap::new();
        for p in &cfg.plans {
            let ordered = p.ordered(&cfg.components).map_err(|e| SimError::Task {
                task_id: cfg.label.clone(),
                detail: e.to_string(),
            })?;
            plans.insert(p.task_type.clone(), ordered);
        }
        let minimal_cost = cfg
            .task_generator
            .iter()
            .map(|g| {
                let cheapest = cfg
                    .components
                    .iter()
                    .filter(|c| c.supports(&g.task_type))
                    .map(|c| c.invocation_cost().scalarize(&weights))
                    .fold(f64::INFINITY, f64::min);
                (g.task_type.clone(), if cheapest.is_finite() { cheapest } else { 0.0 })
            })
            .collect();
        Ok(SubDomainRuntime {
            cfg,
            seed,
            weights,
            plans,
            minimal_cost,
        })
    }

    pub fn plan(&self, task_type: &str) -> Option<&InvocationPlan> {
        self.plans.get(task_type)
    }

    pub fn alphabet(&self, task_type: &str) -> &[String] {
        self.cfg
            .generator(task_type)
            .map(|g| g.alphabet.as_slice())
            .unwrap_or(&[])
    }
}

/// A processed task whose trail still lacks its finalization record.
#[derive(Debug, Clone)]
pub struct TaskRun {
    pub task: TaskInstance,
    pub trail: EvidenceTrail,
    pub first_pass: Option<String>,
    pub final_decision: String,
    pub final_confidence: f64,
    pub escalation: Option<EscalationReason>,
    /// Latest automated decision when escalated.
    pub pre_escalation: Option<String>,
    pub review: Option<ReviewOutcome>,
    pub total_cost: CostVector,
    pub finalized_at: Tick,
    pub calibration_pairs: Vec<(f64, bool)>,
}

fn payload(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        _ => Map::new(),
    }
}

fn context_json(items: &[crate::types::ContextItem]) -> Value {
    Value::Array(
        items
            .iter()
            .map(|it| {
                let mut m = Map::new();
                m.insert("key".into(), json!(it.key));
                m.insert("stamped_at".into(), json!(it.stamped_at));
                if let Some(r) = it.relevant {
                    m.insert("relevant".into(), json!(r));
                }
                Value::Object(m)
            })
            .collect(),
    )
}

/// Runs one task through the layer stack.
pub fn process_task(rt: &SubDomainRuntime<'_>, task: TaskInstance) -> Result<TaskRun, SimError> {
    let cfg = rt.cfg;
    let tid = task.task_id.clone();
    let alphabet = rt.alphabet(&task.task_type);
    let mut trail = EvidenceTrail::new(tid.clone());
    let log = |trail: &mut EvidenceTrail, actor: &str, kind, v: Value| {
        let mut p = payload(v);
        p.insert("task_id".into(), json!(tid));
        trail.append(actor, kind, p).map(|_| ())
    };

    let l1 = evaluate_rules(&cfg.ruleset, &task);
    for m in &l1.matched {
        log(
            &mut trail,
            "L1",
            EventKind::RuleFired,
            json!({
                "rule_id": m.rule_id,
                "rule_version": m.version,
                "outcome": m.action.label(),
                "priority": m.priority,
                "mandated": l1.mandated_action.as_ref() == Some(&m.action),
            }),
        )
        .map_err(|e| task_err(&task, e))?;
    }

    let base = rt
        .plan(&task.task_type)
        .ok_or_else(|| task_err(&task, "no plan for task type"))?;
    let plan = match &l1.mandated_action {
        Some(RuleAction::Route(c)) if base.steps.contains(c) => base.routed_to(c),
        _ => base.clone(),
    };

    let trigger = &cfg.trigger;
    let mut state = PolicyState::new(&task, trigger);
    let mut now = task.created_at;
    let first_items = freshest(&task.context_items, cfg.context.first_pass_items);
    let all_items = freshest(&task.context_items, usize::MAX);
    let mut pairs = Vec::new();
    let mut first_pass = None;
    let truth = task.ground_truth.clone();

    loop {
        let (decision, next) = step(&plan, trigger, &l1, &state).map_err(|e| task_err(&task, e))?;
        let target = match &decision.kind {
            DecisionKind::Invoke(c) | DecisionKind::Reinvoke { component_id: c, .. } => c.clone(),
            DecisionKind::Escalate(r) => r.as_str().to_string(),
            DecisionKind::Finalize(v) => v.decision.clone(),
        };
        let mut p = payload(json!({
            "decision_kind": decision.kind.label(),
            "target": target,
            "reason": decision.reason_json(),
            "soft_trigger": decision.reason.soft_trigger,
            "tick": now,
        }));
        if let Some(v) = state.latest() {
            p.insert("latest_decision".into(), json!(v.decision));
        }
        // thresholds in force, so a trigger firing can be checked from the
        // trail alone
        if matches!(decision.kind, DecisionKind::Escalate(_)) {
            p.insert(
                "trigger".into(),
                json!({
                    "risk_threshold": trigger.risk_threshold.as_str(),
                    "confidence_threshold": trigger.confidence_threshold,
                    "inconsistency_threshold": trigger.inconsistency_threshold,
                }),
            );
        }
        log(&mut trail, "L3", EventKind::PolicyDecision, Value::Object(p))
            .map_err(|e| task_err(&task, e))?;
        state = next;

        match decision.kind {
            DecisionKind::Invoke(c) | DecisionKind::Reinvoke { component_id: c, .. } => {
                let comp = cfg
                    .component(&c)
                    .ok_or_else(|| task_err(&task, format!("unknown component `{c}`")))?;
                let attempt = state.history.len() as u32 + 1;
                let supplied = if attempt == 1 { &first_items } else { &all_items };
                let req = InvocationRequest {
                    task: &task,
                    supplied_context: supplied.clone(),
                    attempt,
                    baseline_context: first_items.len(),
                    alphabet,
                };
                let mut rng = stream(rt.seed, &task.task_id, attempt as u64);
                let verdict = invoke(comp, &req, &mut rng).map_err(|e| task_err(&task, e))?;
                log(
                    &mut trail,
                    &verdict.source,
                    EventKind::Invocation,
                    json!({
                        "component_id": c,
                        "component_class": comp.component_class.to_string(),
                        "decision": verdict.decision,
                        "confidence": verdict.confidence,
                        "cost": verdict.cost.to_json(),
                        "cost_scalar": verdict.cost.scalarize(&rt.weights),
                        "attempt": attempt,
                        "expanded_context": req.has_expanded_context(),
                        "tick": now,
                        "freshness_horizon": cfg.context.freshness_horizon,
                        "context": context_json(supplied),
                    }),
                )
                .map_err(|e| task_err(&task, e))?;
                if first_pass.is_none() {
                    first_pass = Some(verdict.decision.clone());
                }
                pairs.push((verdict.confidence, Some(&verdict.decision) == truth.as_ref()));
                now += comp.sim.latency_ticks;
                state.record_verdict(c, verdict);
            }
            DecisionKind::Escalate(reason) => {
                let pre = state.latest().map(|v| v.decision.clone());
                let mut p = payload(json!({
                    "trigger": reason.as_str(),
                    "risk_class": state.risk_class.as_str(),
                    "confidence": state.accumulated_confidence,
                    "risk_threshold": trigger.risk_threshold.as_str(),
                    "confidence_threshold": trigger.confidence_threshold,
                    "budget_remaining": state.budget_remaining,
                    "tick": now,
                }));
                if let Some(d) = &pre {
                    p.insert("pre_escalation_decision".into(), json!(d));
                }
                log(&mut trail, "L3", EventKind::Escalation, Value::Object(p))
                    .map_err(|e| task_err(&task, e))?;

                let review = {
                    let case = EscalatedCase::from_decision(&task, alphabet, &decision, &state)
                        .map_err(|e| task_err(&task, e))?;
                    let mut rng = stream(rt.seed, &task.task_id, steps::ADJUDICATE);
                    adjudicate(&cfg.adjudicator, &case, &mut rng).map_err(|e| task_err(&task, e))?
                };
                let overridden = pre.as_deref().filter(|_| review.action.reverses());
                log(
                    &mut trail,
                    "L4",
                    EventKind::Adjudication,
                    Value::Object(review.payload(overridden)),
                )
                .map_err(|e| task_err(&task, e))?;
                now += cfg.adjudicator.review_ticks;
                state.close_after_review().map_err(|e| task_err(&task, e))?;
                return Ok(TaskRun {
                    final_decision: review.final_decision.clone(),
                    final_confidence: cfg.adjudicator.competence,
                    escalation: Some(reason),
                    pre_escalation: pre,
                    total_cost: state.accumulated_cost + review.cost,
                    review: Some(review),
                    finalized_at: now,
                    calibration_pairs: pairs,
                    first_pass,
                    trail,
                    task,
                });
            }
            DecisionKind::Finalize(v) => {
                return Ok(TaskRun {
                    final_decision: v.decision,
                    final_confidence: v.confidence,
                    escalation: None,
                    pre_escalation: None,
                    review: None,
                    total_cost: state.accumulated_cost,
                    finalized_at: now,
                    calibration_pairs: pairs,
                    first_pass,
                    trail,
                    task,
                });
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct TaskSummary {
    pub task_id: String,
    pub sub_domain: String,
    pub task_type: String,
    pub ground_truth: Option<String>,
    pub first_pass_decision: Option<String>,
    pub final_decision: String,
    pub escalation: Option<EscalationReason>,
    pub created_at: Tick,
    pub finalized_at: Tick,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub scenario_id: String,
    pub seed: u64,
    /// Canonical order: sub-domain label, then task id.
    pub tasks: Vec<TaskSummary>,
    pub trails: BTreeMap<String, Vec<EvidenceTrail>>,
    pub ledgers: BTreeMap<String, AutonomyLedger>,
    pub reports: RunReports,
}

fn window_metrics(runs: &[&TaskRun], bins: usize) -> WindowMetrics {
    let esc: Vec<(&str, &str)> = runs
        .iter()
        .filter_map(|r| Some((r.pre_escalation.as_deref()?, r.task.ground_truth.as_deref()?)))
        .collect();
    let reviews: Vec<&ReviewOutcome> = runs.iter().filter_map(|r| r.review.as_ref()).collect();
    let override_rate = if reviews.is_empty() {
        0.0
    } else {
        reviews.iter().filter(|r| r.action.reverses()).count() as f64 / reviews.len() as f64
    };
    let pairs: Vec<(f64, bool)> = runs.iter().flat_map(|r| r.calibration_pairs.iter().copied()).collect();
    WindowMetrics {
        escalation_precision: escalation_precision(&esc),
        override_rate,
        calibration_error: expected_calibration_error(&pairs, bins).unwrap_or(0.0),
        n_tasks: runs.len(),
    }
}

/// Sequential pass over a sub-domain's runs in task-id order: assigns
/// granted autonomy levels per window, records level changes on the
/// sub-domain's governance trail, and appends every finalization record.
fn finalize_sub_domain(
    rt: &SubDomainRuntime<'_>,
    mut runs: Vec<TaskRun>,
    ece_bins: usize,
) -> Result<(Vec<EvidenceTrail>, Vec<TaskSummary>, AutonomyLedger), SimError> {
    let cfg = rt.cfg;
    runs.sort_by(|a, b| a.task.task_id.cmp(&b.task.task_id));
    let th = &cfg.autonomy.thresholds;
    let mut ledger = AutonomyLedger::new(th.clone());
    for (t, l) in &cfg.autonomy.initial {
        ledger = ledger.with_level(t.clone(), *l);
    }
    let gov_id = format!("{}~autonomy", cfg.label);
    let mut gov = EvidenceTrail::new(gov_id.clone());

    let mut by_type: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in runs.iter().enumerate() {
        by_type.entry(r.task.task_type.as_str()).or_default().push(i);
    }
    // level changes per task type, effective strictly after the tick at
    // which the window that justified them closed
    let mut timeline: BTreeMap<&str, Vec<(Tick, AutonomyLevel)>> = BTreeMap::new();
    for (tt, idxs) in &by_type {
        let line = timeline.entry(tt).or_default();
        line.push((0, ledger.level(tt)));
        for (w, chunk) in idxs.chunks(th.window.max(1)).enumerate() {
            if chunk.len() < th.window {
                continue;
            }
            let window: Vec<&TaskRun> = chunk.iter().map(|&i| &runs[i]).collect();
            let closed_at = window.iter().map(|r| r.finalized_at).max().unwrap_or(0);
            let m = window_metrics(&window, ece_bins);
            let next = update_autonomy(&ledger, tt, m).map_err(|e| SimError::Task {
                task_id: gov_id.clone(),
                detail: e.to_string(),
            })?;
            for change in &next.history[ledger.history.len()..] {
                let mut p = change.payload();
                p.insert("task_id".into(), json!(gov_id));
                p.insert("window_index".into(), json!(w));
                p.insert("after_task".into(), json!(runs[*chunk.last().expect("non-empty")].task.task_id));
                p.insert("effective_after".into(), json!(closed_at));
                gov.append("L3", EventKind::AutonomyChange, p)
                    .map_err(|e| SimError::Task {
                        task_id: gov_id.clone(),
                        detail: e.to_string(),
                    })?;
                line.push((closed_at, change.new_level));
            }
            ledger = next;
        }
    }
    let level_at = |tt: &str, tick: Tick| -> AutonomyLevel {
        let line = &timeline[tt];
        line[1..]
            .iter()
            .take_while(|(t, _)| *t < tick)
            .last()
            .map_or(line[0].1, |(_, l)| *l)
    };
    let levels: Vec<(AutonomyLevel, AutonomyLevel)> = runs
        .iter()
        .map(|r| {
            let tt = r.task.task_type.as_str();
            // a reviewed task was ruled on by a person; otherwise the action
            // ran under the level in force when the task entered
            let executed = if r.review.is_some() {
                AutonomyLevel::AdviseOnly
            } else {
                level_at(tt, r.task.created_at)
            };
            (executed, level_at(tt, r.finalized_at))
        })
        .collect();

    let mut trails = Vec::with_capacity(runs.len() + 1);
    let mut summaries = Vec::with_capacity(runs.len());
    for (run, (executed, granted)) in runs.into_iter().zip(levels) {
        let minimal = rt.minimal_cost.get(&run.task.task_type).copied().unwrap_or(0.0);
        let mut p = payload(json!({
            "task_id": run.task.task_id,
            "sub_domain": cfg.label,
            "task_type": run.task.task_type,
            "decision": run.final_decision,
            "confidence": run.final_confidence,
            "total_cost": run.total_cost.to_json(),
            "minimal_path_cost": minimal,
            "executed_level": executed.as_str(),
            "granted_level": granted.as_str(),
            "created_at": run.task.created_at,
            "finalized_at": run.finalized_at,
            "via": if run.review.is_some() { "L4" } else { "L3" },
        }));
        if let Some(gt) = &run.task.ground_truth {
            p.insert("ground_truth".into(), json!(gt));
        }
        if let Some(fp) = &run.first_pass {
            p.insert("first_pass_decision".into(), json!(fp));
        }
        let actor = if run.review.is_some() { "L4" } else { "L3" };
        let mut trail = run.trail;
        trail
            .append(actor, EventKind::Finalization, p)
            .map_err(|e| task_err(&run.task, e))?;
        summaries.push(TaskSummary {
            task_id: run.task.task_id.clone(),
            sub_domain: cfg.label.clone(),
            task_type: run.task.task_type.clone(),
            ground_truth: run.task.ground_truth.clone(),
            first_pass_decision: run.first_pass,
            final_decision: run.final_decision,
            escalation: run.escalation,
            created_at: run.task.created_at,
            finalized_at: run.finalized_at,
        });
        trails.push(trail);
    }
    if !gov.is_empty() {
        trails.push(gov);
    }
    Ok((trails, summaries, ledger))
}

fn first_error<T>(results: Vec<Result<T, SimError>>) -> Result<Vec<T>, SimError> {
    results.into_iter().collect()
}

/// Runs a pipeline instance stage by stage. Stage k+1 is created one tick
/// after stage k finalizes and sees its decision as `upstream_decision`.
fn run_pipeline_instance(
    runtimes: &BTreeMap<&str, SubDomainRuntime<'_>>,
    p: &crate::sim::config::CrossDomainPipeline,
    j: usize,
    seed: u64,
) -> Result<Vec<TaskRun>, SimError> {
    let mut out: Vec<TaskRun> = Vec::with_capacity(p.stages.len());
    let mut created = j as Tick * p.arrival_interval;
    for (k, stage) in p.stages.iter().enumerate() {
        let rt = &runtimes[stage.sub_domain.as_str()];
        let id = pipeline_task_id(&p.pipeline_id, j, k);
        let mut task = generate_task(seed, rt.cfg, &id, created, Some(&stage.task_type));
        if let Some(prev) = out.last() {
            task.features.insert(
                "upstream_decision".into(),
                crate::types::FeatureValue::Cat(prev.final_decision.clone()),
            );
        }
        let run = process_task(rt, task)?;
        created = run.finalized_at + 1;
        out.push(run);
    }
    Ok(out)
}

pub fn task_count(cfg: &ScenarioConfig, sub: &SubDomainConfig) -> usize {
    sub.n_tasks.unwrap_or(cfg.n_tasks)
}

/// Runs a scenario on `workers` threads. Output does not depend on the
/// worker count.
pub fn run_scenario(cfg: &ScenarioConfig, workers: usize) -> Result<RunResult, SimError> {
    check_semantics(cfg)?;
    let runtimes: BTreeMap<&str, SubDomainRuntime<'_>> = cfg
        .sub_domains
        .iter()
        .map(|s| Ok((s.label.as_str(), SubDomainRuntime::new(s, cfg.seed, cfg.cost_weights)?)))
        .collect::<Result<_, SimError>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| SimError::Pool(e.to_string()))?;

    let mut per_sub: BTreeMap<String, Vec<TaskRun>> = BTreeMap::new();
    pool.install(|| -> Result<(), SimError> {
        for s in &cfg.sub_domains {
            let rt = &runtimes[s.label.as_str()];
            let runs: Vec<Result<TaskRun, SimError>> = (0..task_count(cfg, s))
                .into_par_iter()
                .map(|i| {
                    let id = stream_task_id(&s.label, i);
                    let task = generate_task(cfg.seed, s, &id, i as Tick * s.arrival_interval, None);
                    process_task(rt, task)
                })
                .collect();
            per_sub.entry(s.label.clone()).or_default().extend(first_error(runs)?);
        }
        for p in &cfg.pipelines {
            let runs: Vec<Result<Vec<TaskRun>, SimError>> = (0..p.instances)
                .into_par_iter()
                .map(|j| run_pipeline_instance(&runtimes, p, j, cfg.seed))
                .collect();
            for inst in first_error(runs)? {
                for run in inst {
                    per_sub.entry(run.task.sub_domain.clone()).or_default().push(run);
                }
            }
        }
        Ok(())
    })?;

    let mut trails = BTreeMap::new();
    let mut tasks = Vec::new();
    let mut ledgers = BTreeMap::new();
    for s in &cfg.sub_domains {
        let runs = per_sub.remove(&s.label).unwrap_or_default();
        if let Some(late) = runs
            .iter()
            .filter(|r| r.finalized_at > cfg.tick_limit)
            .min_by(|a, b| a.task.task_id.cmp(&b.task.task_id))
        {
            return Err(SimError::TickLimitExceeded {
                task_id: late.task.task_id.clone(),
                tick: late.finalized_at,
                limit: cfg.tick_limit,
            });
        }
        let rt = &runtimes[s.label.as_str()];
        let (t, summaries, ledger) = finalize_sub_domain(rt, runs, cfg.report.ece_bins)?;
        trails.insert(s.label.clone(), t);
        tasks.extend(summaries);
        ledgers.insert(s.label.clone(), ledger);
    }
    let reports = build_reports(cfg, &trails)?;
    Ok(RunResult {
        scenario_id: cfg.scenario_id.clone(),
        seed: cfg.seed,
        tasks,
        trails,
        ledgers,
        reports,
    })
}

/// Share of first-pass errors corrected by finalization.
pub fn error_absorption(result: &RunResult) -> Result<f64, SimError> {
    let mut errors = 0usize;
    let mut absorbed = 0usize;
    let mut any_truth = false;
    for t in &result.tasks {
        let Some(truth) = &t.ground_truth else { continue };
        any_truth = true;
        let Some(fp) = &t.first_pass_decision else { continue };
        if fp != truth {
            errors += 1;
            if &t.final_decision == truth {
                absorbed += 1;
            }
        }
    }
    if !any_truth && !result.tasks.is_empty() {
        return Err(SimError::NoGroundTruth);
    }
    Ok(if errors == 0 {
        1.0
    } else {
        absorbed as f64 / errors as f64
    })
}
