//! Report assembly: log-derived metrics plus the three metrics that are a
//! function of configuration (rule update traceability, input perturbation
//! stability and the parsimony ratio).
//!
//! Both the run and `verify` go through [`build_reports`], which is what
//! makes a persisted report re-derivable.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::audit::{log_metrics, AbsorptionStats, AuditParams, LogMetrics};
use crate::evidence::EvidenceTrail;
use crate::inventory::{
    expected_calibration_error, input_perturbation_stability, invoke, InvocationRequest,
};
use crate::metrics::{
    cpr, CprResult, EvalResult, MetricName, MetricValue, MetricsError, RunMeta, TrustReport,
};
use crate::rng::{stream, steps};
use crate::rules::update_is_traceable;
use crate::sim::config::{ParsimonyConfig, ScenarioConfig, SubDomainConfig};
use crate::sim::engine::{task_count, SimError, SubDomainRuntime};
use crate::sim::generate::{freshest, generate_task, stream_task_id};
use crate::types::Tick;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReports {
    pub scenario_id: String,
    pub seed: u64,
    pub platform: TrustReport,
    pub sub_domains: BTreeMap<String, TrustReport>,
    pub absorption: AbsorptionStats,
    pub sub_domain_absorption: BTreeMap<String, AbsorptionStats>,
}

/// Counts behind the config-derived metrics, kept so they can be pooled
/// across sub-domains.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigAssessment {
    pub traceable_updates: usize,
    pub total_updates: usize,
    pub stability_sum: f64,
    pub stability_probes: usize,
    pub replicas: usize,
    pub parsimony: Result<ParsimonyAssessment, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsimonyAssessment {
    pub task_type: String,
    pub deployed: String,
    pub evals: BTreeMap<String, EvalResult>,
    pub result: CprResult,
}

fn default_parsimony(sub: &SubDomainConfig, rt: &SubDomainRuntime<'_>) -> Option<ParsimonyConfig> {
    let g = sub.task_generator.first()?;
    let deployed = rt.plan(&g.task_type)?.steps.first()?.clone();
    Some(ParsimonyConfig {
        task_type: g.task_type.clone(),
        deployed,
        requirement: Default::default(),
        eval_samples: 2000,
    })
}

/// Benchmarks every component supporting `task_type` on the same
/// generated evaluation tasks.
pub fn benchmark_components(
    seed: u64,
    sub: &SubDomainConfig,
    task_type: &str,
    samples: usize,
    bins: usize,
) -> BTreeMap<String, EvalResult> {
    let alphabet = sub
        .generator(task_type)
        .map(|g| g.alphabet.as_slice())
        .unwrap_or(&[]);
    let tasks: Vec<_> = (0..samples)
        .map(|i| generate_task(seed, sub, &format!("{}~bench-{i:06}", sub.label), 0, Some(task_type)))
        .collect();
    sub.components
        .iter()
        .filter(|c| c.supports(task_type))
        .map(|c| {
            let mut pairs = Vec::with_capacity(samples);
            for t in &tasks {
                let req = InvocationRequest {
                    supplied_context: freshest(&t.context_items, sub.context.first_pass_items),
                    ..InvocationRequest::first_pass(t, alphabet)
                };
                let key = format!("{}#{}", t.task_id, c.component_id);
                let mut rng = stream(seed, &key, steps::BENCHMARK);
                // a failed invocation counts as a miss at zero confidence
                let pair = match invoke(c, &req, &mut rng) {
                    Ok(v) => (v.confidence, Some(&v.decision) == t.ground_truth.as_ref()),
                    Err(_) => (0.0, false),
                };
                pairs.push(pair);
            }
            let hits = pairs.iter().filter(|p| p.1).count();
            let eval = EvalResult {
                accuracy: if samples == 0 { 0.0 } else { hits as f64 / samples as f64 },
                ece: expected_calibration_error(&pairs, bins).unwrap_or(0.0),
                latency: c.invocation_cost().latency,
            };
            (c.component_id.clone(), eval)
        })
        .collect()
}

/// Parsimony assessment for a sub-domain; `deployed` overrides the
/// configured (or default first-plan-step) deployment.
pub fn assess_parsimony(
    cfg: &ScenarioConfig,
    sub: &SubDomainConfig,
    deployed: Option<&str>,
) -> Result<ParsimonyAssessment, String> {
    let rt = SubDomainRuntime::new(sub, cfg.seed, cfg.cost_weights).map_err(|e| e.to_string())?;
    let mut pc = sub
        .parsimony
        .clone()
        .or_else(|| default_parsimony(sub, &rt))
        .ok_or("no task type to assess")?;
    if let Some(d) = deployed {
        pc.deployed = d.to_string();
    }
    let evals = benchmark_components(cfg.seed, sub, &pc.task_type, pc.eval_samples, cfg.report.ece_bins);
    let inventory: Vec<_> = sub
        .components
        .iter()
        .filter(|c| c.supports(&pc.task_type))
        .cloned()
        .collect();
    let dep = sub
        .component(&pc.deployed)
        .ok_or_else(|| format!("unknown deployed component `{}`", pc.deployed))?;
    let result = cpr(dep, &inventory, &pc.requirement, &evals, &cfg.cost_weights)
        .map_err(|e: MetricsError| e.to_string())?;
    Ok(ParsimonyAssessment {
        task_type: pc.task_type,
        deployed: pc.deployed,
        evals,
        result,
    })
}

pub fn assess_config(cfg: &ScenarioConfig, sub: &SubDomainConfig) -> ConfigAssessment {
    let log = &sub.ruleset.update_log;
    let traceable = log.iter().filter(|u| update_is_traceable(&sub.ruleset, u)).count();

    let pc = &sub.perturbation;
    let mut stability_sum = 0.0;
    let mut probes = 0usize;
    if let Ok(rt) = SubDomainRuntime::new(sub, cfg.seed, cfg.cost_weights) {
        for i in 0..pc.samples.min(task_count(cfg, sub)) {
            let id = stream_task_id(&sub.label, i);
            let task = generate_task(cfg.seed, sub, &id, i as Tick * sub.arrival_interval, None);
            let Some(comp) = rt
                .plan(&task.task_type)
                .and_then(|p| p.steps.first())
                .and_then(|c| sub.component(c))
            else {
                continue;
            };
            let req = InvocationRequest {
                supplied_context: freshest(&task.context_items, sub.context.first_pass_items),
                ..InvocationRequest::first_pass(&task, rt.alphabet(&task.task_type))
            };
            let mut rng = stream(cfg.seed, &task.task_id, steps::PERTURB);
            if let Ok(s) = input_perturbation_stability(comp, &req, pc.magnitude, pc.replicas, &mut rng) {
                stability_sum += s;
                probes += 1;
            }
        }
    }

    ConfigAssessment {
        traceable_updates: traceable,
        total_updates: log.len(),
        stability_sum,
        stability_probes: probes,
        replicas: pc.replicas,
        parsimony: assess_parsimony(cfg, sub, None),
    }
}

fn config_metrics(parts: &[&ConfigAssessment]) -> [MetricValue; 3] {
    let traceable: usize = parts.iter().map(|p| p.traceable_updates).sum();
    let total: usize = parts.iter().map(|p| p.total_updates).sum();
    let utc = if total == 0 {
        MetricValue::new(MetricName::UpdateTraceabilityCoefficient, 1.0, 0)
    } else {
        MetricValue::new(
            MetricName::UpdateTraceabilityCoefficient,
            traceable as f64 / total as f64,
            total,
        )
    };

    let probes: usize = parts.iter().map(|p| p.stability_probes).sum();
    let replicas: usize = parts.iter().map(|p| p.stability_probes * p.replicas).sum();
    let ipsr = if probes == 0 {
        MetricValue::new(MetricName::InputPerturbationStabilityRate, 1.0, 0)
            .with_note("no tasks with numeric features probed")
    } else {
        let sum: f64 = parts.iter().map(|p| p.stability_sum).sum();
        MetricValue::new(MetricName::InputPerturbationStabilityRate, sum / probes as f64, replicas)
    };

    // cost-weighted pooling: sum of cheapest adequate costs over sum of
    // deployed costs
    let ok: Vec<&ParsimonyAssessment> = parts.iter().filter_map(|p| p.parsimony.as_ref().ok()).collect();
    let errs: Vec<&str> = parts
        .iter()
        .filter_map(|p| p.parsimony.as_ref().err().map(String::as_str))
        .collect();
    let cpr = if ok.is_empty() {
        MetricValue::new(MetricName::ComputationalParsimonyRatio, 0.0, 0)
            .with_note(format!("undefined: {}", errs.join("; ")))
    } else {
        let cheapest: f64 = ok.iter().map(|a| a.result.cheapest_cost).sum();
        let deployed: f64 = ok.iter().map(|a| a.result.deployed_cost).sum();
        let n: usize = ok.iter().map(|a| a.evals.len()).sum();
        let mut m = MetricValue::new(MetricName::ComputationalParsimonyRatio, cheapest / deployed, n);
        if !errs.is_empty() {
            m = m.with_note(format!("excluded: {}", errs.join("; ")));
        }
        m
    };
    [utc, ipsr, cpr]
}

fn assemble(
    scope: &str,
    cfg: &ScenarioConfig,
    logs: &LogMetrics,
    config: [MetricValue; 3],
) -> Result<TrustReport, SimError> {
    let mut all = logs.metrics.clone();
    for m in config {
        all.insert(m.name, m);
    }
    let metrics = MetricName::ALL
        .iter()
        .filter_map(|m| all.remove(m))
        .collect();
    TrustReport::assemble(
        scope,
        RunMeta {
            scenario_id: cfg.scenario_id.clone(),
            seed: cfg.seed,
            tick_span: logs.tick_span,
        },
        metrics,
        &cfg.report.composite,
    )
    .map_err(|e| SimError::Report(e.to_string()))
}

pub fn audit_params(cfg: &ScenarioConfig) -> AuditParams {
    AuditParams {
        ece_bins: cfg.report.ece_bins,
        stability_windows: cfg.report.stability_windows,
        stability_tolerances: cfg.report.stability_tolerances.clone(),
    }
}

/// Builds the per-sub-domain and platform reports from trails plus the
/// configuration.
pub fn build_reports(
    cfg: &ScenarioConfig,
    trails: &BTreeMap<String, Vec<EvidenceTrail>>,
) -> Result<RunReports, SimError> {
    let params = audit_params(cfg);
    let empty = Vec::new();
    let mut sub_reports = BTreeMap::new();
    let mut sub_abs = BTreeMap::new();
    let mut assessments = Vec::new();
    let mut groups: Vec<(&str, &[EvidenceTrail])> = Vec::new();
    for s in &cfg.sub_domains {
        let ts = trails.get(&s.label).unwrap_or(&empty);
        groups.push((s.label.as_str(), ts.as_slice()));
        let logs = log_metrics(&[(s.label.as_str(), ts.as_slice())], &params)
            .map_err(|e| SimError::Report(e.to_string()))?;
        let a = assess_config(cfg, s);
        sub_reports.insert(s.label.clone(), assemble(&s.label, cfg, &logs, config_metrics(&[&a]))?);
        sub_abs.insert(s.label.clone(), logs.absorption);
        assessments.push(a);
    }
    let logs = log_metrics(&groups, &params).map_err(|e| SimError::Report(e.to_string()))?;
    let refs: Vec<&ConfigAssessment> = assessments.iter().collect();
    let platform = assemble("platform", cfg, &logs, config_metrics(&refs))?;
    Ok(RunReports {
        scenario_id: cfg.scenario_id.clone(),
        seed: cfg.seed,
        platform,
        sub_domains: sub_reports,
        absorption: logs.absorption,
        sub_domain_absorption: sub_abs,
    })
}
