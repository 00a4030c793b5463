use std::collections::BTreeMap;

use trustlayer::evidence::{verify_trail, write_jsonl, EventKind};
use trustlayer::metrics::MetricName;
use trustlayer::sim::{error_absorption, load_preset, run_scenario, RunResult, ScenarioConfig};

fn small(name: &str, n: usize) -> ScenarioConfig {
    let mut cfg = load_preset(name).unwrap();
    cfg.n_tasks = n;
    for p in &mut cfg.pipelines {
        p.instances = p.instances.min(20);
    }
    cfg
}

fn evidence_bytes(r: &RunResult) -> BTreeMap<String, Vec<u8>> {
    r.trails
        .iter()
        .map(|(k, ts)| {
            let mut buf = Vec::new();
            write_jsonl(&mut buf, ts).unwrap();
            (k.clone(), buf)
        })
        .collect()
}

#[test]
fn worker_count_does_not_change_output() {
    for name in ["clinical", "industrial", "judicial"] {
        let cfg = small(name, 300);
        let a = run_scenario(&cfg, 1).unwrap();
        let b = run_scenario(&cfg, 4).unwrap();
        assert_eq!(evidence_bytes(&a), evidence_bytes(&b), "{name}");
        assert_eq!(a.reports, b.reports, "{name}");
        assert_eq!(a.tasks, b.tasks, "{name}");
    }
}

#[test]
fn every_trail_verifies_and_tasks_are_conserved() {
    let cfg = small("industrial", 200);
    let r = run_scenario(&cfg, 2).unwrap();
    let pipeline_tasks: usize = cfg.pipelines.iter().map(|p| p.instances * p.stages.len()).sum();
    assert_eq!(r.tasks.len(), 200 * cfg.sub_domains.len() + pipeline_tasks);
    let mut finalized = 0;
    for ts in r.trails.values() {
        for t in ts {
            assert!(verify_trail(t), "{}", t.task_id);
            finalized += t
                .records
                .iter()
                .filter(|x| x.event_kind == EventKind::Finalization)
                .count();
        }
    }
    assert_eq!(finalized, r.tasks.len());
}

#[test]
fn log_derived_absorption_matches_run_summaries() {
    for name in ["clinical", "industrial", "judicial"] {
        let r = run_scenario(&small(name, 500), 2).unwrap();
        assert_eq!(r.reports.absorption.error_absorption, error_absorption(&r).unwrap(), "{name}");
    }
}

#[test]
fn review_burden_matches_escalation_count() {
    let r = run_scenario(&small("clinical", 800), 2).unwrap();
    let escalated = r.tasks.iter().filter(|t| t.escalation.is_some()).count();
    let rbi = r.reports.platform.get(MetricName::ReviewBurdenIndex).unwrap();
    assert_eq!(rbi.value, escalated as f64 / r.tasks.len() as f64);
}

#[test]
fn zero_tasks_still_yield_full_reports() {
    let mut cfg = small("clinical", 0);
    cfg.pipelines.clear();
    let r = run_scenario(&cfg, 1).unwrap();
    assert!(r.tasks.is_empty());
    assert_eq!(r.reports.platform.metrics.len(), 17);
}

#[test]
fn pipeline_stages_are_causal() {
    let r = run_scenario(&small("industrial", 10), 4).unwrap();
    let by_id: BTreeMap<&str, _> = r.tasks.iter().map(|t| (t.task_id.as_str(), t)).collect();
    let mut checked = 0;
    for t in &r.tasks {
        let Some((stem, k)) = t.task_id.rsplit_once("-s") else { continue };
        let Ok(k) = k.parse::<usize>() else { continue };
        if k == 0 {
            continue;
        }
        let prev = by_id[format!("{stem}-s{}", k - 1).as_str()];
        assert!(t.created_at > prev.finalized_at, "{}", t.task_id);
        checked += 1;
    }
    assert!(checked > 0);
}

#[test]
fn removing_a_sub_domain_leaves_the_others_unchanged() {
    let mut cfg = small("industrial", 300);
    cfg.pipelines.clear();
    let full = run_scenario(&cfg, 2).unwrap();
    let mut reduced_cfg = cfg.clone();
    reduced_cfg.sub_domains.retain(|s| s.label != "operations");
    let reduced = run_scenario(&reduced_cfg, 2).unwrap();
    for label in ["technology", "administrative"] {
        let pick = |r: &RunResult| -> Vec<_> {
            r.tasks.iter().filter(|t| t.sub_domain == label).cloned().collect()
        };
        assert_eq!(pick(&full), pick(&reduced), "{label}");
        assert_eq!(full.trails[label], reduced.trails[label], "{label}");
        assert_eq!(full.reports.sub_domains[label], reduced.reports.sub_domains[label], "{label}");
    }
}

#[test]
fn seed_changes_outcomes() {
    let a = run_scenario(&small("clinical", 200), 1).unwrap();
    let mut cfg = small("clinical", 200);
    cfg.seed += 1;
    let b = run_scenario(&cfg, 1).unwrap();
    assert_ne!(evidence_bytes(&a), evidence_bytes(&b));
}
