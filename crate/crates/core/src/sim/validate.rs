//! Scenario validation: structural checks against the published JSON
//! Schema, then cross-reference checks that a schema cannot express. Every
//! violation carries the JSON path of the offending value.

use std::collections::BTreeSet;
use std::fmt;

use serde_json::Value;
use thiserror::Error;

use crate::inventory::{ComponentClass, DecisionMode};
use crate::metrics::MetricName;
use crate::rules::RuleAction;
use crate::sim::config::{FeatureDist, ScenarioConfig, SubDomainConfig};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("config is not valid JSON: {0}")]
    Syntax(String),
    #[error("config invalid:\n{}", .0.iter().map(|v| format!("  {v}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<Violation>),
}

impl ConfigError {
    pub fn violations(&self) -> &[Violation] {
        match self {
            ConfigError::Invalid(v) => v,
            ConfigError::Syntax(_) => &[],
        }
    }
}

/// The JSON Schema for [`ScenarioConfig`].
pub fn scenario_schema() -> Value {
    serde_json::to_value(schemars::schema_for!(ScenarioConfig)).expect("schema serializes")
}

/// `/sub_domains/0/label` becomes `$.sub_domains[0].label`.
pub fn pointer_to_path(pointer: &str) -> String {
    let mut out = String::from("$");
    for seg in pointer.split('/').skip(1) {
        let seg = seg.replace("~1", "/").replace("~0", "~");
        if !seg.is_empty() && seg.bytes().all(|b| b.is_ascii_digit()) {
            out.push_str(&format!("[{seg}]"));
        } else {
            out.push('.');
            out.push_str(&seg);
        }
    }
    out
}

/// Parses and validates a scenario document.
pub fn validate_str(text: &str) -> Result<ScenarioConfig, ConfigError> {
    let v: Value = serde_json::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
    validate_value(&v)
}

pub fn validate_value(v: &Value) -> Result<ScenarioConfig, ConfigError> {
    let schema = scenario_schema();
    let validator = jsonschema::validator_for(&schema).expect("generated schema compiles");
    let mut violations: Vec<Violation> = validator
        .iter_errors(v)
        .map(|e| Violation {
            path: pointer_to_path(e.instance_path.as_str()),
            message: e.to_string(),
        })
        .collect();
    if !violations.is_empty() {
        violations.sort_by(|a, b| a.path.cmp(&b.path).then_with(|| a.message.cmp(&b.message)));
        violations.dedup();
        return Err(ConfigError::Invalid(violations));
    }
    let cfg: ScenarioConfig = serde_json::from_value(v.clone()).map_err(|e| {
        ConfigError::Invalid(vec![Violation {
            path: "$".into(),
            message: e.to_string(),
        }])
    })?;
    check_semantics(&cfg)?;
    Ok(cfg)
}

struct Checker {
    out: Vec<Violation>,
}

impl Checker {
    fn fail(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.out.push(Violation {
            path: path.into(),
            message: message.into(),
        });
    }

    fn check(&mut self, ok: bool, path: impl Into<String>, message: impl Into<String>) {
        if !ok {
            self.fail(path, message);
        }
    }
}

fn is_identifier(s: &str) -> bool {
    !s.is_empty()
        && s.bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-' || b == b'.')
}

fn positive_total<'a>(ws: impl IntoIterator<Item = &'a f64>) -> bool {
    let mut total = 0.0;
    for w in ws {
        if *w < 0.0 || !w.is_finite() {
            return false;
        }
        total += w;
    }
    total > 0.0
}

fn check_sub_domain(c: &mut Checker, s: &SubDomainConfig, at: &str) {
    let mut types = BTreeSet::new();
    for (gi, g) in s.task_generator.iter().enumerate() {
        let gp = format!("{at}.task_generator[{gi}]");
        c.check(types.insert(g.task_type.as_str()), format!("{gp}.task_type"), "duplicate task type");
        let alphabet: BTreeSet<&str> = g.alphabet.iter().map(String::as_str).collect();
        c.check(alphabet.len() == g.alphabet.len(), format!("{gp}.alphabet"), "duplicate label");
        c.check(positive_total(g.labels.values()), format!("{gp}.labels"), "weights must be nonnegative with a positive total");
        for l in g.labels.keys() {
            c.check(alphabet.contains(l.as_str()), format!("{gp}.labels.{l}"), "label not in alphabet");
        }
        c.check(positive_total(g.risk.values()), format!("{gp}.risk"), "weights must be nonnegative with a positive total");
        for (l, w) in &g.label_risk {
            c.check(alphabet.contains(l.as_str()), format!("{gp}.label_risk.{l}"), "label not in alphabet");
            c.check(positive_total(w.values()), format!("{gp}.label_risk.{l}"), "weights must be nonnegative with a positive total");
        }
        let mut dists: Vec<(String, &FeatureDist)> = g
            .features
            .iter()
            .map(|(k, d)| (format!("{gp}.features.{k}"), d))
            .collect();
        for (l, fs) in &g.label_features {
            c.check(alphabet.contains(l.as_str()), format!("{gp}.label_features.{l}"), "label not in alphabet");
            dists.extend(fs.iter().map(|(k, d)| (format!("{gp}.label_features.{l}.{k}"), d)));
        }
        for (p, d) in dists {
            match d {
                FeatureDist::Uniform { low, high } => {
                    c.check(low <= high && low.is_finite() && high.is_finite(), p, "uniform range needs finite low <= high")
                }
                FeatureDist::Categorical(w) => c.check(positive_total(w.values()), p, "weights must be nonnegative with a positive total"),
            }
        }
        c.check(
            g.context.max_items >= g.context.min_items,
            format!("{gp}.context.max_items"),
            "max_items is below min_items",
        );
        c.check(s.plan(&g.task_type).is_some(), format!("{gp}.task_type"), format!("no plan for task type `{}`", g.task_type));
    }
    c.check(
        positive_total(s.task_generator.iter().map(|g| &g.weight)),
        format!("{at}.task_generator"),
        "task type weights must be nonnegative with a positive total",
    );

    let mut ids = BTreeSet::new();
    for (ci, comp) in s.components.iter().enumerate() {
        let cp = format!("{at}.components[{ci}]");
        c.check(is_identifier(&comp.component_id), format!("{cp}.component_id"), "must be a nonempty identifier");
        c.check(ids.insert(comp.component_id.as_str()), format!("{cp}.component_id"), "duplicate component id");
        c.check(comp.cost_per_invocation.is_valid(), format!("{cp}.cost_per_invocation"), "costs must be finite and nonnegative");
        c.check(
            comp.component_class == ComponentClass::L2b || comp.sim.hallucination_rate == 0.0,
            format!("{cp}.sim.hallucination_rate"),
            "only L2b components hallucinate",
        );
        for t in &comp.supported_task_types {
            let Some(g) = s.generator(t) else {
                c.fail(format!("{cp}.supported_task_types"), format!("unknown task type `{t}`"));
                continue;
            };
            if let DecisionMode::Threshold { at_or_above, below, .. } = &comp.sim.decision_mode {
                for l in [at_or_above, below] {
                    c.check(g.alphabet.contains(l), format!("{cp}.sim.decision_mode"), format!("label `{l}` not in the alphabet of `{t}`"));
                }
            }
        }
    }

    let mut planned = BTreeSet::new();
    for (pi, p) in s.plans.iter().enumerate() {
        let pp = format!("{at}.plans[{pi}]");
        c.check(planned.insert(p.task_type.as_str()), format!("{pp}.task_type"), "duplicate plan");
        let gen = s.generator(&p.task_type);
        c.check(gen.is_some(), format!("{pp}.task_type"), format!("unknown task type `{}`", p.task_type));
        for (si, step) in p.steps.iter().enumerate() {
            match s.component(step) {
                None => c.fail(format!("{pp}.steps[{si}]"), format!("unknown component `{step}`")),
                Some(comp) => c.check(
                    comp.supports(&p.task_type),
                    format!("{pp}.steps[{si}]"),
                    format!("component `{step}` does not support `{}`", p.task_type),
                ),
            }
        }
        for (k, v) in &p.l1_decisions {
            c.check(k == "allow" || k == "deny", format!("{pp}.l1_decisions.{k}"), "key must be `allow` or `deny`");
            if let Some(g) = gen {
                c.check(g.alphabet.contains(v), format!("{pp}.l1_decisions.{k}"), format!("label `{v}` not in alphabet"));
            }
        }
    }

    if let Err(e) = s.ruleset.validate() {
        c.fail(format!("{at}.ruleset"), e.to_string());
    }
    for (ri, r) in s.ruleset.rules.iter().enumerate() {
        if let RuleAction::Route(target) = &r.action {
            c.check(s.component(target).is_some(), format!("{at}.ruleset.rules[{ri}].action"), format!("unknown component `{target}`"));
        }
    }

    let t = &s.trigger;
    c.check((0.0..=1.0).contains(&t.confidence_threshold), format!("{at}.trigger.confidence_threshold"), "must be in [0, 1]");
    c.check((0.0..=1.0).contains(&t.inconsistency_threshold), format!("{at}.trigger.inconsistency_threshold"), "must be in [0, 1]");
    c.check((0.0..=1.0).contains(&s.adjudicator.competence), format!("{at}.adjudicator.competence"), "must be in [0, 1]");
    c.check(s.adjudicator.review_cost.is_valid(), format!("{at}.adjudicator.review_cost"), "costs must be finite and nonnegative");
    c.check(s.context.freshness_horizon >= 1, format!("{at}.context.freshness_horizon"), "must be at least 1");
    c.check(s.autonomy.thresholds.window >= 1, format!("{at}.autonomy.thresholds.window"), "must be at least 1");
    for k in s.autonomy.initial.keys() {
        c.check(s.generator(k).is_some(), format!("{at}.autonomy.initial.{k}"), "unknown task type");
    }
    if let Some(pc) = &s.parsimony {
        c.check(s.generator(&pc.task_type).is_some(), format!("{at}.parsimony.task_type"), "unknown task type");
        match s.component(&pc.deployed) {
            None => c.fail(format!("{at}.parsimony.deployed"), "unknown component"),
            Some(comp) => c.check(comp.supports(&pc.task_type), format!("{at}.parsimony.deployed"), "component does not support the task type"),
        }
    }
}

/// Cross-reference checks on a deserialized config.
pub fn check_semantics(cfg: &ScenarioConfig) -> Result<(), ConfigError> {
    let mut c = Checker { out: Vec::new() };
    c.check(is_identifier(&cfg.scenario_id), "$.scenario_id", "must be a nonempty identifier");
    c.check(!cfg.sub_domains.is_empty(), "$.sub_domains", "at least one sub-domain is required");
    let mut labels = BTreeSet::new();
    for (i, s) in cfg.sub_domains.iter().enumerate() {
        let at = format!("$.sub_domains[{i}]");
        c.check(is_identifier(&s.label), format!("{at}.label"), "must be a nonempty identifier");
        c.check(labels.insert(s.label.as_str()), format!("{at}.label"), "duplicate sub-domain label");
        check_sub_domain(&mut c, s, &at);
    }
    let mut pids = BTreeSet::new();
    for (i, p) in cfg.pipelines.iter().enumerate() {
        let at = format!("$.pipelines[{i}]");
        c.check(is_identifier(&p.pipeline_id), format!("{at}.pipeline_id"), "must be a nonempty identifier");
        c.check(pids.insert(p.pipeline_id.as_str()), format!("{at}.pipeline_id"), "duplicate pipeline id");
        c.check(p.stages.len() >= 2, format!("{at}.stages"), "a pipeline needs at least two stages");
        for (k, st) in p.stages.iter().enumerate() {
            match cfg.sub_domain(&st.sub_domain) {
                None => c.fail(format!("{at}.stages[{k}].sub_domain"), format!("unknown sub-domain `{}`", st.sub_domain)),
                Some(s) => c.check(
                    s.generator(&st.task_type).is_some(),
                    format!("{at}.stages[{k}].task_type"),
                    format!("sub-domain `{}` has no task type `{}`", st.sub_domain, st.task_type),
                ),
            }
        }
    }
    let r = &cfg.report;
    c.check(r.ece_bins >= 1, "$.report.ece_bins", "must be at least 1");
    c.check(r.stability_windows >= 2, "$.report.stability_windows", "must be at least 2");
    for (m, tau) in &r.stability_tolerances {
        c.check(
            matches!(
                m,
                MetricName::ReviewBurdenIndex
                    | MetricName::CalibrationError
                    | MetricName::OverrideRate
                    | MetricName::EscalationPrecision
            ),
            format!("$.report.stability_tolerances.{m}"),
            "metric cannot be tracked per window",
        );
        c.check(*tau > 0.0 && tau.is_finite(), format!("$.report.stability_tolerances.{m}"), "tolerance must be positive");
    }
    if let Some(w) = &r.composite.weights {
        let sum: f64 = w.values().sum();
        c.check(
            w.values().all(|x| *x >= 0.0) && (sum - 1.0).abs() <= 1e-9,
            "$.report.composite.weights",
            format!("weights must be nonnegative and sum to 1 (sum = {sum})"),
        );
    }
    if c.out.is_empty() {
        Ok(())
    } else {
        Err(ConfigError::Invalid(c.out))
    }
}
