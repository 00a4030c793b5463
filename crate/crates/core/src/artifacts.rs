//! On-disk run artifacts and their verification.
//!
//! A run directory holds:
//!
//! ```text
//! evidence/<sub_domain>.jsonl   hash-chained evidence, one record per line
//! report.json                   platform and per-sub-domain trust reports
//! report.md                     the same reports as tables
//! run_meta.json                 config digest, seed, library version
//! scenario.json                 the exact configuration that ran
//! ```
//!
//! Verification treats `report.json` as a claim: it checks every chain and
//! then recomputes the reports from the evidence and `scenario.json`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::evidence::{canonical_json, read_jsonl, verify_trail, write_jsonl, EventKind, EvidenceTrail};
use crate::metrics::TrustReport;
use crate::sim::config::ScenarioConfig;
use crate::sim::engine::RunResult;
use crate::sim::report::{build_reports, RunReports};
use crate::sim::validate::validate_str;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("missing artifact {0}")]
    Missing(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("scenario.json is invalid: {0}")]
    Config(String),
    #[error("{file}: {detail}")]
    ChainCorrupt { file: String, detail: String },
    #[error("report cannot be recomputed: {0}")]
    Recompute(String),
    #[error("{} report value(s) differ from the evidence", .0.len())]
    Mismatch(Vec<Mismatch>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub scope: String,
    pub field: String,
    pub reported: String,
    pub recomputed: String,
}

impl std::fmt::Display for Mismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {}: reported {} recomputed {}",
            self.scope, self.field, self.reported, self.recomputed
        )
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ArtifactError + '_ {
    move |source| ArtifactError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunMetaFile {
    pub scenario_id: String,
    pub seed: u64,
    pub config_digest: String,
    pub version: String,
}

/// SHA-256 over the canonical JSON of the configuration.
pub fn config_digest(cfg: &ScenarioConfig) -> String {
    let v = serde_json::to_value(cfg).expect("config serializes");
    hex::encode(Sha256::digest(canonical_json(&v).as_bytes()))
}

fn pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializes");
    s.push('\n');
    s
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), ArtifactError> {
    fs::write(path, contents).map_err(io_err(path))
}

/// Writes every artifact of a run under `out`.
pub fn write_run(out: &Path, cfg: &ScenarioConfig, result: &RunResult) -> Result<(), ArtifactError> {
    let ev = out.join("evidence");
    fs::create_dir_all(&ev).map_err(io_err(&ev))?;
    for s in &cfg.sub_domains {
        let path = ev.join(format!("{}.jsonl", s.label));
        let mut buf = Vec::new();
        let trails = result.trails.get(&s.label).map(Vec::as_slice).unwrap_or(&[]);
        write_jsonl(&mut buf, trails).map_err(io_err(&path))?;
        write_file(&path, &buf)?;
    }
    write_file(&out.join("report.json"), pretty(&result.reports).as_bytes())?;
    write_file(&out.join("report.md"), render_markdown(&result.reports).as_bytes())?;
    let meta = RunMetaFile {
        scenario_id: cfg.scenario_id.clone(),
        seed: cfg.seed,
        config_digest: config_digest(cfg),
        version: VERSION.to_string(),
    };
    write_file(&out.join("run_meta.json"), pretty(&meta).as_bytes())?;
    write_file(&out.join("scenario.json"), pretty(cfg).as_bytes())?;
    Ok(())
}

/// Accepts either the run directory or its `evidence/` subdirectory.
pub fn resolve_run_dir(dir: &Path) -> PathBuf {
    if !dir.join("evidence").is_dir() && dir.join("../scenario.json").is_file() {
        return dir.join("..");
    }
    dir.to_path_buf()
}

fn read_text(path: &Path) -> Result<String, ArtifactError> {
    if !path.exists() {
        return Err(ArtifactError::Missing(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(io_err(path))
}

pub fn load_scenario(dir: &Path) -> Result<ScenarioConfig, ArtifactError> {
    let text = read_text(&dir.join("scenario.json"))?;
    validate_str(&text).map_err(|e| ArtifactError::Config(e.to_string()))
}

/// Reads every sub-domain log and checks each chain. Task trails must end
/// in a finalization record, which also catches tail truncation.
pub fn load_evidence(
    dir: &Path,
    cfg: &ScenarioConfig,
) -> Result<BTreeMap<String, Vec<EvidenceTrail>>, ArtifactError> {
    let mut out = BTreeMap::new();
    for s in &cfg.sub_domains {
        let name = format!("{}.jsonl", s.label);
        let path = dir.join("evidence").join(&name);
        if !path.exists() {
            return Err(ArtifactError::Missing(path));
        }
        let f = fs::File::open(&path).map_err(io_err(&path))?;
        let corrupt = |detail: String| ArtifactError::ChainCorrupt {
            file: name.clone(),
            detail,
        };
        let trails = read_jsonl(BufReader::new(f)).map_err(|e| corrupt(e.to_string()))?;
        for t in &trails {
            if !verify_trail(t) {
                return Err(corrupt(format!("trail `{}` fails hash-chain verification", t.task_id)));
            }
            let governance = t.task_id.ends_with("~autonomy");
            let last = t.records.last().map(|r| r.event_kind);
            if !governance && last != Some(EventKind::Finalization) {
                return Err(corrupt(format!("trail `{}` does not end in a finalization", t.task_id)));
            }
            if governance && t.records.iter().any(|r| r.event_kind != EventKind::AutonomyChange) {
                return Err(corrupt(format!("governance trail `{}` holds task events", t.task_id)));
            }
        }
        out.insert(s.label.clone(), trails);
    }
    Ok(out)
}

/// Recomputes the reports of a run directory from its evidence and
/// scenario, after checking every chain.
pub fn recompute(dir: &Path) -> Result<RunReports, ArtifactError> {
    let dir = resolve_run_dir(dir);
    let cfg = load_scenario(&dir)?;
    let trails = load_evidence(&dir, &cfg)?;
    build_reports(&cfg, &trails).map_err(|e| ArtifactError::Recompute(e.to_string()))
}

fn fmt_value(v: Option<&Value>) -> String {
    v.map(|v| v.to_string()).unwrap_or_else(|| "<absent>".into())
}

fn diff_report(scope: &str, reported: &Value, recomputed: &Value, out: &mut Vec<Mismatch>) {
    let metrics = |v: &Value| -> BTreeMap<String, Value> {
        v.get("metrics")
            .and_then(Value::as_array)
            .map(|a| {
                a.iter()
                    .filter_map(|m| Some((m.get("name")?.as_str()?.to_string(), m.clone())))
                    .collect()
            })
            .unwrap_or_default()
    };
    let (a, b) = (metrics(reported), metrics(recomputed));
    let names: std::collections::BTreeSet<&String> = a.keys().chain(b.keys()).collect();
    for n in names {
        let (ra, rb) = (a.get(n), b.get(n));
        for key in ["value", "std_uncertainty", "n"] {
            let (va, vb) = (ra.and_then(|m| m.get(key)), rb.and_then(|m| m.get(key)));
            if va != vb {
                let field = if key == "value" { n.clone() } else { format!("{n}.{key}") };
                out.push(Mismatch {
                    scope: scope.to_string(),
                    field,
                    reported: fmt_value(va),
                    recomputed: fmt_value(vb),
                });
            }
        }
    }
    for key in ["composite_trust_score", "composite_uncertainty", "meta"] {
        let (va, vb) = (reported.get(key), recomputed.get(key));
        if va != vb {
            out.push(Mismatch {
                scope: scope.to_string(),
                field: key.to_string(),
                reported: fmt_value(va),
                recomputed: fmt_value(vb),
            });
        }
    }
}

/// Checks chains, recomputes the reports and compares them with
/// `report.json` value by value.
pub fn verify_run(dir: &Path) -> Result<RunReports, ArtifactError> {
    let dir = resolve_run_dir(dir);
    let recomputed = recompute(&dir)?;
    let text = read_text(&dir.join("report.json"))?;
    let reported: Value = serde_json::from_str(&text).map_err(|e| {
        ArtifactError::Mismatch(vec![Mismatch {
            scope: "report.json".into(),
            field: "<document>".into(),
            reported: e.to_string(),
            recomputed: "valid JSON".into(),
        }])
    })?;
    let ours = serde_json::to_value(&recomputed).expect("reports serialize");
    if reported == ours {
        return Ok(recomputed);
    }
    let mut out = Vec::new();
    diff_report("platform", &reported["platform"], &ours["platform"], &mut out);
    let labels: std::collections::BTreeSet<String> = [&reported, &ours]
        .iter()
        .filter_map(|v| v.get("sub_domains").and_then(Value::as_object))
        .flat_map(|m| m.keys().cloned())
        .collect();
    for l in labels {
        diff_report(&l, &reported["sub_domains"][&l], &ours["sub_domains"][&l], &mut out);
    }
    for key in ["scenario_id", "seed", "absorption", "sub_domain_absorption"] {
        if reported.get(key) != ours.get(key) {
            out.push(Mismatch {
                scope: "run".into(),
                field: key.into(),
                reported: fmt_value(reported.get(key)),
                recomputed: fmt_value(ours.get(key)),
            });
        }
    }
    if out.is_empty() {
        out.push(Mismatch {
            scope: "report.json".into(),
            field: "<document>".into(),
            reported: "differs".into(),
            recomputed: "canonical report".into(),
        });
    }
    Err(ArtifactError::Mismatch(out))
}

pub fn render_json(r: &RunReports) -> String {
    pretty(r)
}

fn render_table(out: &mut String, r: &TrustReport) {
    let _ = writeln!(out, "| metric | layer | value | std. uncertainty | n |");
    let _ = writeln!(out, "|---|---|---|---|---|");
    for m in &r.metrics {
        let note = m.note.as_deref().map(|n| format!(" ({n})")).unwrap_or_default();
        let _ = writeln!(
            out,
            "| {}{} | {} | {:.6} | {:.6} | {} |",
            m.name,
            note,
            m.layer.as_str(),
            m.value,
            m.std_uncertainty,
            m.n
        );
    }
    let _ = writeln!(
        out,
        "\nComposite trust score: {:.6} ± {:.6}\n",
        r.composite_trust_score, r.composite_uncertainty
    );
}

pub fn render_markdown(r: &RunReports) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Trust report: {} (seed {})\n", r.scenario_id, r.seed);
    let p = &r.platform;
    let _ = writeln!(
        out,
        "Ticks {}..{}. Error absorption {:.6} ({} of {} first-pass errors corrected).\n",
        p.meta.tick_span[0],
        p.meta.tick_span[1],
        r.absorption.error_absorption,
        r.absorption.absorbed,
        r.absorption.first_pass_errors
    );
    let _ = writeln!(out, "## Platform\n");
    render_table(&mut out, p);
    for (label, rep) in &r.sub_domains {
        let _ = writeln!(out, "## Sub-domain `{label}`\n");
        render_table(&mut out, rep);
    }
    out
}
