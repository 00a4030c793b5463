//! Append-only, hash-chained evidence trails.
//!
//! Every rule firing, invocation, policy decision, escalation, adjudication
//! and finalization for a task is recorded as an [`EvidenceRecord`]. Each
//! record commits to its predecessor through `prev_hash`, so any edit,
//! insertion or deletion breaks the chain.
//!
//! Digests are SHA-256 over a canonical JSON rendering of
//! `{actor, event_kind, payload, prev_hash, seq}`: object keys sorted,
//! UTF-8, no insignificant whitespace. Logs persist as JSON Lines in exactly
//! that canonical form, which makes every line byte-reproducible.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Hex digest used as `prev_hash` of the first record in every trail.
pub const ZERO_DIGEST: &str = "0000000000000000000000000000000000000000000000000000000000000000";

#[derive(Debug, Error)]
pub enum EvidenceError {
    #[error("evidence chain corrupt at seq {seq}: {detail}")]
    ChainCorrupt { seq: u64, detail: String },
    #[error("event kind `{0}` is not covered by the completeness schema")]
    UnknownEventKind(EventKind),
    #[error("line {line}: {detail}")]
    Malformed { line: usize, detail: String },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    RuleFired,
    Invocation,
    PolicyDecision,
    Escalation,
    Adjudication,
    Finalization,
    AutonomyChange,
}

impl EventKind {
    pub const ALL: [EventKind; 7] = [
        EventKind::RuleFired,
        EventKind::Invocation,
        EventKind::PolicyDecision,
        EventKind::Escalation,
        EventKind::Adjudication,
        EventKind::Finalization,
        EventKind::AutonomyChange,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::RuleFired => "rule_fired",
            EventKind::Invocation => "invocation",
            EventKind::PolicyDecision => "policy_decision",
            EventKind::Escalation => "escalation",
            EventKind::Adjudication => "adjudication",
            EventKind::Finalization => "finalization",
            EventKind::AutonomyChange => "autonomy_change",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceRecord {
    pub seq: u64,
    pub actor: String,
    pub event_kind: EventKind,
    pub payload: Map<String, Value>,
    pub prev_hash: String,
    pub this_hash: String,
}

impl EvidenceRecord {
    /// Digest this record should carry given its other fields.
    pub fn compute_hash(&self) -> String {
        record_digest(
            self.seq,
            &self.actor,
            self.event_kind,
            &self.payload,
            &self.prev_hash,
        )
    }

    /// Canonical JSON line (without trailing newline).
    pub fn to_canonical_line(&self) -> String {
        let v = serde_json::json!({
            "seq": self.seq,
            "actor": self.actor,
            "event_kind": self.event_kind.as_str(),
            "payload": Value::Object(self.payload.clone()),
            "prev_hash": self.prev_hash,
            "this_hash": self.this_hash,
        });
        canonical_json(&v)
    }

    pub fn str_field(&self, key: &str) -> Option<&str> {
        self.payload.get(key).and_then(Value::as_str)
    }

    pub fn f64_field(&self, key: &str) -> Option<f64> {
        self.payload.get(key).and_then(Value::as_f64)
    }

    pub fn bool_field(&self, key: &str) -> Option<bool> {
        self.payload.get(key).and_then(Value::as_bool)
    }
}

fn record_digest(
    seq: u64,
    actor: &str,
    kind: EventKind,
    payload: &Map<String, Value>,
    prev_hash: &str,
) -> String {
    let v = serde_json::json!({
        "seq": seq,
        "actor": actor,
        "event_kind": kind.as_str(),
        "payload": Value::Object(payload.clone()),
        "prev_hash": prev_hash,
    });
    hex::encode(Sha256::digest(canonical_json(&v).as_bytes()))
}

/// Sorted-key, whitespace-free JSON rendering.
///
/// Sorting is done here rather than relying on the map type, so the output
/// does not depend on how `serde_json` was compiled.
pub fn canonical_json(v: &Value) -> String {
    let mut out = String::new();
    write_canonical(v, &mut out);
    out
}

fn write_canonical(v: &Value, out: &mut String) {
    match v {
        Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(k.clone()).to_string());
                out.push(':');
                write_canonical(&m[k], out);
            }
            out.push('}');
        }
        Value::Array(a) => {
            out.push('[');
            for (i, x) in a.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(x, out);
            }
            out.push(']');
        }
        other => out.push_str(&other.to_string()),
    }
}

/// The evidence trail of a single task (or of a governance stream).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvidenceTrail {
    pub task_id: String,
    pub records: Vec<EvidenceRecord>,
}

impl EvidenceTrail {
    pub fn new(task_id: impl Into<String>) -> Self {
        EvidenceTrail {
            task_id: task_id.into(),
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last_hash(&self) -> &str {
        self.records
            .last()
            .map(|r| r.this_hash.as_str())
            .unwrap_or(ZERO_DIGEST)
    }

    /// Appends one record. The existing chain is re-verified first; on any
    /// failure the trail is left untouched.
    pub fn append(
        &mut self,
        actor: impl Into<String>,
        event_kind: EventKind,
        payload: Map<String, Value>,
    ) -> Result<&EvidenceRecord, EvidenceError> {
        check_chain(&self.records)?;
        let seq = self.records.len() as u64;
        let prev_hash = self.last_hash().to_string();
        let actor = actor.into();
        let this_hash = record_digest(seq, &actor, event_kind, &payload, &prev_hash);
        self.records.push(EvidenceRecord {
            seq,
            actor,
            event_kind,
            payload,
            prev_hash,
            this_hash,
        });
        Ok(self.records.last().expect("just pushed"))
    }

    /// Value-semantics variant of [`EvidenceTrail::append`].
    pub fn appended(
        &self,
        actor: impl Into<String>,
        event_kind: EventKind,
        payload: Map<String, Value>,
    ) -> Result<EvidenceTrail, EvidenceError> {
        let mut next = self.clone();
        next.append(actor, event_kind, payload)?;
        Ok(next)
    }

    pub fn verify(&self) -> bool {
        verify_trail(self)
    }

    pub fn records_of(&self, kind: EventKind) -> impl Iterator<Item = &EvidenceRecord> {
        self.records.iter().filter(move |r| r.event_kind == kind)
    }
}

fn check_chain(records: &[EvidenceRecord]) -> Result<(), EvidenceError> {
    let mut prev = ZERO_DIGEST;
    for (i, r) in records.iter().enumerate() {
        if r.seq != i as u64 {
            return Err(EvidenceError::ChainCorrupt {
                seq: r.seq,
                detail: format!("expected seq {i}"),
            });
        }
        if r.prev_hash != prev {
            return Err(EvidenceError::ChainCorrupt {
                seq: r.seq,
                detail: "prev_hash does not match predecessor".into(),
            });
        }
        if r.compute_hash() != r.this_hash {
            return Err(EvidenceError::ChainCorrupt {
                seq: r.seq,
                detail: "this_hash does not match record contents".into(),
            });
        }
        prev = &r.this_hash;
    }
    Ok(())
}

/// True iff the hash chain verifies end-to-end and `seq` is gapless from 0.
pub fn verify_trail(trail: &EvidenceTrail) -> bool {
    check_chain(&trail.records).is_ok()
}

/// Required payload fields per event kind.
pub type CompletenessSchema = BTreeMap<EventKind, Vec<String>>;

pub fn default_schema() -> CompletenessSchema {
    let fields = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    BTreeMap::from([
        (
            EventKind::RuleFired,
            fields(&["rule_id", "rule_version", "outcome"]),
        ),
        (
            EventKind::Invocation,
            fields(&[
                "component_id",
                "component_class",
                "decision",
                "confidence",
                "cost",
            ]),
        ),
        (
            EventKind::PolicyDecision,
            fields(&["decision_kind", "reason"]),
        ),
        (
            EventKind::Escalation,
            fields(&["trigger", "risk_class", "confidence"]),
        ),
        // overridden_decision is optional
        (EventKind::Adjudication, fields(&["outcome"])),
        (
            EventKind::Finalization,
            fields(&["decision", "confidence", "total_cost"]),
        ),
        (
            EventKind::AutonomyChange,
            fields(&["task_type", "old_level", "new_level", "justification"]),
        ),
    ])
}

fn non_empty(v: &Value) -> bool {
    match v {
        Value::Null => false,
        Value::String(s) => !s.is_empty(),
        Value::Array(a) => !a.is_empty(),
        Value::Object(m) => !m.is_empty(),
        _ => true,
    }
}

pub fn record_is_complete(
    record: &EvidenceRecord,
    schema: &CompletenessSchema,
) -> Result<bool, EvidenceError> {
    let required = schema
        .get(&record.event_kind)
        .ok_or(EvidenceError::UnknownEventKind(record.event_kind))?;
    Ok(required
        .iter()
        .all(|f| record.payload.get(f).is_some_and(non_empty)))
}

/// Fraction of records whose required fields are all present and non-empty.
/// An empty trail is vacuously complete.
pub fn trail_completeness(
    trail: &EvidenceTrail,
    schema: &CompletenessSchema,
) -> Result<f64, EvidenceError> {
    if trail.records.is_empty() {
        return Ok(1.0);
    }
    let mut complete = 0usize;
    for r in &trail.records {
        if record_is_complete(r, schema)? {
            complete += 1;
        }
    }
    Ok(complete as f64 / trail.records.len() as f64)
}

/// Writes trails as JSON Lines, one canonical record per line.
pub fn write_jsonl<'a, W: Write>(
    mut w: W,
    trails: impl IntoIterator<Item = &'a EvidenceTrail>,
) -> std::io::Result<()> {
    for t in trails {
        for r in &t.records {
            w.write_all(r.to_canonical_line().as_bytes())?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Parses a JSON Lines log back into trails. A new trail starts at every
/// record with `seq == 0`; the trail's task id is taken from the first
/// record's `task_id` payload field.
///
/// Lines must be in canonical form. Chain integrity is not checked here.
pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<EvidenceTrail>, EvidenceError> {
    let mut trails: Vec<EvidenceTrail> = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let rec: EvidenceRecord =
            serde_json::from_str(&line).map_err(|e| EvidenceError::Malformed {
                line: lineno,
                detail: e.to_string(),
            })?;
        if rec.to_canonical_line() != line {
            return Err(EvidenceError::Malformed {
                line: lineno,
                detail: "record is not in canonical form".into(),
            });
        }
        if rec.seq == 0 || trails.is_empty() {
            let task_id = rec.str_field("task_id").unwrap_or_default().to_string();
            trails.push(EvidenceTrail::new(task_id));
        }
        trails.last_mut().expect("non-empty").records.push(rec);
    }
    Ok(trails)
}
