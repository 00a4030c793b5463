//! Task generation from declarative distributions.

use std::collections::BTreeMap;

use rand::Rng;
use serde_json::json;

use crate::rng::{stream, steps, StreamRng};
use crate::sim::config::{FeatureDist, SubDomainConfig, TaskTypeGenerator};
use crate::types::{ContextItem, FeatureValue, RiskClass, TaskInstance, Tick};

/// Picks a key with probability proportional to its weight. Keys with
/// nonpositive weight are never chosen; the last positive key absorbs
/// rounding.
pub fn pick_weighted<'a, K>(items: impl IntoIterator<Item = (&'a K, f64)>, u: f64) -> Option<&'a K>
where
    K: 'a + ?Sized,
{
    let items: Vec<(&K, f64)> = items.into_iter().filter(|(_, w)| *w > 0.0).collect();
    let total: f64 = items.iter().map(|(_, w)| w).sum();
    if items.is_empty() || total <= 0.0 {
        return None;
    }
    let mut target = u * total;
    for (k, w) in &items {
        if target < *w {
            return Some(*k);
        }
        target -= w;
    }
    items.last().map(|(k, _)| *k)
}

fn sample_feature(dist: &FeatureDist, rng: &mut StreamRng) -> FeatureValue {
    match dist {
        FeatureDist::Uniform { low, high } => {
            let u: f64 = rng.random();
            FeatureValue::Num(low + (high - low) * u)
        }
        FeatureDist::Categorical(w) => {
            let u: f64 = rng.random();
            let k = pick_weighted(w.iter().map(|(k, w)| (k, *w)), u)
                .cloned()
                .unwrap_or_default();
            FeatureValue::Cat(k)
        }
    }
}

/// Generates one task. Draw order: task type, label, risk, features in
/// name order, context item count, then per item its age, value and
/// relevance. `forced_type` skips the task-type draw's outcome but still
/// consumes it, so streams stay aligned.
pub fn generate_task(
    seed: u64,
    sub: &SubDomainConfig,
    task_id: &str,
    created_at: Tick,
    forced_type: Option<&str>,
) -> TaskInstance {
    let mut rng = stream(seed, task_id, steps::GENERATE);
    let u_type: f64 = rng.random();
    let gen: &TaskTypeGenerator = match forced_type {
        Some(t) => sub.generator(t).expect("validated task type"),
        None => pick_weighted(sub.task_generator.iter().map(|g| (g, g.weight)), u_type)
            .expect("validated generator weights"),
    };

    let label = pick_weighted(gen.labels.iter().map(|(k, w)| (k, *w)), rng.random())
        .expect("validated label weights")
        .clone();
    let risk_weights = gen.label_risk.get(&label).unwrap_or(&gen.risk);
    let risk = *pick_weighted(risk_weights.iter().map(|(k, w)| (k, *w)), rng.random())
        .unwrap_or(&RiskClass::Low);

    let mut dists: BTreeMap<&String, &FeatureDist> = gen.features.iter().collect();
    if let Some(over) = gen.label_features.get(&label) {
        dists.extend(over.iter());
    }
    let features = dists
        .into_iter()
        .map(|(name, d)| (name.clone(), sample_feature(d, &mut rng)))
        .collect();

    let c = &gen.context;
    let n_items = if c.max_items > c.min_items {
        rng.random_range(c.min_items..=c.max_items)
    } else {
        c.min_items
    };
    let context_items = (0..n_items)
        .map(|j| {
            let age = if c.max_age > 0 {
                rng.random_range(0..=c.max_age)
            } else {
                0
            };
            let value: f64 = rng.random();
            let relevant = rng.random::<f64>() < c.relevant_probability;
            ContextItem {
                key: format!("ctx{j}"),
                value: json!(value),
                stamped_at: created_at.saturating_sub(age),
                relevant: Some(relevant),
            }
        })
        .collect();

    TaskInstance {
        task_id: task_id.to_string(),
        task_type: gen.task_type.clone(),
        features,
        ground_truth: Some(label),
        risk_class: risk,
        context_items,
        created_at,
        sub_domain: sub.label.clone(),
    }
}

pub fn stream_task_id(label: &str, index: usize) -> String {
    format!("{label}-{index:06}")
}

pub fn pipeline_task_id(pipeline_id: &str, instance: usize, stage: usize) -> String {
    format!("{pipeline_id}-{instance:06}-s{stage}")
}

/// The freshest `k` items (ties broken by key).
pub fn freshest(items: &[ContextItem], k: usize) -> Vec<ContextItem> {
    let mut v = items.to_vec();
    v.sort_by(|a, b| b.stamped_at.cmp(&a.stamped_at).then_with(|| a.key.cmp(&b.key)));
    v.truncate(k);
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weighted_pick_follows_weights() {
        let w = BTreeMap::from([("a".to_string(), 1.0), ("b".to_string(), 3.0), ("z".to_string(), 0.0)]);
        let pick = |u| pick_weighted(w.iter().map(|(k, v)| (k, *v)), u).unwrap().as_str();
        assert_eq!(pick(0.0), "a");
        assert_eq!(pick(0.2499), "a");
        assert_eq!(pick(0.25), "b");
        assert_eq!(pick(0.999_999), "b");
        let none: BTreeMap<String, f64> = BTreeMap::new();
        assert!(pick_weighted(none.iter().map(|(k, v)| (k, *v)), 0.5).is_none());
    }

    #[test]
    fn freshest_orders_by_stamp_then_key() {
        let it = |k: &str, t| ContextItem {
            key: k.into(),
            value: json!(0),
            stamped_at: t,
            relevant: None,
        };
        let items = [it("b", 5), it("a", 5), it("c", 9), it("d", 1)];
        let keys: Vec<_> = freshest(&items, 3).into_iter().map(|i| i.key).collect();
        assert_eq!(keys, ["c", "a", "b"]);
    }

    #[test]
    fn ids_are_zero_padded() {
        assert_eq!(stream_task_id("clinical", 7), "clinical-000007");
        assert_eq!(pipeline_task_id("procurement", 3, 2), "procurement-000003-s2");
    }
}
