//! Attribution strategies behind a common trait, selected by name.
//!
//! Every method — MUCS, its ablation variants, and all baselines — emits
//! the same [`AttributionResult`] record, so downstream removal, overlap,
//! and ensembling code never cares which strategy produced a score map.

mod baselines;
mod mucs;

pub use baselines::{
    attribute_condition_cosine, attribute_embedding_cosine, attribute_forward_inf,
    attribute_random, ForwardInfConfig,
};
pub use mucs::{MucsMethodConfig, MucsVariant};

use std::collections::BTreeMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, GeneratedItem};
use crate::diffusion::snapshot::ModelSnapshot;
use crate::embed::EmbedderSet;
use crate::error::CoreError;
use crate::nullloss::NullLossEstimate;
use crate::rng::RngKey;
use crate::unlearn::UnlearnTrace;
use crate::Result;

/// Per-instance scores for one generated item under one method.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttributionResult {
    pub method: String,
    pub item_id: String,
    pub scores: BTreeMap<String, f64>,
    pub config_hash: String,
    pub noise_provenance: String,
}

impl AttributionResult {
    /// Check the score map covers exactly the dataset ids.
    pub fn covers(&self, dataset: &Dataset) -> bool {
        self.scores.len() == dataset.len()
            && dataset.instances.iter().all(|i| self.scores.contains_key(&i.id))
    }
}

/// Highest-k ids by score, ties broken by ascending instance id.
pub fn top_k_ids(scores: &BTreeMap<String, f64>, k: usize) -> Vec<String> {
    let mut ranked: Vec<(&String, &f64)> = scores.iter().collect();
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(b.0))
    });
    ranked.into_iter().take(k).map(|(id, _)| id.clone()).collect()
}

/// Everything a strategy may need to score one generated item.
pub struct AttributionContext<'a> {
    pub dataset: &'a Dataset,
    pub item: &'a GeneratedItem,
    pub f1: &'a ModelSnapshot,
    pub l_null: &'a NullLossEstimate,
    /// Nominal pretraining learning rate (unlearning derives its own).
    pub nominal_lr: f64,
    pub embedders: &'a EmbedderSet,
    /// Stream key scoped to (run, repeat, item, method).
    pub method_key: RngKey,
    /// Method-agnostic key scoped to (run, repeat, item): unlearning and
    /// consistent pair sets derive from it so ablation variants share the
    /// identical draws where only one deviation is under study.
    pub shared_key: RngKey,
    /// Shared cache of unlearned models, keyed by unlearn-config hash, so
    /// scoring ablations reuse the same F2 per item.
    pub unlearn_cache: &'a UnlearnCache,
    /// Safety cap policy fed by observed threshold stops.
    pub cap: &'a CapTracker,
}

/// Cache of (item, unlearn-config) -> unlearned snapshot + trace.
#[derive(Default)]
pub struct UnlearnCache {
    inner: Mutex<BTreeMap<String, (ModelSnapshot, UnlearnTrace)>>,
}

impl UnlearnCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_try_insert(
        &self,
        key: &str,
        compute: impl FnOnce() -> Result<(ModelSnapshot, UnlearnTrace)>,
    ) -> Result<(ModelSnapshot, UnlearnTrace)> {
        {
            let guard = self.inner.lock().expect("cache lock");
            if let Some(hit) = guard.get(key) {
                return Ok(hit.clone());
            }
        }
        let value = compute()?;
        let mut guard = self.inner.lock().expect("cache lock");
        Ok(guard.entry(key.to_string()).or_insert(value).clone())
    }

    pub fn traces(&self) -> Vec<(String, UnlearnTrace)> {
        self.inner
            .lock()
            .expect("cache lock")
            .iter()
            .map(|(k, (_, t))| (k.clone(), t.clone()))
            .collect()
    }
}

/// Running record of threshold-stop step counts; the unlearning step cap is
/// 20x their median, with a bootstrap default before any run finished.
#[derive(Default)]
pub struct CapTracker {
    observed: Mutex<Vec<usize>>,
}

impl CapTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_threshold_stop(&self, steps: usize) {
        self.observed.lock().expect("cap lock").push(steps);
    }

    pub fn observed(&self) -> Vec<usize> {
        self.observed.lock().expect("cap lock").clone()
    }

    pub fn current_cap(&self, bootstrap: usize) -> usize {
        let obs = self.observed.lock().expect("cap lock");
        if obs.is_empty() {
            return bootstrap;
        }
        let mut sorted = obs.clone();
        sorted.sort_unstable();
        let median = sorted[sorted.len() / 2];
        (20 * median).max(1)
    }
}

/// A runtime-selectable attribution algorithm.
pub trait AttributionStrategy: Send + Sync {
    fn name(&self) -> &str;
    fn attribute(&self, ctx: &AttributionContext<'_>) -> Result<AttributionResult>;
}

/// Name-keyed registry of attribution strategies.
pub struct MethodRegistry {
    entries: BTreeMap<String, Box<dyn AttributionStrategy>>,
}

impl MethodRegistry {
    pub fn empty() -> Self {
        MethodRegistry {
            entries: BTreeMap::new(),
        }
    }

    /// Register every built-in strategy: baselines, MUCS, and the named
    /// ablation variants from the method configuration.
    pub fn with_defaults(mucs: MucsMethodConfig, fwd: ForwardInfConfig) -> Self {
        let mut reg = Self::empty();
        reg.register(Box::new(baselines::RandomMethod));
        reg.register(Box::new(baselines::ConditionMethod));
        for embedder in ["flat", "rp", "ae"] {
            reg.register(Box::new(baselines::EmbeddingMethod {
                embedder: embedder.to_string(),
            }));
        }
        reg.register(Box::new(baselines::ForwardInfMethod { cfg: fwd }));
        for variant in MucsVariant::all() {
            reg.register(Box::new(mucs::MucsMethod {
                cfg: mucs.clone(),
                variant,
            }));
        }
        reg
    }

    pub fn register(&mut self, strategy: Box<dyn AttributionStrategy>) {
        self.entries.insert(strategy.name().to_string(), strategy);
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn get(&self, name: &str) -> Result<&dyn AttributionStrategy> {
        self.entries
            .get(name)
            .map(|b| b.as_ref())
            .ok_or_else(|| CoreError::UnknownName {
                kind: "attribution method",
                name: name.to_string(),
                known: self.names(),
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_orders_by_score_then_id() {
        let scores: BTreeMap<String, f64> = [
            ("a".to_string(), 1.0),
            ("b".to_string(), 3.0),
            ("c".to_string(), 3.0),
            ("d".to_string(), 2.0),
        ]
        .into_iter()
        .collect();
        assert_eq!(top_k_ids(&scores, 3), vec!["b", "c", "d"]);
    }

    #[test]
    fn cap_tracker_median_rule() {
        let cap = CapTracker::new();
        assert_eq!(cap.current_cap(2000), 2000);
        cap.record_threshold_stop(10);
        assert_eq!(cap.current_cap(2000), 200);
        cap.record_threshold_stop(100);
        cap.record_threshold_stop(30);
        // sorted [10, 30, 100] -> median 30
        assert_eq!(cap.current_cap(2000), 600);
    }
}
