//! Leave-k-out counterfactual evaluation.
//!
//! Per repeat: pretrain, generate m items, attribute with each method,
//! remove the union of per-item top-k instances, retrain from scratch on
//! the reduced set with the same training configuration, regenerate with
//! the same seeds and conditions, and collect paired similarities. The
//! random-removal arm runs identically and serves as the reference
//! distribution for AUC, significance, and normalized differences.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{build_toy_dataset, remove_topk, Dataset, GeneratedItem, RemovalSet, ToySpec};
use crate::diffusion::arch::{ArchConfig, Condition, Conditioning, ImageShape};
use crate::diffusion::loss::{LossConfig, LossVariant};
use crate::diffusion::sampler::generate;
use crate::diffusion::schedule::{build_generation_schedule, GenerationSchedule};
use crate::diffusion::snapshot::ModelSnapshot;
use crate::diffusion::train::{pretrain, TrainConfig};
use crate::embed::{EmbedConfig, EmbedderSet};
use crate::error::CoreError;
use crate::methods::{
    attribute_random, AttributionContext, AttributionResult, CapTracker, ForwardInfConfig,
    MethodRegistry, MucsMethodConfig, UnlearnCache,
};
use crate::nullloss::{estimate_null_loss, NullLossConfig, NullLossEstimate};
use crate::records::hash_json;
use crate::rng::RngKey;
use crate::simil::{builtin_similarity, metric_names};
use crate::stats::{compute_auc, mean_normalized_similarity_difference};
use crate::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub num_steps: usize,
    pub cfg_weight: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub k_fraction: f64,
    /// Number of generated items per repeat (m).
    pub num_items: usize,
    pub repeats: usize,
    pub metrics: Vec<String>,
}

/// The full declarative configuration of the pipeline; every default in
/// the reference configuration file mirrors this.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub data: ToySpec,
    pub arch: ArchConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub generate: GenerateConfig,
    pub null_loss: NullLossConfig,
    pub mucs: MucsMethodConfig,
    pub forward_inf: ForwardInfConfig,
    pub embed: EmbedConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    /// Desk-scale reference configuration.
    pub fn reference() -> Self {
        let train = TrainConfig {
            steps: 1500,
            batch_size: 64,
            lr: 2e-3,
            warmup_steps: 100,
            weight_decay: 0.01,
            ema_momentum: 0.995,
        };
        let mut mucs = MucsMethodConfig::default();
        mucs.adamw_weight_decay = train.weight_decay;
        PipelineConfig {
            data: ToySpec {
                size: 500,
                classes: 10,
                channels: 3,
                height: 16,
                width: 16,
            },
            arch: ArchConfig {
                input_shape: ImageShape {
                    channels: 3,
                    height: 16,
                    width: 16,
                },
                d_model: 128,
                mlp_hidden: 256,
                dec_hidden: 512,
                blocks: 2,
                conditioning: Conditioning::ClassId { num_classes: 10 },
                cond_dropout: 0.1,
            },
            loss: LossConfig {
                variant: LossVariant::Edm,
                p_mean: -1.2,
                p_std: 1.2,
                sigma_data: 0.5,
                weighting: "edm".into(),
            },
            train,
            generate: GenerateConfig {
                num_steps: 32,
                cfg_weight: Some(2.0),
            },
            null_loss: NullLossConfig::default(),
            mucs,
            forward_inf: ForwardInfConfig::default(),
            embed: EmbedConfig::default(),
            eval: EvalConfig {
                k_fraction: 0.02,
                num_items: 8,
                repeats: 3,
                metrics: metric_names(),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.mucs.unlearn.validate()?;
        if self.arch.input_shape != self.data.shape() {
            return Err(CoreError::InvalidConfig(
                "architecture input shape differs from data geometry".into(),
            ));
        }
        if let Conditioning::ClassId { num_classes } = self.arch.conditioning {
            if num_classes != self.data.classes {
                return Err(CoreError::InvalidConfig(
                    "conditioning class count differs from data class count".into(),
                ));
            }
        }
        for m in &self.eval.metrics {
            if !metric_names().contains(m) {
                return Err(CoreError::UnknownName {
                    kind: "similarity metric",
                    name: m.clone(),
                    known: metric_names(),
                });
            }
        }
        Ok(())
    }

    pub fn registry(&self) -> MethodRegistry {
        MethodRegistry::with_defaults(self.mucs.clone(), self.forward_inf)
    }

    pub fn generation_schedule(&self) -> Result<GenerationSchedule> {
        let sp = self.mucs.score.schedule;
        build_generation_schedule(sp.sigma_min, sp.sigma_max, sp.rho, self.generate.num_steps)
    }

    pub fn build_dataset(&self, key: &RngKey) -> Result<Dataset> {
        build_toy_dataset(&self.data, &key.child("data"), self.loss.sigma_data)
    }
}

/// Similarity lists per metric name.
pub type ArmSims = BTreeMap<String, Vec<f64>>;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedConsistencyOutcome {
    /// Same-seed pre/post similarities under heavy random removal.
    pub same_seed: ArmSims,
    /// Different-seed similarities between two full-data generations.
    pub diff_seed: ArmSims,
    pub removal_fraction: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct BenchOutcome {
    /// Reference (random-removal) arm similarities.
    pub s_rand: ArmSims,
    /// Per-method similarities.
    pub per_method: BTreeMap<String, ArmSims>,
    /// Every attribution result produced, per method (items x repeats).
    pub results_by_method: BTreeMap<String, Vec<AttributionResult>>,
    /// Removal sets per (repeat, arm label).
    pub removals: Vec<(usize, String, RemovalSet)>,
    pub seed_consistency: Option<SeedConsistencyOutcome>,
    /// Threshold-stop step counts observed across unlearning runs.
    pub threshold_stop_steps: Vec<usize>,
    pub failed_repeats: Vec<(usize, String)>,
    pub completed_repeats: usize,
    pub null_loss: f64,
}

fn is_divergence(e: &CoreError) -> bool {
    matches!(
        e,
        CoreError::Diverged { .. }
            | CoreError::UnlearnDiverged { .. }
            | CoreError::NonFiniteLoss { .. }
            | CoreError::NonFiniteNullLoss { .. }
    )
}

struct RepeatOutcome {
    s_rand: ArmSims,
    per_method: BTreeMap<String, ArmSims>,
    results_by_method: BTreeMap<String, Vec<AttributionResult>>,
    removals: Vec<(String, RemovalSet)>,
    seed_consistency: Option<(ArmSims, ArmSims)>,
}

/// Evaluation driver over one dataset and configuration.
pub struct EvalRunner<'a> {
    pub dataset: &'a Dataset,
    pub cfg: &'a PipelineConfig,
    pub registry: &'a MethodRegistry,
    pub key: RngKey,
}

impl<'a> EvalRunner<'a> {
    pub fn new(
        dataset: &'a Dataset,
        cfg: &'a PipelineConfig,
        registry: &'a MethodRegistry,
        key: RngKey,
    ) -> Self {
        EvalRunner {
            dataset,
            cfg,
            registry,
            key,
        }
    }

    fn sims(
        &self,
        embedders: &EmbedderSet,
        originals: &[GeneratedItem],
        regenerated: &[GeneratedItem],
    ) -> Result<ArmSims> {
        let mut out: ArmSims = BTreeMap::new();
        for metric in &self.cfg.eval.metrics {
            let mut vals = Vec::with_capacity(originals.len());
            for (a, b) in originals.iter().zip(regenerated.iter()) {
                vals.push(builtin_similarity(
                    metric,
                    &a.x_hat,
                    &b.x_hat,
                    self.dataset.shape,
                    embedders,
                )?);
            }
            out.insert(metric.clone(), vals);
        }
        Ok(out)
    }

    /// Remove, retrain from scratch, regenerate with the same seeds, and
    /// compute paired similarities.
    fn run_arm(
        &self,
        results: &[AttributionResult],
        items: &[GeneratedItem],
        schedule: &GenerationSchedule,
        embedders: &EmbedderSet,
        key_r: &RngKey,
        k_fraction: f64,
    ) -> Result<(ArmSims, RemovalSet)> {
        let (reduced, removal) = remove_topk(self.dataset, results, k_fraction)?;
        let retrained = pretrain(
            &reduced,
            &self.cfg.arch,
            &self.cfg.loss,
            &self.cfg.train,
            &key_r.child("retrain"),
        )?;
        let mut regenerated = Vec::with_capacity(items.len());
        for item in items {
            let regen = generate(
                &retrained.f1,
                item.seed,
                &item.c_hat,
                schedule,
                self.cfg.generate.cfg_weight,
            )?;
            regenerated.push(regen);
        }
        Ok((self.sims(embedders, items, &regenerated)?, removal))
    }

    fn sample_condition(&self, key: &RngKey) -> Condition {
        match self.cfg.arch.conditioning {
            Conditioning::None => Condition::Empty,
            Conditioning::ClassId { num_classes } => {
                use rand::Rng;
                Condition::ClassId(key.rng().gen_range(0..num_classes))
            }
            Conditioning::Vector { dim } => {
                use rand::Rng;
                let mut rng = key.rng();
                Condition::Vector((0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            }
        }
    }

    fn run_repeat(
        &self,
        r: usize,
        methods: &[String],
        l_null: &NullLossEstimate,
        embedders: &EmbedderSet,
        schedule: &GenerationSchedule,
        cap: &CapTracker,
        seed_consistency_removal: Option<f64>,
    ) -> Result<RepeatOutcome> {
        let key_r = self.key.child("repeat").child_idx(r as u64);
        let pre = pretrain(
            self.dataset,
            &self.cfg.arch,
            &self.cfg.loss,
            &self.cfg.train,
            &key_r.child("pretrain"),
        )?;
        let f1: &ModelSnapshot = &pre.f1;

        let m = self.cfg.eval.num_items;
        let mut items = Vec::with_capacity(m);
        for i in 0..m {
            let seed = key_r.child("gen-seed").child_idx(i as u64).as_u64();
            let cond = self.sample_condition(&key_r.child("gen-cond").child_idx(i as u64));
            let mut item = generate(f1, seed, &cond, schedule, self.cfg.generate.cfg_weight)?;
            item.id = format!("r{r}-i{i:02}");
            items.push(item);
        }

        // Reference arm: random removal.
        let rand_results: Vec<AttributionResult> = items
            .iter()
            .enumerate()
            .map(|(i, item)| {
                attribute_random(
                    self.dataset,
                    &item.id,
                    &key_r.child("reference-arm").child_idx(i as u64),
                )
            })
            .collect();
        let mut removals = Vec::new();
        let (s_rand, removal) = self.run_arm(
            &rand_results,
            &items,
            schedule,
            embedders,
            &key_r,
            self.cfg.eval.k_fraction,
        )?;
        removals.push(("reference-random".to_string(), removal));

        // Method arms.
        let unlearn_cache = UnlearnCache::new();
        let mut per_method = BTreeMap::new();
        let mut results_by_method = BTreeMap::new();
        for method in methods {
            let strategy = self.registry.get(method)?;
            let mut results = Vec::with_capacity(items.len());
            for (i, item) in items.iter().enumerate() {
                let ctx = AttributionContext {
                    dataset: self.dataset,
                    item,
                    f1,
                    l_null,
                    nominal_lr: self.cfg.train.lr,
                    embedders,
                    method_key: key_r
                        .child("arm")
                        .child(method)
                        .child("item")
                        .child_idx(i as u64),
                    shared_key: key_r.child("item-shared").child_idx(i as u64),
                    unlearn_cache: &unlearn_cache,
                    cap,
                };
                results.push(strategy.attribute(&ctx)?);
            }
            let (sims, removal) = self.run_arm(
                &results,
                &items,
                schedule,
                embedders,
                &key_r,
                self.cfg.eval.k_fraction,
            )?;
            removals.push((method.clone(), removal));
            per_method.insert(method.clone(), sims);
            results_by_method.insert(method.clone(), results);
        }

        // Seed-consistency arms: heavy random removal with the same seeds,
        // plus different-seed generations from the full-data model.
        let seed_consistency = match seed_consistency_removal {
            None => None,
            Some(frac) => {
                let removal_result = attribute_random(
                    self.dataset,
                    "seed-consistency",
                    &key_r.child("seed-consistency-removal"),
                );
                let (same_seed, removal) =
                    self.run_arm(&[removal_result], &items, schedule, embedders, &key_r, frac)?;
                removals.push(("seed-consistency-random".to_string(), removal));

                let mut alt_items = Vec::with_capacity(items.len());
                for (i, item) in items.iter().enumerate() {
                    let alt_seed = key_r.child("gen-seed-alt").child_idx(i as u64).as_u64();
                    let alt =
                        generate(f1, alt_seed, &item.c_hat, schedule, self.cfg.generate.cfg_weight)?;
                    alt_items.push(alt);
                }
                let diff_seed = self.sims(embedders, &items, &alt_items)?;
                Some((same_seed, diff_seed))
            }
        };

        Ok(RepeatOutcome {
            s_rand,
            per_method,
            results_by_method,
            removals: removals
                .into_iter()
                .map(|(label, removal)| (label, removal))
                .collect(),
            seed_consistency,
        })
    }

    /// Run the benchmark: all repeats, all requested methods, the random
    /// reference arm, and (optionally) the seed-consistency arms.
    pub fn run(
        &self,
        methods: &[String],
        seed_consistency_removal: Option<f64>,
    ) -> Result<BenchOutcome> {
        self.cfg.validate()?;
        for m in methods {
            self.registry.get(m)?;
        }
        let schedule = self.cfg.generation_schedule()?;
        let l_null = estimate_null_loss(
            self.dataset,
            &self.cfg.arch,
            &self.cfg.loss,
            &self.cfg.null_loss,
            &self.key.child("null"),
        )?;
        let embedders = EmbedderSet::build(self.dataset, &self.cfg.embed, &self.key.child("embedders"))?;
        let cap = CapTracker::new();

        let mut outcome = BenchOutcome {
            null_loss: l_null.value,
            ..BenchOutcome::default()
        };
        if seed_consistency_removal.is_some() {
            outcome.seed_consistency = Some(SeedConsistencyOutcome {
                same_seed: BTreeMap::new(),
                diff_seed: BTreeMap::new(),
                removal_fraction: seed_consistency_removal.unwrap_or(0.0),
            });
        }

        for r in 0..self.cfg.eval.repeats {
            match self.run_repeat(
                r,
                methods,
                &l_null,
                &embedders,
                &schedule,
                &cap,
                seed_consistency_removal,
            ) {
                Ok(rep) => {
                    merge_sims(&mut outcome.s_rand, &rep.s_rand);
                    for (m, sims) in &rep.per_method {
                        merge_sims(outcome.per_method.entry(m.clone()).or_default(), sims);
                    }
                    for (m, results) in rep.results_by_method {
                        outcome
                            .results_by_method
                            .entry(m)
                            .or_default()
                            .extend(results);
                    }
                    for (label, removal) in rep.removals {
                        outcome.removals.push((r, label, removal));
                    }
                    if let (Some(sc), Some((same, diff))) =
                        (outcome.seed_consistency.as_mut(), rep.seed_consistency)
                    {
                        merge_sims(&mut sc.same_seed, &same);
                        merge_sims(&mut sc.diff_seed, &diff);
                    }
                    outcome.completed_repeats += 1;
                }
                Err(e) if is_divergence(&e) => {
                    outcome.failed_repeats.push((r, e.to_string()));
                }
                Err(e) => return Err(e),
            }
        }
        outcome.threshold_stop_steps = cap.observed();
        Ok(outcome)
    }
}

fn merge_sims(into: &mut ArmSims, from: &ArmSims) {
    for (metric, vals) in from {
        into.entry(metric.clone()).or_default().extend(vals.iter().copied());
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MetricStats {
    pub auc: f64,
    pub u: f64,
    pub p_one_tailed: f64,
    pub exact_p: bool,
    pub mnsd_percent: f64,
    pub mnsd_ci95: Option<f64>,
    pub n_pairs: usize,
}

/// Paired similarities, AUC per metric, significance, and normalized
/// differences for one experiment run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub k_fraction: f64,
    pub num_items: usize,
    pub repeats_configured: usize,
    pub repeats_completed: usize,
    pub failed_repeats: Vec<(usize, String)>,
    pub metrics: Vec<String>,
    /// method -> metric -> statistics.
    pub methods: BTreeMap<String, BTreeMap<String, MetricStats>>,
    /// Mean AUC across metrics per method.
    pub mean_auc: BTreeMap<String, f64>,
    pub s_rand: ArmSims,
    pub s_method: BTreeMap<String, ArmSims>,
    pub null_loss: f64,
    pub config_hash: String,
}

/// Reduce an outcome into the per-method, per-metric statistics table.
pub fn make_report(outcome: &BenchOutcome, cfg: &PipelineConfig) -> Result<EvalReport> {
    let mut methods: BTreeMap<String, BTreeMap<String, MetricStats>> = BTreeMap::new();
    let mut mean_auc = BTreeMap::new();
    for (method, sims) in &outcome.per_method {
        let mut per_metric = BTreeMap::new();
        let mut aucs = Vec::new();
        for metric in &cfg.eval.metrics {
            let s_rand = outcome
                .s_rand
                .get(metric)
                .ok_or_else(|| CoreError::EmptyInput(format!("no reference sims for {metric}")))?;
            let s_method = sims
                .get(metric)
                .ok_or_else(|| CoreError::EmptyInput(format!("no {method} sims for {metric}")))?;
            let auc = compute_auc(s_rand, s_method)?;
            let mnsd = mean_normalized_similarity_difference(s_method, s_rand)?;
            aucs.push(auc.auc);
            per_metric.insert(
                metric.clone(),
                MetricStats {
                    auc: auc.auc,
                    u: auc.u,
                    p_one_tailed: auc.p_one_tailed,
                    exact_p: auc.exact,
                    mnsd_percent: mnsd.value,
                    mnsd_ci95: mnsd.ci95,
                    n_pairs: s_method.len(),
                },
            );
        }
        mean_auc.insert(method.clone(), aucs.iter().sum::<f64>() / aucs.len().max(1) as f64);
        methods.insert(method.clone(), per_metric);
    }

    Ok(EvalReport {
        k_fraction: cfg.eval.k_fraction,
        num_items: cfg.eval.num_items,
        repeats_configured: cfg.eval.repeats,
        repeats_completed: outcome.completed_repeats,
        failed_repeats: outcome.failed_repeats.clone(),
        metrics: cfg.eval.metrics.clone(),
        methods,
        mean_auc,
        s_rand: outcome.s_rand.clone(),
        s_method: outcome.per_method.clone(),
        null_loss: outcome.null_loss,
        config_hash: hash_json(cfg),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_config_is_valid() {
        let cfg = PipelineConfig::reference();
        cfg.validate().unwrap();
        assert_eq!(cfg.eval.k_fraction, 0.02);
        assert_eq!(cfg.eval.num_items, 8);
        assert_eq!(cfg.data.size, 500);
        assert_eq!(cfg.mucs.unlearn.lambda, 0.2);
        assert_eq!(cfg.mucs.unlearn.batch_size, 100);
        assert_eq!(cfg.mucs.score.pair_count, 100);
        assert_eq!(cfg.mucs.score.epsilon, 1e-3);
        assert_eq!(cfg.null_loss.batch_size, 100);
        assert_eq!(cfg.null_loss.num_batches, 20);
    }

    #[test]
    fn registry_has_expected_methods() {
        let cfg = PipelineConfig::reference();
        let reg = cfg.registry();
        for name in [
            "random",
            "condition",
            "embed-flat",
            "embed-rp",
            "embed-ae",
            "forward-inf",
            "mucs",
            "mucs/s-c1",
            "mucs/s-c2",
            "mucs/s-c3-full",
            "mucs/s-c3-train",
            "mucs/u-c1-low",
            "mucs/u-c1-high",
            "mucs/u-c2",
            "mucs/u-c3",
            "mucs/u-c4",
        ] {
            assert!(reg.get(name).is_ok(), "missing method {name}");
        }
        assert!(reg.get("bogus").is_err());
    }
}
