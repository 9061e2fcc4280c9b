//! Comparator attribution methods: random, condition cosine, embedding
//! cosine, and gradient-ascent-only unlearning with subtraction scoring.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, GeneratedItem};
use crate::diffusion::arch::Condition;
use crate::diffusion::loss::{self};
use crate::diffusion::noise;
use crate::diffusion::optim::{AdamW, AdamWConfig};
use crate::diffusion::snapshot::{ModelSnapshot, Provenance, Role};
use crate::embed::{cosine, Embedder};
use crate::error::CoreError;
use crate::methods::{AttributionContext, AttributionResult, AttributionStrategy};
use crate::records::hash_json;
use crate::rng::RngKey;
use crate::Result;

/// Null model: i.i.d. uniform scores, reproducible per key.
pub fn attribute_random(dataset: &Dataset, item_id: &str, key: &RngKey) -> AttributionResult {
    let mut rng = key.rng();
    let scores: BTreeMap<String, f64> = dataset
        .instances
        .iter()
        .map(|inst| (inst.id.clone(), rng.gen::<f64>()))
        .collect();
    AttributionResult {
        method: "random".into(),
        item_id: item_id.to_string(),
        scores,
        config_hash: hash_json(&"random"),
        noise_provenance: key.hex(),
    }
}

fn condition_cosine(a: &Condition, b: &Condition) -> Result<f64> {
    match (a, b) {
        (Condition::ClassId(x), Condition::ClassId(y)) => {
            // one-hot encodings: cosine is 1 on match, 0 otherwise
            Ok(if x == y { 1.0 } else { 0.0 })
        }
        (Condition::Vector(u), Condition::Vector(v)) => {
            if u.len() != v.len() {
                return Err(CoreError::ShapeMismatch {
                    expected: format!("condition dim {}", u.len()),
                    got: format!("{}", v.len()),
                });
            }
            let ua = ndarray::Array1::from_vec(u.clone());
            let va = ndarray::Array1::from_vec(v.clone());
            Ok(cosine(&ua, &va))
        }
        _ => Err(CoreError::InvalidConfig(
            "condition attribution needs a conditional dataset".into(),
        )),
    }
}

/// Cosine similarity of the condition vectors.
pub fn attribute_condition_cosine(dataset: &Dataset, item: &GeneratedItem) -> Result<AttributionResult> {
    let mut scores = BTreeMap::new();
    for inst in &dataset.instances {
        scores.insert(inst.id.clone(), condition_cosine(&inst.c, &item.c_hat)?);
    }
    Ok(AttributionResult {
        method: "condition".into(),
        item_id: item.id.clone(),
        scores,
        config_hash: hash_json(&"condition"),
        noise_provenance: String::new(),
    })
}

/// Cosine similarity in an embedder's space.
pub fn attribute_embedding_cosine(
    dataset: &Dataset,
    item: &GeneratedItem,
    embedder: &dyn Embedder,
) -> Result<AttributionResult> {
    let target = embedder.embed(&item.x_hat)?;
    let mut scores = BTreeMap::new();
    for inst in &dataset.instances {
        scores.insert(inst.id.clone(), cosine(&embedder.embed(&inst.x)?, &target));
    }
    Ok(AttributionResult {
        method: format!("embed-{}", embedder.name()),
        item_id: item.id.clone(),
        scores,
        config_hash: hash_json(&embedder.name()),
        noise_provenance: String::new(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardInfConfig {
    /// Constant number of gradient-ascent steps (no stop rule, no clamp).
    pub steps: usize,
    pub lr_factor: f64,
    pub batch_size: usize,
    /// Fresh draws per loss expectation during scoring.
    pub draws: usize,
}

impl Default for ForwardInfConfig {
    fn default() -> Self {
        ForwardInfConfig {
            steps: 40,
            lr_factor: 0.1,
            batch_size: 100,
            draws: 100,
        }
    }
}

/// Unbounded gradient ascent on the generated item, full parameters.
/// Returns the ascended model and the per-step (unclamped) ascent loss.
pub fn run_forward_inf_ascent(
    f1: &ModelSnapshot,
    item: &GeneratedItem,
    cfg: &ForwardInfConfig,
    nominal_lr: f64,
    opt_cfg: AdamWConfig,
    key: &RngKey,
) -> Result<(ModelSnapshot, Vec<f64>)> {
    let arch = f1.arch().clone();
    let lc = f1.loss().clone();
    let b = cfg.batch_size;
    let d = arch.data_dim();
    let lr = (cfg.lr_factor * nominal_lr) as f32;

    let mut params = f1.params().clone();
    let mut opt = AdamW::new(&params, opt_cfg);
    let mut rng = key.child("ga-noise").rng();

    let xs_hat = loss::repeat_row(&item.x_hat, b);
    let cond_row = loss::encode_conditions(&[&item.c_hat], &arch)?;
    let mut cond = Array2::zeros((b, arch.cond_dim()));
    for mut row in cond.rows_mut() {
        row.assign(&cond_row.row(0));
    }

    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut sigmas = vec![0f32; b];
        let mut noises = Array2::zeros((b, d));
        for r in 0..b {
            sigmas[r] = noise::sample_sigma(&lc, &mut rng) as f32;
            noises.row_mut(r).assign(&noise::sample_noise_vec(d, &mut rng));
        }
        let fwd = loss::loss_forward(&params, &arch, &lc, &xs_hat, &cond, &sigmas, &noises)?;
        let l_ga = fwd.mean();
        if !l_ga.is_finite() {
            return Err(CoreError::UnlearnDiverged {
                run: item.id.clone(),
                step,
                trace: trace.iter().rev().take(100).rev().copied().collect(),
            });
        }
        trace.push(l_ga);
        let mut grads = params.zeros_like();
        let weights = vec![-1.0f32 / b as f32; b];
        loss::loss_backward(&params, &fwd, &weights, &mut grads);
        opt.step(&mut params, &grads, lr, None);
    }

    let ascended = ModelSnapshot::new(
        params,
        arch,
        lc,
        Role::F2,
        Provenance {
            seed: key.hex(),
            steps: cfg.steps,
            ema: false,
        },
    )?;
    Ok((ascended, trace))
}

/// Mirrored-influence baseline: constant-step gradient ascent on the
/// generated item, then mean loss subtraction with non-consistent draws.
pub fn attribute_forward_inf(
    dataset: &Dataset,
    item: &GeneratedItem,
    f1: &ModelSnapshot,
    cfg: &ForwardInfConfig,
    nominal_lr: f64,
    opt_cfg: AdamWConfig,
    key: &RngKey,
) -> Result<AttributionResult> {
    let (f2, _trace) = run_forward_inf_ascent(f1, item, cfg, nominal_lr, opt_cfg, key)?;
    let lc = f1.loss().clone();
    let d = dataset.shape.dim();

    let scored: Result<Vec<(String, f64)>> = dataset
        .instances
        .par_iter()
        .enumerate()
        .map(|(idx, inst)| {
            let mut rng = key.child("score").child_idx(idx as u64).rng();
            let cond_row = loss::encode_conditions(&[&inst.c], f1.arch())?;
            let eval = |model: &ModelSnapshot, rng: &mut rand_chacha::ChaCha12Rng| -> Result<f64> {
                let n = cfg.draws;
                let xs = loss::repeat_row(&inst.x, n);
                let mut cond = Array2::zeros((n, cond_row.ncols()));
                for mut row in cond.rows_mut() {
                    row.assign(&cond_row.row(0));
                }
                let mut sigmas = vec![0f32; n];
                let mut noises = Array2::zeros((n, d));
                for r in 0..n {
                    sigmas[r] = noise::sample_sigma(&lc, rng) as f32;
                    noises.row_mut(r).assign(&noise::sample_noise_vec(d, rng));
                }
                let fwd = loss::loss_forward(model.params(), model.arch(), model.loss(), &xs, &cond, &sigmas, &noises)?;
                fwd.check_finite()?;
                Ok(fwd.mean())
            };
            // Non-consistent by construction: fresh draws per expectation.
            let l2 = eval(&f2, &mut rng)?;
            let l1 = eval(f1, &mut rng)?;
            Ok((inst.id.clone(), l2 - l1))
        })
        .collect();
    let scores: BTreeMap<String, f64> = scored?.into_iter().collect();

    Ok(AttributionResult {
        method: "forward-inf".into(),
        item_id: item.id.clone(),
        scores,
        config_hash: hash_json(cfg),
        noise_provenance: key.hex(),
    })
}

pub struct RandomMethod;

impl AttributionStrategy for RandomMethod {
    fn name(&self) -> &str {
        "random"
    }

    fn attribute(&self, ctx: &AttributionContext<'_>) -> Result<AttributionResult> {
        Ok(attribute_random(
            ctx.dataset,
            &ctx.item.id,
            &ctx.method_key.child("random"),
        ))
    }
}

pub struct ConditionMethod;

impl AttributionStrategy for ConditionMethod {
    fn name(&self) -> &str {
        "condition"
    }

    fn attribute(&self, ctx: &AttributionContext<'_>) -> Result<AttributionResult> {
        attribute_condition_cosine(ctx.dataset, ctx.item)
    }
}

pub struct EmbeddingMethod {
    pub embedder: String,
}

impl AttributionStrategy for EmbeddingMethod {
    fn name(&self) -> &str {
        match self.embedder.as_str() {
            "flat" => "embed-flat",
            "rp" => "embed-rp",
            "ae" => "embed-ae",
            other => other,
        }
    }

    fn attribute(&self, ctx: &AttributionContext<'_>) -> Result<AttributionResult> {
        let embedder = ctx.embedders.get(&self.embedder)?;
        attribute_embedding_cosine(ctx.dataset, ctx.item, embedder)
    }
}

pub struct ForwardInfMethod {
    pub cfg: ForwardInfConfig,
}

impl AttributionStrategy for ForwardInfMethod {
    fn name(&self) -> &str {
        "forward-inf"
    }

    fn attribute(&self, ctx: &AttributionContext<'_>) -> Result<AttributionResult> {
        attribute_forward_inf(
            ctx.dataset,
            ctx.item,
            ctx.f1,
            &self.cfg,
            ctx.nominal_lr,
            AdamWConfig::default(),
            &ctx.method_key.child("forward-inf"),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_toy_dataset, ToySpec};
    use crate::embed::FlattenEmbedder;
    use crate::methods::top_k_ids;

    fn dataset() -> Dataset {
        build_toy_dataset(
            &ToySpec {
                size: 40,
                classes: 4,
                channels: 3,
                height: 8,
                width: 8,
            },
            &RngKey::root(40),
            0.5,
        )
        .unwrap()
    }

    fn item_from(inst: &crate::data::TrainingInstance, id: &str) -> GeneratedItem {
        GeneratedItem {
            id: id.into(),
            x_hat: inst.x.clone(),
            c_hat: inst.c.clone(),
            seed: 0,
            source: "test".into(),
        }
    }

    #[test]
    fn random_reproducible_and_key_sensitive() {
        let ds = dataset();
        let a = attribute_random(&ds, "g0", &RngKey::root(1).child("rand"));
        let b = attribute_random(&ds, "g0", &RngKey::root(1).child("rand"));
        let c = attribute_random(&ds, "g0", &RngKey::root(2).child("rand"));
        assert_eq!(a.scores, b.scores);
        assert_ne!(a.scores, c.scores);
        assert!(a.covers(&ds));
    }

    #[test]
    fn condition_one_hot_scores() {
        let ds = dataset();
        let item = item_from(&ds.instances[0], "g0");
        let r = attribute_condition_cosine(&ds, &item).unwrap();
        for inst in &ds.instances {
            let expect = if inst.c == item.c_hat { 1.0 } else { 0.0 };
            assert_eq!(r.scores[&inst.id], expect);
        }
        // top-k dominated by the generated item's class
        let top = top_k_ids(&r.scores, 10);
        assert!(top
            .iter()
            .all(|id| ds.instance(id).unwrap().c == item.c_hat));
    }

    #[test]
    fn condition_rejects_unconditional() {
        let mut ds = dataset();
        for inst in &mut ds.instances {
            inst.c = Condition::Empty;
        }
        let item = GeneratedItem {
            id: "g0".into(),
            x_hat: ds.instances[0].x.clone(),
            c_hat: Condition::Empty,
            seed: 0,
            source: "t".into(),
        };
        assert!(attribute_condition_cosine(&ds, &item).is_err());
    }

    #[test]
    fn flatten_embedding_ranks_duplicate_first() {
        let ds = dataset();
        // Nearest-duplicate: a slightly perturbed copy of one instance.
        let target = 17;
        let mut x_hat = ds.instances[target].x.clone();
        x_hat[0] += 0.01;
        let item = GeneratedItem {
            id: "g0".into(),
            x_hat,
            c_hat: ds.instances[target].c.clone(),
            seed: 0,
            source: "t".into(),
        };
        let emb = FlattenEmbedder::new(ds.shape.dim());
        let r = attribute_embedding_cosine(&ds, &item, &emb).unwrap();
        // Brute-force pixel cosine oracle.
        let mut best = (String::new(), f64::NEG_INFINITY);
        for inst in &ds.instances {
            let c = cosine(&inst.x, &item.x_hat);
            if c > best.1 {
                best = (inst.id.clone(), c);
            }
        }
        assert_eq!(best.0, ds.instances[target].id);
        assert_eq!(top_k_ids(&r.scores, 1)[0], ds.instances[target].id);
        // identical image scores exactly 1
        let self_item = item_from(&ds.instances[3], "g1");
        let r2 = attribute_embedding_cosine(&ds, &self_item, &emb).unwrap();
        assert!((r2.scores[&ds.instances[3].id] - 1.0).abs() < 1e-6);
    }
}
