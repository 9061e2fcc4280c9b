//! Attribution scoring: noise-consistent normalized loss skew.
//!
//! A fixed set of (sigma, n) pairs is built once per attribution run —
//! sigma follows the generation schedule (descending, last 30% discarded),
//! n comes from the training noise distribution — and every training
//! instance is scored with the identical pairs under both models. The
//! score is the average normalized skew, a bounded, scale-compensated
//! alternative to plain loss subtraction. Ablation modes deviate in
//! exactly one documented way each.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, GeneratedItem};
use crate::diffusion::loss::{self, LossConfig};
use crate::diffusion::noise;
use crate::diffusion::schedule::build_generation_schedule;
use crate::diffusion::snapshot::ModelSnapshot;
use crate::error::CoreError;
use crate::methods::AttributionResult;
use crate::records::hash_json;
use crate::rng::RngKey;
use crate::Result;

/// Schedule shape shared between generation and scoring.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseProvenance {
    pub sigma_source: String,
    pub schedule: ScheduleParams,
    pub target_size: usize,
    pub retention: f64,
    pub rng_key: String,
    pub loss_hash: String,
}

/// The fixed pair set N reused across all training instances of one run.
#[derive(Clone, Debug)]
pub struct NoisePairSet {
    pub sigmas: Vec<f64>,
    /// One independent noise row per sigma (|N| x data_dim).
    pub noises: Array2<f32>,
    pub provenance: NoiseProvenance,
}

impl NoisePairSet {
    pub fn len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigmas.is_empty()
    }
}

/// Build the pair set: a descending schedule of floor(target/retention)
/// values, keeping the first `target_size`, each paired with a fresh noise
/// draw from the training distribution.
pub fn build_noise_pair_set(
    lc: &LossConfig,
    dim: usize,
    sp: &ScheduleParams,
    target_size: usize,
    retention: f64,
    key: &RngKey,
) -> Result<NoisePairSet> {
    if target_size < 1 {
        return Err(CoreError::InvalidConfig(
            "noise pair set needs target_size >= 1".into(),
        ));
    }
    if !(retention > 0.0 && retention <= 1.0) {
        return Err(CoreError::InvalidConfig(format!(
            "retention must be in (0, 1], got {retention}"
        )));
    }
    let schedule_len = ((target_size as f64) / retention).floor() as usize;
    let schedule = build_generation_schedule(sp.sigma_min, sp.sigma_max, sp.rho, schedule_len)?;
    let sigmas: Vec<f64> = schedule.values[..target_size].to_vec();

    let mut rng = key.rng();
    let mut noises = Array2::zeros((target_size, dim));
    for mut row in noises.rows_mut() {
        row.assign(&noise::sample_noise_vec(dim, &mut rng));
    }

    Ok(NoisePairSet {
        sigmas,
        noises,
        provenance: NoiseProvenance {
            sigma_source: "generation-schedule".into(),
            schedule: *sp,
            target_size,
            retention,
            rng_key: key.hex(),
            loss_hash: hash_json(lc),
        },
    })
}

/// Pair set with sigma drawn from the training (log-normal) distribution
/// instead of the generation schedule; still noise-consistent.
pub fn build_training_sigma_pair_set(
    lc: &LossConfig,
    dim: usize,
    sp: &ScheduleParams,
    target_size: usize,
    key: &RngKey,
) -> Result<NoisePairSet> {
    if target_size < 1 {
        return Err(CoreError::InvalidConfig(
            "noise pair set needs target_size >= 1".into(),
        ));
    }
    let mut rng = key.rng();
    let mut sigmas = Vec::with_capacity(target_size);
    let mut noises = Array2::zeros((target_size, dim));
    for mut row in noises.rows_mut() {
        sigmas.push(noise::sample_sigma(lc, &mut rng));
        row.assign(&noise::sample_noise_vec(dim, &mut rng));
    }
    Ok(NoisePairSet {
        sigmas,
        noises,
        provenance: NoiseProvenance {
            sigma_source: "training-distribution".into(),
            schedule: *sp,
            target_size,
            retention: 1.0,
            rng_key: key.hex(),
            loss_hash: hash_json(lc),
        },
    })
}

/// Normalized skew of a loss pair.
pub fn skew(l2: f64, l1: f64, epsilon: f64) -> f64 {
    (l2 - l1) / (l2.abs() + l1.abs() + epsilon)
}

/// Plain subtraction of a loss pair (ablation S-C1).
pub fn subtraction(l2: f64, l1: f64) -> f64 {
    l2 - l1
}

/// Per-pair losses of one instance under one model.
fn instance_losses(
    model: &ModelSnapshot,
    instance_x: &ndarray::Array1<f32>,
    cond_row: &Array2<f32>,
    sigmas: &[f64],
    noises: &Array2<f32>,
) -> Result<Vec<f64>> {
    let n = sigmas.len();
    let xs = loss::repeat_row(instance_x, n);
    let mut cond = Array2::zeros((n, cond_row.ncols()));
    for mut row in cond.rows_mut() {
        row.assign(&cond_row.row(0));
    }
    let sig32: Vec<f32> = sigmas.iter().map(|s| *s as f32).collect();
    let fwd = loss::loss_forward(model.params(), model.arch(), model.loss(), &xs, &cond, &sig32, noises)?;
    fwd.check_finite()?;
    Ok(fwd.losses.iter().map(|l| *l as f64).collect())
}

fn check_model_pair(f1: &ModelSnapshot, f2: &ModelSnapshot) -> Result<()> {
    if f1.arch() != f2.arch() || f1.loss() != f2.loss() {
        return Err(CoreError::ProvenanceMismatch(
            "F1 and F2 must share architecture and loss".into(),
        ));
    }
    Ok(())
}

#[derive(Serialize)]
struct ScoreConfigHash<'a> {
    mode: &'a str,
    epsilon: f64,
    pair_provenance: &'a NoiseProvenance,
    f1: &'a str,
    f2: &'a str,
}

/// Noise-consistent normalized-skew attribution (the primary scorer).
pub fn score_mucs(
    dataset: &Dataset,
    item: &GeneratedItem,
    f1: &ModelSnapshot,
    f2: &ModelSnapshot,
    pairs: &NoisePairSet,
    epsilon: f64,
) -> Result<AttributionResult> {
    score_consistent(dataset, item, f1, f2, pairs, epsilon, ConsistentKind::Skew, "mucs")
}

enum ConsistentKind {
    Skew,
    Subtraction,
}

fn score_consistent(
    dataset: &Dataset,
    item: &GeneratedItem,
    f1: &ModelSnapshot,
    f2: &ModelSnapshot,
    pairs: &NoisePairSet,
    epsilon: f64,
    kind: ConsistentKind,
    method: &str,
) -> Result<AttributionResult> {
    check_model_pair(f1, f2)?;
    if pairs.provenance.loss_hash != hash_json(f1.loss()) {
        return Err(CoreError::ProvenanceMismatch(format!(
            "noise pair set built for a different loss config (set {}, model {})",
            pairs.provenance.loss_hash,
            hash_json(f1.loss())
        )));
    }
    if pairs.noises.ncols() != dataset.shape.dim() {
        return Err(CoreError::ShapeMismatch {
            expected: format!("noise dim {}", dataset.shape.dim()),
            got: format!("{}", pairs.noises.ncols()),
        });
    }

    let scored: Result<Vec<(String, f64)>> = dataset
        .instances
        .par_iter()
        .map(|inst| {
            let cond_row = loss::encode_conditions(&[&inst.c], f1.arch())?;
            let l1 = instance_losses(f1, &inst.x, &cond_row, &pairs.sigmas, &pairs.noises)?;
            let l2 = instance_losses(f2, &inst.x, &cond_row, &pairs.sigmas, &pairs.noises)?;
            let score = match kind {
                ConsistentKind::Skew => {
                    let s: f64 = l1
                        .iter()
                        .zip(l2.iter())
                        .map(|(a, b)| skew(*b, *a, epsilon))
                        .sum();
                    s / l1.len() as f64
                }
                ConsistentKind::Subtraction => {
                    let s: f64 = l1.iter().zip(l2.iter()).map(|(a, b)| subtraction(*b, *a)).sum();
                    s / l1.len() as f64
                }
            };
            Ok((inst.id.clone(), score))
        })
        .collect();
    let scores: BTreeMap<String, f64> = scored?.into_iter().collect();

    let config_hash = hash_json(&ScoreConfigHash {
        mode: method,
        epsilon,
        pair_provenance: &pairs.provenance,
        f1: f1.fingerprint(),
        f2: f2.fingerprint(),
    });
    Ok(AttributionResult {
        method: method.to_string(),
        item_id: item.id.clone(),
        scores,
        config_hash,
        noise_provenance: pairs.provenance.rng_key.clone(),
    })
}

/// Scoring ablation modes (single documented deviation each).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreMode {
    /// Standard noise-consistent skew.
    Skew,
    /// Loss subtraction instead of skew.
    Subtraction,
    /// Fresh (sigma, n) per loss evaluation and per instance.
    NonConsistent,
    /// Sigma from the training distribution instead of the schedule.
    SigmaTrain,
    /// Retention 1.0: the full generation schedule.
    FullSchedule,
}

impl ScoreMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "skew" => Ok(ScoreMode::Skew),
            "subtraction" => Ok(ScoreMode::Subtraction),
            "nonconsistent" => Ok(ScoreMode::NonConsistent),
            "sigma-train" => Ok(ScoreMode::SigmaTrain),
            "full-schedule" => Ok(ScoreMode::FullSchedule),
            other => Err(CoreError::UnknownName {
                kind: "score mode",
                name: other.into(),
                known: vec![
                    "skew".into(),
                    "subtraction".into(),
                    "nonconsistent".into(),
                    "sigma-train".into(),
                    "full-schedule".into(),
                ],
            }),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            ScoreMode::Skew => "skew",
            ScoreMode::Subtraction => "subtraction",
            ScoreMode::NonConsistent => "nonconsistent",
            ScoreMode::SigmaTrain => "sigma-train",
            ScoreMode::FullSchedule => "full-schedule",
        }
    }
}

/// Scorer configuration (defaults follow the method constants).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub pair_count: usize,
    pub retention: f64,
    pub epsilon: f64,
    pub schedule: ScheduleParams,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            pair_count: 100,
            retention: 0.7,
            epsilon: 1e-3,
            schedule: ScheduleParams {
                sigma_min: 2e-3,
                sigma_max: 80.0,
                rho: 7.0,
            },
        }
    }
}

/// Run one scoring mode. All modes share the unlearned model; only the
/// documented deviation differs.
pub fn score_variant(
    dataset: &Dataset,
    item: &GeneratedItem,
    f1: &ModelSnapshot,
    f2: &ModelSnapshot,
    mode: ScoreMode,
    cfg: &ScoreConfig,
    key: &RngKey,
) -> Result<AttributionResult> {
    let dim = dataset.shape.dim();
    let lc = f1.loss();
    match mode {
        ScoreMode::Skew => {
            let pairs = build_noise_pair_set(lc, dim, &cfg.schedule, cfg.pair_count, cfg.retention, &key.child("pairs"))?;
            score_mucs(dataset, item, f1, f2, &pairs, cfg.epsilon)
        }
        ScoreMode::Subtraction => {
            let pairs = build_noise_pair_set(lc, dim, &cfg.schedule, cfg.pair_count, cfg.retention, &key.child("pairs"))?;
            score_consistent(
                dataset,
                item,
                f1,
                f2,
                &pairs,
                cfg.epsilon,
                ConsistentKind::Subtraction,
                "mucs/s-c1",
            )
        }
        ScoreMode::FullSchedule => {
            let pairs = build_noise_pair_set(lc, dim, &cfg.schedule, cfg.pair_count, 1.0, &key.child("pairs"))?;
            score_consistent(
                dataset,
                item,
                f1,
                f2,
                &pairs,
                cfg.epsilon,
                ConsistentKind::Skew,
                "mucs/s-c3-full",
            )
        }
        ScoreMode::SigmaTrain => {
            let pairs =
                build_training_sigma_pair_set(lc, dim, &cfg.schedule, cfg.pair_count, &key.child("pairs"))?;
            score_consistent(
                dataset,
                item,
                f1,
                f2,
                &pairs,
                cfg.epsilon,
                ConsistentKind::Skew,
                "mucs/s-c3-train",
            )
        }
        ScoreMode::NonConsistent => score_nonconsistent(dataset, item, f1, f2, cfg, key),
    }
}

/// S-C2: fresh (sigma, n) for every loss evaluation and every instance.
/// Sigma values are drawn uniformly from the retained schedule values so
/// only consistency deviates, not the sigma range.
fn score_nonconsistent(
    dataset: &Dataset,
    item: &GeneratedItem,
    f1: &ModelSnapshot,
    f2: &ModelSnapshot,
    cfg: &ScoreConfig,
    key: &RngKey,
) -> Result<AttributionResult> {
    check_model_pair(f1, f2)?;
    let dim = dataset.shape.dim();
    let schedule_len = ((cfg.pair_count as f64) / cfg.retention).floor() as usize;
    let schedule = build_generation_schedule(
        cfg.schedule.sigma_min,
        cfg.schedule.sigma_max,
        cfg.schedule.rho,
        schedule_len,
    )?;
    let retained: Vec<f64> = schedule.values[..cfg.pair_count].to_vec();

    let scored: Result<Vec<(String, f64)>> = dataset
        .instances
        .par_iter()
        .enumerate()
        .map(|(idx, inst)| {
            let mut rng = key.child("nonconsistent").child_idx(idx as u64).rng();
            let cond_row = loss::encode_conditions(&[&inst.c], f1.arch())?;
            let draw = |rng: &mut rand_chacha::ChaCha12Rng| {
                let mut sigmas = Vec::with_capacity(cfg.pair_count);
                let mut noises = Array2::zeros((cfg.pair_count, dim));
                for mut row in noises.rows_mut() {
                    sigmas.push(retained[rng.gen_range(0..retained.len())]);
                    row.assign(&noise::sample_noise_vec(dim, rng));
                }
                (sigmas, noises)
            };
            // Independent draws for each loss evaluation.
            let (sig1, noi1) = draw(&mut rng);
            let (sig2, noi2) = draw(&mut rng);
            let l1 = instance_losses(f1, &inst.x, &cond_row, &sig1, &noi1)?;
            let l2 = instance_losses(f2, &inst.x, &cond_row, &sig2, &noi2)?;
            let s: f64 = l1
                .iter()
                .zip(l2.iter())
                .map(|(a, b)| skew(*b, *a, cfg.epsilon))
                .sum();
            Ok((inst.id.clone(), s / l1.len() as f64))
        })
        .collect();
    let scores: BTreeMap<String, f64> = scored?.into_iter().collect();

    let prov = NoiseProvenance {
        sigma_source: "generation-schedule/nonconsistent".into(),
        schedule: cfg.schedule,
        target_size: cfg.pair_count,
        retention: cfg.retention,
        rng_key: key.hex(),
        loss_hash: hash_json(f1.loss()),
    };
    let config_hash = hash_json(&ScoreConfigHash {
        mode: "mucs/s-c2",
        epsilon: cfg.epsilon,
        pair_provenance: &prov,
        f1: f1.fingerprint(),
        f2: f2.fingerprint(),
    });
    Ok(AttributionResult {
        method: "mucs/s-c2".into(),
        item_id: item.id.clone(),
        scores,
        config_hash,
        noise_provenance: prov.rng_key.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::loss::LossVariant;

    fn lc() -> LossConfig {
        LossConfig {
            variant: LossVariant::Edm,
            p_mean: -1.2,
            p_std: 1.2,
            sigma_data: 0.5,
            weighting: "edm".into(),
        }
    }

    #[test]
    fn pair_set_schedule_shape() {
        let sp = ScheduleParams {
            sigma_min: 2e-3,
            sigma_max: 80.0,
            rho: 7.0,
        };
        // target 100, retention 0.7: 142-value schedule, first 100 kept.
        let p = build_noise_pair_set(&lc(), 12, &sp, 100, 0.7, &RngKey::root(1)).unwrap();
        assert_eq!(p.len(), 100);
        assert_eq!(p.sigmas[0], 80.0);
        assert!(p.sigmas.windows(2).all(|w| w[1] < w[0]));
        // The kept head stops above sigma_min: the last 30% is discarded.
        assert!(*p.sigmas.last().unwrap() > 2e-3);

        // retention 1.0: the full schedule, ending exactly at sigma_min.
        let full = build_noise_pair_set(&lc(), 12, &sp, 100, 1.0, &RngKey::root(1)).unwrap();
        assert_eq!(full.len(), 100);
        assert_eq!(*full.sigmas.last().unwrap(), 2e-3);
    }

    #[test]
    fn skew_hand_oracle() {
        // Direct evaluation of the skew formula by hand.
        let a = skew(0.3, 0.1, 1e-3);
        assert!((a - 0.2 / 0.401).abs() < 1e-12, "{a}");
        assert_eq!(skew(0.5, 0.5, 1e-3), 0.0);
    }

    #[test]
    fn skew_strictly_bounded_and_antisymmetric() {
        let cases = [
            (0.0, 0.0),
            (1e-9, 2e9),
            (5.0, 0.0),
            (0.25, 0.75),
            (1e12, 1e-12),
        ];
        for (l1, l2) in cases {
            let s = skew(l2, l1, 1e-3);
            assert!(s > -1.0 && s < 1.0, "skew({l2}, {l1}) = {s}");
            assert_eq!(skew(l1, l2, 1e-3), -s);
        }
    }

    #[test]
    fn mode_parsing() {
        assert_eq!(ScoreMode::parse("skew").unwrap(), ScoreMode::Skew);
        assert_eq!(
            ScoreMode::parse("nonconsistent").unwrap(),
            ScoreMode::NonConsistent
        );
        assert!(ScoreMode::parse("nope").is_err());
    }
}
