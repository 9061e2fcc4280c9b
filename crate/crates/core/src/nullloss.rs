//! Null (random-performance) loss estimation.
//!
//! The null loss is the expected diffusion loss of a freshly random-init
//! model over the training data and noise distributions. It serves as the
//! gradient-ascent clamp and the stop-rule reference during unlearning,
//! and never reads pretrained weights.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TrainingInstance};
use crate::diffusion::arch::ArchConfig;
use crate::diffusion::loss::{self, LossConfig};
use crate::diffusion::noise;
use crate::diffusion::params::DenoiserParams;
use crate::diffusion::snapshot::{ModelSnapshot, Provenance, Role};
use crate::diffusion::train::ShuffleSampler;
use crate::error::CoreError;
use crate::rng::RngKey;
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NullLossConfig {
    pub batch_size: usize,
    pub num_batches: usize,
}

impl Default for NullLossConfig {
    fn default() -> Self {
        // Appendix-style constants: 20 batches of 100 draws.
        NullLossConfig {
            batch_size: 100,
            num_batches: 20,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NullLossEstimate {
    pub value: f64,
    pub num_realizations: usize,
    /// Per-batch means, for dispersion / CI checks.
    pub batch_means: Vec<f64>,
    /// Fingerprint of the random-init snapshot used.
    pub f0_fingerprint: String,
    pub rng_key: String,
}

impl NullLossEstimate {
    /// Standard error of the estimate from the per-batch means.
    pub fn standard_error(&self) -> f64 {
        let n = self.batch_means.len() as f64;
        if n < 2.0 {
            return 0.0;
        }
        let mean = self.batch_means.iter().sum::<f64>() / n;
        let var = self
            .batch_means
            .iter()
            .map(|m| (m - mean).powi(2))
            .sum::<f64>()
            / (n - 1.0);
        (var / n).sqrt()
    }
}

/// Shared estimator plumbing: mean of a per-batch loss evaluator over
/// `num_batches` batches of `batch_size` draws, with instances sampled
/// uniformly without replacement (reshuffling when exhausted).
///
/// The evaluator receives the sampled instances and their (sigma, n) draws
/// and returns per-sample losses.
pub fn estimate_mean_loss<F>(
    dataset: &Dataset,
    lc: &LossConfig,
    cfg: &NullLossConfig,
    key: &RngKey,
    mut eval_batch: F,
) -> Result<(f64, Vec<f64>)>
where
    F: FnMut(&[&TrainingInstance], &[f64], &Array2<f32>) -> Result<Vec<f32>>,
{
    if dataset.is_empty() {
        return Err(CoreError::EmptyInput("null-loss dataset".into()));
    }
    if cfg.batch_size == 0 || cfg.num_batches == 0 {
        return Err(CoreError::InvalidConfig(
            "null-loss batches must be non-empty".into(),
        ));
    }
    let dim = dataset.shape.dim();
    let mut data_rng = key.child("data").rng();
    let mut noise_rng = key.child("noise").rng();
    let mut sampler = ShuffleSampler::new(dataset.len());

    let mut batch_means = Vec::with_capacity(cfg.num_batches);
    for _ in 0..cfg.num_batches {
        let insts: Vec<&TrainingInstance> = (0..cfg.batch_size)
            .map(|_| &dataset.instances[sampler.next(&mut data_rng)])
            .collect();
        let mut sigmas = Vec::with_capacity(cfg.batch_size);
        let mut noises = Array2::zeros((cfg.batch_size, dim));
        for r in 0..cfg.batch_size {
            sigmas.push(noise::sample_sigma(lc, &mut noise_rng));
            noises
                .row_mut(r)
                .assign(&noise::sample_noise_vec(dim, &mut noise_rng));
        }
        let losses = eval_batch(&insts, &sigmas, &noises)?;
        let mean = losses.iter().map(|l| *l as f64).sum::<f64>() / losses.len() as f64;
        batch_means.push(mean);
    }
    let value = batch_means.iter().sum::<f64>() / batch_means.len() as f64;
    Ok((value, batch_means))
}

/// Estimate the null loss with a freshly random-initialized snapshot.
pub fn estimate_null_loss(
    dataset: &Dataset,
    arch: &ArchConfig,
    lc: &LossConfig,
    cfg: &NullLossConfig,
    key: &RngKey,
) -> Result<NullLossEstimate> {
    arch.validate()?;
    lc.validate()?;
    let mut init_rng = key.child("f0-init").rng();
    let params = DenoiserParams::init(arch, &mut init_rng);
    let f0 = ModelSnapshot::new(
        params,
        arch.clone(),
        lc.clone(),
        Role::F0,
        Provenance {
            seed: key.hex(),
            steps: 0,
            ema: false,
        },
    )?;

    let (value, batch_means) = estimate_mean_loss(dataset, lc, cfg, key, |insts, sigmas, noises| {
        let xs = loss::stack_rows(&insts.iter().map(|i| &i.x).collect::<Vec<_>>());
        let conds: Vec<&_> = insts.iter().map(|i| &i.c).collect();
        let cond = loss::encode_conditions(&conds, arch)?;
        let sig32: Vec<f32> = sigmas.iter().map(|s| *s as f32).collect();
        let fwd = loss::loss_forward(f0.params(), arch, lc, &xs, &cond, &sig32, noises)?;
        fwd.check_finite().map_err(|_| CoreError::NonFiniteNullLoss {
            seed: key.hex(),
        })?;
        Ok(fwd.losses)
    })?;

    Ok(NullLossEstimate {
        value,
        num_realizations: cfg.batch_size * cfg.num_batches,
        batch_means,
        f0_fingerprint: f0.fingerprint().to_string(),
        rng_key: key.hex(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_toy_dataset, ToySpec};
    use crate::diffusion::arch::{Conditioning, ImageShape};
    use crate::diffusion::loss::LossVariant;

    fn small_setup() -> (Dataset, ArchConfig, LossConfig) {
        let spec = ToySpec {
            size: 60,
            classes: 6,
            channels: 3,
            height: 8,
            width: 8,
        };
        let ds = build_toy_dataset(&spec, &RngKey::root(10), 0.5).unwrap();
        let arch = ArchConfig {
            input_shape: ImageShape {
                channels: 3,
                height: 8,
                width: 8,
            },
            d_model: 16,
            mlp_hidden: 24,
            dec_hidden: 24,
            blocks: 2,
            conditioning: Conditioning::ClassId { num_classes: 6 },
            cond_dropout: 0.1,
        };
        let lc = LossConfig {
            variant: LossVariant::Edm,
            p_mean: -1.2,
            p_std: 1.2,
            sigma_data: 0.5,
            weighting: "edm".into(),
        };
        (ds, arch, lc)
    }

    #[test]
    fn realization_count_is_batches_times_batch_size() {
        let (ds, arch, lc) = small_setup();
        let cfg = NullLossConfig {
            batch_size: 100,
            num_batches: 20,
        };
        let est = estimate_null_loss(&ds, &arch, &lc, &cfg, &RngKey::root(11)).unwrap();
        assert_eq!(est.num_realizations, 2000);
        assert_eq!(est.batch_means.len(), 20);
        assert!(est.value > 0.0);
    }

    #[test]
    fn calibrated_edm_null_loss_near_one() {
        let (ds, arch, lc) = small_setup();
        let est = estimate_null_loss(
            &ds,
            &arch,
            &lc,
            &NullLossConfig::default(),
            &RngKey::root(12),
        )
        .unwrap();
        assert!(
            (est.value - 1.0).abs() < 0.05,
            "null loss {} not within 0.05 of 1",
            est.value
        );
    }

    #[test]
    fn perfect_evaluator_gives_zero() {
        // Degenerate plumbing check: an evaluator frozen at the exact
        // target yields a zero estimate.
        let (ds, _, lc) = small_setup();
        let cfg = NullLossConfig {
            batch_size: 10,
            num_batches: 3,
        };
        let (value, means) =
            estimate_mean_loss(&ds, &lc, &cfg, &RngKey::root(13), |insts, _, _| {
                Ok(vec![0.0; insts.len()])
            })
            .unwrap();
        assert_eq!(value, 0.0);
        assert_eq!(means, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn doubling_batches_stays_within_three_standard_errors() {
        let (ds, arch, lc) = small_setup();
        let base = estimate_null_loss(
            &ds,
            &arch,
            &lc,
            &NullLossConfig {
                batch_size: 50,
                num_batches: 10,
            },
            &RngKey::root(14),
        )
        .unwrap();
        let doubled = estimate_null_loss(
            &ds,
            &arch,
            &lc,
            &NullLossConfig {
                batch_size: 50,
                num_batches: 20,
            },
            &RngKey::root(14),
        )
        .unwrap();
        let se = base.standard_error().max(1e-12);
        assert!(
            (base.value - doubled.value).abs() < 3.0 * se,
            "estimates {} vs {} differ by more than 3 SE ({se})",
            base.value,
            doubled.value
        );
    }
}
