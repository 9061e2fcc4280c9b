//! Training-time noise draws: log-normal sigma, standard-normal noise.

use ndarray::Array1;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffusion::loss::LossConfig;
use crate::error::CoreError;
use crate::Result;

/// One (sigma, n) draw. `n` has exactly the shape of a data item.
#[derive(Clone, Debug)]
pub struct NoiseDraw {
    pub sigma: f64,
    pub n: Array1<f32>,
}

/// Sample sigma from the training distribution: exp(p_mean + p_std * g).
pub fn sample_sigma<R: Rng>(lc: &LossConfig, rng: &mut R) -> f64 {
    let g: f64 = rng.sample(StandardNormal);
    (lc.p_mean + lc.p_std * g).exp()
}

/// Sample a standard-normal noise vector of data dimension `dim`.
pub fn sample_noise_vec<R: Rng>(dim: usize, rng: &mut R) -> Array1<f32> {
    Array1::from_shape_fn(dim, |_| rng.sample(StandardNormal))
}

/// `count` independent (sigma, n) draws from the training distributions.
pub fn sample_training_noise<R: Rng>(
    count: usize,
    dim: usize,
    lc: &LossConfig,
    rng: &mut R,
) -> Result<Vec<NoiseDraw>> {
    if count < 1 {
        return Err(CoreError::InvalidConfig(format!(
            "noise draw count must be >= 1, got {count}"
        )));
    }
    Ok((0..count)
        .map(|_| NoiseDraw {
            sigma: sample_sigma(lc, rng),
            n: sample_noise_vec(dim, rng),
        })
        .collect())
}
