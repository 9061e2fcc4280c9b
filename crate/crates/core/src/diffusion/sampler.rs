//! Deterministic second-order Heun sampling with classifier-free guidance.
//!
//! The sampler is a pure function of (snapshot, seed, condition, schedule,
//! guidance weight): the seed fixes the initial latent and nothing else is
//! stochastic.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::GeneratedItem;
use crate::diffusion::arch::Condition;
use crate::diffusion::loss::encode_conditions;
use crate::diffusion::schedule::GenerationSchedule;
use crate::diffusion::snapshot::{ModelSnapshot, Role};
use crate::error::CoreError;
use crate::rng::rng_from_u64;
use crate::Result;

/// Guided denoise at one sigma. With guidance weight w:
/// D = D_null + w * (D_cond - D_null); w == 1 short-circuits to the plain
/// conditional prediction so guidance is an exact no-op.
fn denoise_guided(
    model: &ModelSnapshot,
    x: &Array1<f32>,
    sigma: f64,
    cond_row: &Array2<f32>,
    null_row: &Array2<f32>,
    cfg_weight: Option<f64>,
) -> Array1<f32> {
    let xs = x.view().insert_axis(ndarray::Axis(0)).to_owned();
    match cfg_weight {
        None => model.denoise_batch(&xs, sigma, cond_row).row(0).to_owned(),
        Some(w) if w == 1.0 => model.denoise_batch(&xs, sigma, cond_row).row(0).to_owned(),
        Some(w) => {
            let w = w as f32;
            // Two-row batch: conditional first, null second.
            let mut both = Array2::zeros((2, x.len()));
            both.row_mut(0).assign(x);
            both.row_mut(1).assign(x);
            let mut cond2 = Array2::zeros((2, cond_row.ncols()));
            cond2.row_mut(0).assign(&cond_row.row(0));
            cond2.row_mut(1).assign(&null_row.row(0));
            let d = model.denoise_batch(&both, sigma, &cond2);
            let d_cond = d.row(0);
            let d_null = d.row(1);
            Array1::from_shape_fn(x.len(), |j| d_null[j] + w * (d_cond[j] - d_null[j]))
        }
    }
}

/// Generate one item deterministically.
///
/// The returned item's id encodes the seed; callers may re-label it.
pub fn generate(
    model: &ModelSnapshot,
    seed: u64,
    condition: &Condition,
    schedule: &GenerationSchedule,
    cfg_weight: Option<f64>,
) -> Result<GeneratedItem> {
    if model.role() == Role::F0 {
        return Err(CoreError::InvalidConfig(
            "cannot generate from a random-init (F0) snapshot".into(),
        ));
    }
    let arch = model.arch();
    if cfg_weight.is_some() && !arch.conditioning.is_conditional() {
        return Err(CoreError::InvalidConfig(
            "guidance weight supplied for an unconditional model".into(),
        ));
    }
    let cond_row = encode_conditions(&[condition], arch)?;
    let null_row = Array2::zeros((1, arch.cond_dim()));

    let d = arch.data_dim();
    let mut rng = rng_from_u64(seed);
    let mut x: Array1<f32> = Array1::from_shape_fn(d, |_| {
        let g: f32 = rng.sample(StandardNormal);
        g * schedule.values[0] as f32
    });

    let sigmas = &schedule.values;
    for i in 0..sigmas.len() - 1 {
        let (s_cur, s_next) = (sigmas[i], sigmas[i + 1]);
        let dt = (s_next - s_cur) as f32;
        let den = denoise_guided(model, &x, s_cur, &cond_row, &null_row, cfg_weight);
        let d1 = (&x - &den) / s_cur as f32;
        let x_euler = &x + &(&d1 * dt);
        let den2 = denoise_guided(model, &x_euler, s_next, &cond_row, &null_row, cfg_weight);
        let d2 = (&x_euler - &den2) / s_next as f32;
        x = &x + &((&d1 + &d2) * (dt / 2.0));
    }
    // Final denoise from sigma_min to 0 (Euler step to the clean estimate).
    let s_last = *sigmas.last().expect("schedule non-empty");
    let mut out = denoise_guided(model, &x, s_last, &cond_row, &null_row, cfg_weight);
    out.mapv_inplace(|v| v.clamp(-1.0, 1.0));

    Ok(GeneratedItem {
        id: format!("gen-{seed:016x}"),
        x_hat: out,
        c_hat: condition.clone(),
        seed,
        source: model.fingerprint().to_string(),
    })
}
