//! Diffusion loss variants.
//!
//! The loss implements the diffusion variant: the calibrated EDM target
//! reconstruction with its sigma-dependent weighting, or the DDPM noise
//! prediction alternative. Per-sample losses are means over data
//! dimensions, the same reduction everywhere in the pipeline so null-loss
//! comparisons stay scale-consistent.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::diffusion::arch::{ArchConfig, Condition};
use crate::diffusion::network::{self, ForwardCache};
use crate::diffusion::noise::NoiseDraw;
use crate::diffusion::params::DenoiserParams;
use crate::diffusion::snapshot::ModelSnapshot;
use crate::data::TrainingInstance;
use crate::error::CoreError;
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossVariant {
    Edm,
    Ddpm,
}

/// Loss configuration: variant, sigma sampling parameters, and the active
/// weighting function identifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub variant: LossVariant,
    /// Log-normal sigma sampling: sigma = exp(p_mean + p_std * g).
    pub p_mean: f64,
    pub p_std: f64,
    pub sigma_data: f64,
    /// Weighting identifier: "edm" or "unit" for the EDM variant,
    /// "vp" (alpha(sigma) = 1/(1+sigma^2)) for DDPM.
    pub weighting: String,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p_std <= 0.0 {
            return Err(CoreError::InvalidConfig(format!(
                "p_std must be > 0, got {}",
                self.p_std
            )));
        }
        if self.sigma_data <= 0.0 {
            return Err(CoreError::InvalidConfig(format!(
                "sigma_data must be > 0, got {}",
                self.sigma_data
            )));
        }
        let ok = match self.variant {
            LossVariant::Edm => matches!(self.weighting.as_str(), "edm" | "unit"),
            LossVariant::Ddpm => self.weighting == "vp",
        };
        if !ok {
            return Err(CoreError::InvalidConfig(format!(
                "weighting '{}' not valid for {:?}",
                self.weighting, self.variant
            )));
        }
        Ok(())
    }

    /// EDM weighting omega(sigma); 1 for "unit".
    pub fn edm_weight(&self, sigma: f64) -> f64 {
        match self.weighting.as_str() {
            "edm" => {
                let sd = self.sigma_data;
                (sigma * sigma + sd * sd) / (sigma * sd).powi(2)
            }
            _ => 1.0,
        }
    }
}

/// Encode a slice of conditions into the network's condition matrix.
pub fn encode_conditions(conds: &[&Condition], arch: &ArchConfig) -> Result<Array2<f32>> {
    let mut m = Array2::zeros((conds.len(), arch.cond_dim()));
    for (r, c) in conds.iter().enumerate() {
        let v = c.encode(&arch.conditioning)?;
        for (j, val) in v.iter().enumerate() {
            m[[r, j]] = *val;
        }
    }
    Ok(m)
}

/// Forward state of one batched loss evaluation.
pub struct LossForward {
    /// Per-sample losses, no reduction over the batch axis.
    pub losses: Vec<f32>,
    sigmas: Vec<f32>,
    resid: Array2<f32>,
    row_factor: Vec<f32>,
    cache: ForwardCache,
}

impl LossForward {
    /// Error out on the first non-finite per-sample loss.
    pub fn check_finite(&self) -> Result<()> {
        for (l, s) in self.losses.iter().zip(&self.sigmas) {
            if !l.is_finite() {
                return Err(CoreError::NonFiniteLoss { sigma: *s as f64 });
            }
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.losses.iter().map(|l| *l as f64).sum::<f64>() / self.losses.len() as f64
    }
}

/// Batched per-sample diffusion loss.
///
/// Rows of `xs`/`noises` are clean data and standard-normal noise; `sigmas`
/// are per-row noise scales; `cond` is the encoded condition matrix (zero
/// rows act as the null condition).
pub fn loss_forward(
    params: &DenoiserParams,
    arch: &ArchConfig,
    lc: &LossConfig,
    xs: &Array2<f32>,
    cond: &Array2<f32>,
    sigmas: &[f32],
    noises: &Array2<f32>,
) -> Result<LossForward> {
    let batch = xs.nrows();
    let d = arch.data_dim();
    if xs.ncols() != d || noises.ncols() != d || noises.nrows() != batch {
        return Err(CoreError::ShapeMismatch {
            expected: format!("batch x {d} data and noise"),
            got: format!("{:?} and {:?}", xs.shape(), noises.shape()),
        });
    }
    if sigmas.len() != batch || cond.nrows() != batch {
        return Err(CoreError::ShapeMismatch {
            expected: format!("{batch} sigmas/conditions"),
            got: format!("{} sigmas, {} conditions", sigmas.len(), cond.nrows()),
        });
    }

    let inv_d = 1.0 / d as f32;
    let c_noise: Vec<f32> = sigmas.iter().map(|s| network::c_noise_of(*s)).collect();

    match lc.variant {
        LossVariant::Edm => {
            let sd = lc.sigma_data as f32;
            let mut x_net = Array2::zeros((batch, d));
            let mut x_noisy = Array2::zeros((batch, d));
            let mut c_skip = vec![0f32; batch];
            let mut c_out = vec![0f32; batch];
            for b in 0..batch {
                let s = sigmas[b];
                let den = s * s + sd * sd;
                let ci = 1.0 / den.sqrt();
                c_skip[b] = sd * sd / den;
                c_out[b] = s * sd / den.sqrt();
                for j in 0..d {
                    let noisy = xs[[b, j]] + s * noises[[b, j]];
                    x_noisy[[b, j]] = noisy;
                    x_net[[b, j]] = ci * noisy;
                }
            }
            let (out, cache) = network::forward(params, arch, x_net, &c_noise, cond);
            let mut resid = out;
            let mut losses = vec![0f32; batch];
            let mut row_factor = vec![0f32; batch];
            for b in 0..batch {
                let w = lc.edm_weight(sigmas[b] as f64) as f32;
                let mut acc = 0f32;
                for j in 0..d {
                    let r = c_skip[b] * x_noisy[[b, j]] + c_out[b] * resid[[b, j]] - xs[[b, j]];
                    resid[[b, j]] = r;
                    acc += r * r;
                }
                losses[b] = w * acc * inv_d;
                row_factor[b] = w * 2.0 * inv_d * c_out[b];
            }
            Ok(LossForward {
                losses,
                sigmas: sigmas.to_vec(),
                resid,
                row_factor,
                cache,
            })
        }
        LossVariant::Ddpm => {
            let mut x_in = Array2::zeros((batch, d));
            for b in 0..batch {
                let s = sigmas[b];
                let abar = 1.0 / (1.0 + s * s);
                let (ca, cb) = (abar.sqrt(), (1.0 - abar).sqrt());
                for j in 0..d {
                    x_in[[b, j]] = ca * xs[[b, j]] + cb * noises[[b, j]];
                }
            }
            let (out, cache) = network::forward(params, arch, x_in, &c_noise, cond);
            let mut resid = out;
            let mut losses = vec![0f32; batch];
            let mut row_factor = vec![0f32; batch];
            for b in 0..batch {
                let mut acc = 0f32;
                for j in 0..d {
                    let r = resid[[b, j]] - noises[[b, j]];
                    resid[[b, j]] = r;
                    acc += r * r;
                }
                losses[b] = acc * inv_d;
                row_factor[b] = 2.0 * inv_d;
            }
            Ok(LossForward {
                losses,
                sigmas: sigmas.to_vec(),
                resid,
                row_factor,
                cache,
            })
        }
    }
}

/// Accumulate d(sum_b weights[b] * loss_b)/d(params) into `grads`.
pub fn loss_backward(
    params: &DenoiserParams,
    fwd: &LossForward,
    weights: &[f32],
    grads: &mut DenoiserParams,
) {
    debug_assert_eq!(weights.len(), fwd.losses.len());
    let mut g_out = fwd.resid.clone();
    for (b, mut row) in g_out.rows_mut().into_iter().enumerate() {
        let f = fwd.row_factor[b] * weights[b];
        row.mapv_inplace(|v| v * f);
    }
    network::backward(params, &fwd.cache, &g_out, grads);
}

/// Weighted squared-error loss of a single (instance, sigma, noise) triple
/// under one snapshot. No reduction over any batch axis.
pub fn diffusion_loss(
    instance: &TrainingInstance,
    draw: &NoiseDraw,
    model: &ModelSnapshot,
) -> Result<f64> {
    let arch = model.arch();
    let d = arch.data_dim();
    if instance.x.len() != d {
        return Err(CoreError::ShapeMismatch {
            expected: format!("data dim {d}"),
            got: format!("instance dim {}", instance.x.len()),
        });
    }
    if draw.n.len() != d {
        return Err(CoreError::ShapeMismatch {
            expected: format!("noise dim {d}"),
            got: format!("noise dim {}", draw.n.len()),
        });
    }
    let xs = instance
        .x
        .view()
        .insert_axis(ndarray::Axis(0))
        .to_owned();
    let noises = draw.n.view().insert_axis(ndarray::Axis(0)).to_owned();
    let cond = encode_conditions(&[&instance.c], arch)?;
    let fwd = loss_forward(
        model.params(),
        arch,
        model.loss(),
        &xs,
        &cond,
        &[draw.sigma as f32],
        &noises,
    )?;
    fwd.check_finite()?;
    Ok(fwd.losses[0] as f64)
}

/// Stack instance rows into a batch matrix.
pub fn stack_rows(rows: &[&Array1<f32>]) -> Array2<f32> {
    let d = rows.first().map(|r| r.len()).unwrap_or(0);
    let mut m = Array2::zeros((rows.len(), d));
    for (i, r) in rows.iter().enumerate() {
        m.row_mut(i).assign(r);
    }
    m
}

/// Repeat one row into a batch matrix.
pub fn repeat_row(row: &Array1<f32>, count: usize) -> Array2<f32> {
    let mut m = Array2::zeros((count, row.len()));
    for i in 0..count {
        m.row_mut(i).assign(row);
    }
    m
}
