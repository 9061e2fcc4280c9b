//! Bounded mirrored unlearning.
//!
//! Starting from the pretrained weights, the unlearner jointly minimizes a
//! fine-tuning loss on the training set and the negated (mirrored) loss of
//! the generated item, with two controls: the per-draw gradient-ascent loss
//! is clamped to the null loss, and updates stop once the clamped ascent
//! loss reaches a fraction of the null loss. Optimizer type and
//! hyperparameters are copied from pretraining, with a constant learning
//! rate one order of magnitude below the nominal value by default.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, GeneratedItem};
use crate::diffusion::loss::{self};
use crate::diffusion::noise;
use crate::diffusion::optim::{AdamW, AdamWConfig};
use crate::diffusion::snapshot::{ModelSnapshot, Provenance, Role};
use crate::diffusion::train::ShuffleSampler;
use crate::error::CoreError;
use crate::nullloss::NullLossEstimate;
use crate::rng::RngKey;
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamMask {
    MlpOnly,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlearnConfig {
    /// Ascent strength, constrained to (0, 1].
    pub lambda: f64,
    pub batch_size: usize,
    /// Stop once L_GA >= stop_fraction * L_null.
    pub stop_fraction: f64,
    /// Constant learning rate = lr_factor * nominal pretraining rate.
    pub lr_factor: f64,
    /// Safety cap on update steps (bootstrap value; the evaluation harness
    /// tightens it to 20x the running median of observed threshold stops).
    pub max_steps: usize,
    pub mask: ParamMask,
    /// Shift applied to p_mean when drawing sigma (ablation U-C2); 0 keeps
    /// the training distribution.
    pub sigma_shift: f64,
    /// When set, the clamp and the stop rule are disabled and exactly this
    /// many steps run (ablation U-C3).
    pub fixed_steps: Option<usize>,
}

impl UnlearnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(CoreError::InvalidConfig(format!(
                "lambda must be in (0, 1], got {}",
                self.lambda
            )));
        }
        if !(self.stop_fraction > 0.0 && self.stop_fraction < 1.0) {
            return Err(CoreError::InvalidConfig(format!(
                "stop_fraction must be in (0, 1), got {}",
                self.stop_fraction
            )));
        }
        if self.max_steps < 1 {
            return Err(CoreError::InvalidConfig("max_steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(CoreError::InvalidConfig("batch_size must be > 0".into()));
        }
        Ok(())
    }
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        UnlearnConfig {
            lambda: 0.2,
            batch_size: 100,
            stop_fraction: 0.95,
            lr_factor: 0.1,
            max_steps: 2000,
            mask: ParamMask::MlpOnly,
            sigma_shift: 0.0,
            fixed_steps: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Threshold,
    Cap,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlearnStep {
    pub l_ft: f64,
    pub l_ga: f64,
    pub l_mucs: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UnlearnTrace {
    pub mode: String,
    pub steps: Vec<UnlearnStep>,
    pub stop_reason: StopReason,
    /// The clamped ascent-loss estimate that triggered a threshold stop.
    pub stop_ga: Option<f64>,
    pub l_null: f64,
    pub threshold: f64,
}

impl UnlearnTrace {
    pub fn steps_executed(&self) -> usize {
        self.steps.len()
    }
}

/// Named ablation variants of the unlearning loop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnlearnVariant {
    Standard,
    Lambda(f64),
    SigmaShift(f64),
    FixedSteps(usize),
    MaskAll,
}

impl UnlearnVariant {
    /// Parse a mode string: "standard", "lambda=0.1", "sigma-shift=0.3",
    /// "fixed-steps=109", "mask-all".
    pub fn parse(mode: &str) -> Result<Self> {
        let known = || {
            vec![
                "standard".to_string(),
                "lambda=<f>".to_string(),
                "sigma-shift=<f>".to_string(),
                "fixed-steps=<n>".to_string(),
                "mask-all".to_string(),
            ]
        };
        if mode == "standard" {
            return Ok(UnlearnVariant::Standard);
        }
        if mode == "mask-all" {
            return Ok(UnlearnVariant::MaskAll);
        }
        if let Some(v) = mode.strip_prefix("lambda=") {
            let f: f64 = v.parse().map_err(|_| CoreError::UnknownName {
                kind: "unlearn mode",
                name: mode.into(),
                known: known(),
            })?;
            return Ok(UnlearnVariant::Lambda(f));
        }
        if let Some(v) = mode.strip_prefix("sigma-shift=") {
            let f: f64 = v.parse().map_err(|_| CoreError::UnknownName {
                kind: "unlearn mode",
                name: mode.into(),
                known: known(),
            })?;
            return Ok(UnlearnVariant::SigmaShift(f));
        }
        if let Some(v) = mode.strip_prefix("fixed-steps=") {
            let n: usize = v.parse().map_err(|_| CoreError::UnknownName {
                kind: "unlearn mode",
                name: mode.into(),
                known: known(),
            })?;
            return Ok(UnlearnVariant::FixedSteps(n));
        }
        Err(CoreError::UnknownName {
            kind: "unlearn mode",
            name: mode.into(),
            known: known(),
        })
    }

    pub fn label(&self) -> String {
        match self {
            UnlearnVariant::Standard => "standard".into(),
            UnlearnVariant::Lambda(l) => format!("lambda={l}"),
            UnlearnVariant::SigmaShift(s) => format!("sigma-shift={s}"),
            UnlearnVariant::FixedSteps(n) => format!("fixed-steps={n}"),
            UnlearnVariant::MaskAll => "mask-all".into(),
        }
    }

    /// Apply the single documented deviation to a base configuration.
    pub fn apply(&self, base: &UnlearnConfig) -> UnlearnConfig {
        let mut cfg = base.clone();
        match self {
            UnlearnVariant::Standard => {}
            UnlearnVariant::Lambda(l) => cfg.lambda = *l,
            UnlearnVariant::SigmaShift(s) => cfg.sigma_shift = *s,
            UnlearnVariant::FixedSteps(n) => cfg.fixed_steps = Some(*n),
            UnlearnVariant::MaskAll => cfg.mask = ParamMask::All,
        }
        cfg
    }
}

/// Produce the unlearned model F2 from F1 for one generated item.
pub fn unlearn(
    f1: &ModelSnapshot,
    item: &GeneratedItem,
    dataset: &Dataset,
    l_null: &NullLossEstimate,
    cfg: &UnlearnConfig,
    nominal_lr: f64,
    opt_cfg: AdamWConfig,
    key: &RngKey,
) -> Result<(ModelSnapshot, UnlearnTrace)> {
    cfg.validate()?;
    if f1.role() != Role::F1 {
        return Err(CoreError::InvalidConfig(format!(
            "unlearning must start from an F1 snapshot, got {:?}",
            f1.role()
        )));
    }
    if dataset.is_empty() {
        return Err(CoreError::EmptyInput("unlearning dataset".into()));
    }

    let arch = f1.arch().clone();
    let lc = f1.loss().clone();
    // Sigma sampling for both expectation estimates; the loss itself (and
    // its weighting) is unchanged by the shift ablation.
    let mut draw_lc = lc.clone();
    draw_lc.p_mean += cfg.sigma_shift;

    let b = cfg.batch_size;
    let d = arch.data_dim();
    let l_null_val = l_null.value;
    let threshold = cfg.stop_fraction * l_null_val;
    let lr = (cfg.lr_factor * nominal_lr) as f32;
    let mask_groups;
    let mask: Option<&[String]> = match cfg.mask {
        ParamMask::All => None,
        ParamMask::MlpOnly => {
            mask_groups = arch.mlp_groups();
            Some(&mask_groups)
        }
    };

    let mut params = f1.params().clone();
    let mut opt = AdamW::new(&params, opt_cfg);

    let mut ga_rng = key.child("ga-noise").rng();
    let mut ft_rng = key.child("ft-noise").rng();
    let mut batch_rng = key.child("ft-batch").rng();
    let mut sampler = ShuffleSampler::new(dataset.len());

    // Mirrored batch: the generated item repeated across the batch, with b
    // independent (sigma, n) draws. Conditioning dropout stays off.
    let xs_hat = loss::repeat_row(&item.x_hat, b);
    let cond_hat_row = loss::encode_conditions(&[&item.c_hat], &arch)?;
    let mut cond_hat = Array2::zeros((b, arch.cond_dim()));
    for mut row in cond_hat.rows_mut() {
        row.assign(&cond_hat_row.row(0));
    }

    let mut trace = UnlearnTrace {
        mode: "standard".into(),
        steps: Vec::new(),
        stop_reason: StopReason::Cap,
        stop_ga: None,
        l_null: l_null_val,
        threshold,
    };
    let dynamic = cfg.fixed_steps.is_none();
    let step_limit = cfg.fixed_steps.unwrap_or(cfg.max_steps);

    loop {
        if trace.steps.len() >= step_limit {
            trace.stop_reason = StopReason::Cap;
            break;
        }

        // Ascent term: per-draw clamp to L_null; clamped draws contribute
        // no gradient.
        let mut sigmas = vec![0f32; b];
        let mut noises = Array2::zeros((b, d));
        for r in 0..b {
            sigmas[r] = noise::sample_sigma(&draw_lc, &mut ga_rng) as f32;
            noises
                .row_mut(r)
                .assign(&noise::sample_noise_vec(d, &mut ga_rng));
        }
        let fwd_ga = loss::loss_forward(&params, &arch, &lc, &xs_hat, &cond_hat, &sigmas, &noises)?;
        let mut ga_weights = vec![0f32; b];
        let mut l_ga_sum = 0f64;
        for (i, l) in fwd_ga.losses.iter().enumerate() {
            let l = *l as f64;
            if dynamic {
                if l < l_null_val {
                    l_ga_sum += l;
                    ga_weights[i] = -(cfg.lambda as f32) / b as f32;
                } else {
                    l_ga_sum += l_null_val;
                }
            } else {
                l_ga_sum += l;
                ga_weights[i] = -(cfg.lambda as f32) / b as f32;
            }
        }
        let l_ga = l_ga_sum / b as f64;

        if dynamic && l_ga >= threshold {
            trace.stop_reason = StopReason::Threshold;
            trace.stop_ga = Some(l_ga);
            break;
        }

        // Retention term: fine-tune on the training set.
        let idxs: Vec<usize> = (0..b).map(|_| sampler.next(&mut batch_rng)).collect();
        let mut xs = Array2::zeros((b, d));
        let mut conds = Vec::with_capacity(b);
        for (r, &i) in idxs.iter().enumerate() {
            xs.row_mut(r).assign(&dataset.instances[i].x);
            conds.push(&dataset.instances[i].c);
        }
        let cond_ft = loss::encode_conditions(&conds, &arch)?;
        let mut ft_sigmas = vec![0f32; b];
        let mut ft_noises = Array2::zeros((b, d));
        for r in 0..b {
            ft_sigmas[r] = noise::sample_sigma(&draw_lc, &mut ft_rng) as f32;
            ft_noises
                .row_mut(r)
                .assign(&noise::sample_noise_vec(d, &mut ft_rng));
        }
        let fwd_ft =
            loss::loss_forward(&params, &arch, &lc, &xs, &cond_ft, &ft_sigmas, &ft_noises)?;
        let l_ft = fwd_ft.mean();
        let l_mucs = l_ft - cfg.lambda * l_ga;

        if !l_mucs.is_finite() {
            let tail: Vec<f64> = trace.steps.iter().rev().take(100).rev().map(|s| s.l_mucs).collect();
            return Err(CoreError::UnlearnDiverged {
                run: item.id.clone(),
                step: trace.steps.len(),
                trace: tail,
            });
        }

        let mut grads = params.zeros_like();
        let ft_weights = vec![1.0f32 / b as f32; b];
        loss::loss_backward(&params, &fwd_ft, &ft_weights, &mut grads);
        loss::loss_backward(&params, &fwd_ga, &ga_weights, &mut grads);
        opt.step(&mut params, &grads, lr, mask);

        trace.steps.push(UnlearnStep { l_ft, l_ga, l_mucs });
    }

    let f2 = ModelSnapshot::new(
        params,
        arch,
        lc,
        Role::F2,
        Provenance {
            seed: key.hex(),
            steps: trace.steps.len(),
            ema: false,
        },
    )?;
    Ok((f2, trace))
}

/// Run one named ablation variant of the unlearning loop.
pub fn unlearn_variant(
    mode: &str,
    f1: &ModelSnapshot,
    item: &GeneratedItem,
    dataset: &Dataset,
    l_null: &NullLossEstimate,
    base: &UnlearnConfig,
    nominal_lr: f64,
    opt_cfg: AdamWConfig,
    key: &RngKey,
) -> Result<(ModelSnapshot, UnlearnTrace)> {
    let variant = UnlearnVariant::parse(mode)?;
    let cfg = variant.apply(base);
    let (f2, mut trace) = unlearn(f1, item, dataset, l_null, &cfg, nominal_lr, opt_cfg, key)?;
    trace.mode = variant.label();
    Ok((f2, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_parsing() {
        assert_eq!(
            UnlearnVariant::parse("standard").unwrap(),
            UnlearnVariant::Standard
        );
        assert_eq!(
            UnlearnVariant::parse("lambda=0.1").unwrap(),
            UnlearnVariant::Lambda(0.1)
        );
        assert_eq!(
            UnlearnVariant::parse("fixed-steps=109").unwrap(),
            UnlearnVariant::FixedSteps(109)
        );
        assert_eq!(
            UnlearnVariant::parse("sigma-shift=0.3").unwrap(),
            UnlearnVariant::SigmaShift(0.3)
        );
        assert_eq!(
            UnlearnVariant::parse("mask-all").unwrap(),
            UnlearnVariant::MaskAll
        );
        assert!(UnlearnVariant::parse("bogus").is_err());
    }

    #[test]
    fn variant_application_is_single_deviation() {
        let base = UnlearnConfig::default();
        let v = UnlearnVariant::Lambda(0.1).apply(&base);
        assert_eq!(v.lambda, 0.1);
        assert_eq!(v.mask, base.mask);
        assert_eq!(v.fixed_steps, None);
        let f = UnlearnVariant::FixedSteps(7).apply(&base);
        assert_eq!(f.fixed_steps, Some(7));
        assert_eq!(f.lambda, base.lambda);
    }

    #[test]
    fn config_validation() {
        let mut cfg = UnlearnConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.lambda = 0.0;
        assert!(cfg.validate().is_err());
        cfg.lambda = 1.5;
        assert!(cfg.validate().is_err());
        cfg.lambda = 1.0;
        assert!(cfg.validate().is_ok());
        cfg.stop_fraction = 1.0;
        assert!(cfg.validate().is_err());
    }
}
