//! Pretraining loop: AdamW, linear warmup, EMA weights.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::diffusion::arch::ArchConfig;
use crate::diffusion::loss::{self, LossConfig};
use crate::diffusion::noise;
use crate::diffusion::optim::{AdamW, AdamWConfig};
use crate::diffusion::params::DenoiserParams;
use crate::diffusion::snapshot::{ema_update, ModelSnapshot, Provenance, Role};
use crate::error::CoreError;
use crate::rng::RngKey;
use crate::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Nominal learning rate (the warmup target).
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub ema_momentum: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(CoreError::InvalidConfig("batch_size must be > 0".into()));
        }
        if self.lr <= 0.0 {
            return Err(CoreError::InvalidConfig("lr must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(CoreError::InvalidConfig(
                "ema_momentum must be in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Uniform sampling without replacement: one shuffled pass over the
/// dataset, reshuffled when exhausted.
pub struct ShuffleSampler {
    order: Vec<usize>,
    pos: usize,
}

impl ShuffleSampler {
    pub fn new(len: usize) -> Self {
        ShuffleSampler {
            order: (0..len).collect(),
            pos: len, // force an initial shuffle
        }
    }

    pub fn next<R: Rng>(&mut self, rng: &mut R) -> usize {
        if self.pos >= self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let idx = self.order[self.pos];
        self.pos += 1;
        idx
    }
}

pub struct PretrainOutput {
    /// Random-init snapshot (the null-performance reference weights).
    pub f0: ModelSnapshot,
    /// Raw final weights (no EMA).
    pub raw: ModelSnapshot,
    /// EMA weights: the pretrained model used everywhere downstream.
    pub f1: ModelSnapshot,
    /// Batch-mean training loss per step.
    pub loss_history: Vec<f64>,
}

/// Linear warmup to the nominal rate, constant afterwards.
fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_steps == 0 || step >= cfg.warmup_steps {
        cfg.lr
    } else {
        cfg.lr * (step + 1) as f64 / cfg.warmup_steps as f64
    }
}

/// Pretrain a denoiser from scratch. Deterministic for a given key.
pub fn pretrain(
    dataset: &Dataset,
    arch: &ArchConfig,
    lc: &LossConfig,
    cfg: &TrainConfig,
    key: &RngKey,
) -> Result<PretrainOutput> {
    if dataset.is_empty() {
        return Err(CoreError::EmptyInput("pretrain dataset".into()));
    }
    arch.validate()?;
    lc.validate()?;
    cfg.validate()?;

    let mut init_rng = key.child("init").rng();
    let mut batch_rng = key.child("batch").rng();
    let mut noise_rng = key.child("noise").rng();
    let mut drop_rng = key.child("dropout").rng();

    let params0 = DenoiserParams::init(arch, &mut init_rng);
    let f0 = ModelSnapshot::new(
        params0.clone(),
        arch.clone(),
        lc.clone(),
        Role::F0,
        Provenance {
            seed: key.hex(),
            steps: 0,
            ema: false,
        },
    )?;

    let mut params = params0;
    let mut ema = params.clone();
    let mut opt = AdamW::new(
        &params,
        AdamWConfig {
            weight_decay: cfg.weight_decay as f32,
            ..AdamWConfig::default()
        },
    );
    let mut sampler = ShuffleSampler::new(dataset.len());
    let mut history: Vec<f64> = Vec::with_capacity(cfg.steps);

    let d = arch.data_dim();
    let b = cfg.batch_size;
    for step in 0..cfg.steps {
        let idxs: Vec<usize> = (0..b).map(|_| sampler.next(&mut batch_rng)).collect();
        let mut xs = Array2::zeros((b, d));
        let mut conds = Vec::with_capacity(b);
        for (r, &i) in idxs.iter().enumerate() {
            xs.row_mut(r).assign(&dataset.instances[i].x);
            conds.push(&dataset.instances[i].c);
        }
        let mut cond = loss::encode_conditions(&conds, arch)?;
        if arch.cond_dropout > 0.0 {
            for mut row in cond.rows_mut() {
                if drop_rng.gen::<f64>() < arch.cond_dropout {
                    row.fill(0.0);
                }
            }
        }
        let mut sigmas = vec![0f32; b];
        let mut noises = Array2::zeros((b, d));
        for r in 0..b {
            sigmas[r] = noise::sample_sigma(lc, &mut noise_rng) as f32;
            for j in 0..d {
                noises[[r, j]] = noise_rng.sample::<f32, _>(rand_distr::StandardNormal);
            }
        }

        let fwd = loss::loss_forward(&params, arch, lc, &xs, &cond, &sigmas, &noises)?;
        let mean = fwd.mean();
        if !mean.is_finite() {
            let tail: Vec<f64> = history.iter().rev().take(100).rev().copied().collect();
            return Err(CoreError::Diverged { step, trace: tail });
        }
        history.push(mean);

        let mut grads = params.zeros_like();
        let w = vec![1.0f32 / b as f32; b];
        loss::loss_backward(&params, &fwd, &w, &mut grads);
        opt.step(&mut params, &grads, lr_at(step, cfg) as f32, None);
        ema_update(&mut ema, &params, cfg.ema_momentum as f32);
    }

    let raw = ModelSnapshot::new(
        params,
        arch.clone(),
        lc.clone(),
        Role::F1,
        Provenance {
            seed: key.hex(),
            steps: cfg.steps,
            ema: false,
        },
    )?;
    let f1 = ModelSnapshot::new(
        ema,
        arch.clone(),
        lc.clone(),
        Role::F1,
        Provenance {
            seed: key.hex(),
            steps: cfg.steps,
            ema: true,
        },
    )?;

    Ok(PretrainOutput {
        f0,
        raw,
        f1,
        loss_history: history,
    })
}
