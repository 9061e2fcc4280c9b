//! MUCS as a registry strategy, plus every single-deviation ablation
//! variant as its own named strategy.

use serde::{Deserialize, Serialize};

use crate::diffusion::optim::AdamWConfig;
use crate::methods::{AttributionContext, AttributionResult, AttributionStrategy};
use crate::records::hash_json;
use crate::score::{score_variant, ScoreConfig, ScoreMode};
use crate::unlearn::{unlearn, UnlearnConfig, UnlearnVariant};
use crate::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MucsMethodConfig {
    pub unlearn: UnlearnConfig,
    pub score: ScoreConfig,
    /// Deviations used by the ablation variants.
    pub u_lambda_low: f64,
    pub u_lambda_high: f64,
    pub u_sigma_shift: f64,
    pub u_fixed_steps: usize,
    /// Optimizer hyperparameters copied from pretraining.
    pub adamw_weight_decay: f64,
}

impl Default for MucsMethodConfig {
    fn default() -> Self {
        MucsMethodConfig {
            unlearn: UnlearnConfig::default(),
            score: ScoreConfig::default(),
            u_lambda_low: 0.1,
            u_lambda_high: 0.3,
            u_sigma_shift: 0.3,
            u_fixed_steps: 109,
            adamw_weight_decay: 0.01,
        }
    }
}

/// The method and its ablation rows, one deviation each. U-variants change
/// the unlearning loop, S-variants change the scoring step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MucsVariant {
    Standard,
    ULambdaLow,
    ULambdaHigh,
    USigmaShift,
    UFixedSteps,
    UMaskAll,
    SSubtraction,
    SNonConsistent,
    SFullSchedule,
    STrainingSigma,
}

impl MucsVariant {
    pub fn all() -> Vec<MucsVariant> {
        vec![
            MucsVariant::Standard,
            MucsVariant::ULambdaLow,
            MucsVariant::ULambdaHigh,
            MucsVariant::USigmaShift,
            MucsVariant::UFixedSteps,
            MucsVariant::UMaskAll,
            MucsVariant::SSubtraction,
            MucsVariant::SNonConsistent,
            MucsVariant::SFullSchedule,
            MucsVariant::STrainingSigma,
        ]
    }

    pub fn method_name(&self) -> &'static str {
        match self {
            MucsVariant::Standard => "mucs",
            MucsVariant::ULambdaLow => "mucs/u-c1-low",
            MucsVariant::ULambdaHigh => "mucs/u-c1-high",
            MucsVariant::USigmaShift => "mucs/u-c2",
            MucsVariant::UFixedSteps => "mucs/u-c3",
            MucsVariant::UMaskAll => "mucs/u-c4",
            MucsVariant::SSubtraction => "mucs/s-c1",
            MucsVariant::SNonConsistent => "mucs/s-c2",
            MucsVariant::SFullSchedule => "mucs/s-c3-full",
            MucsVariant::STrainingSigma => "mucs/s-c3-train",
        }
    }

    fn unlearn_variant(&self, cfg: &MucsMethodConfig) -> UnlearnVariant {
        match self {
            MucsVariant::ULambdaLow => UnlearnVariant::Lambda(cfg.u_lambda_low),
            MucsVariant::ULambdaHigh => UnlearnVariant::Lambda(cfg.u_lambda_high),
            MucsVariant::USigmaShift => UnlearnVariant::SigmaShift(cfg.u_sigma_shift),
            MucsVariant::UFixedSteps => UnlearnVariant::FixedSteps(cfg.u_fixed_steps),
            MucsVariant::UMaskAll => UnlearnVariant::MaskAll,
            _ => UnlearnVariant::Standard,
        }
    }

    fn score_mode(&self) -> ScoreMode {
        match self {
            MucsVariant::SSubtraction => ScoreMode::Subtraction,
            MucsVariant::SNonConsistent => ScoreMode::NonConsistent,
            MucsVariant::SFullSchedule => ScoreMode::FullSchedule,
            MucsVariant::STrainingSigma => ScoreMode::SigmaTrain,
            _ => ScoreMode::Skew,
        }
    }
}

pub struct MucsMethod {
    pub cfg: MucsMethodConfig,
    pub variant: MucsVariant,
}

impl AttributionStrategy for MucsMethod {
    fn name(&self) -> &str {
        self.variant.method_name()
    }

    fn attribute(&self, ctx: &AttributionContext<'_>) -> Result<AttributionResult> {
        // Unlearn (or reuse the cached F2 for this exact configuration).
        let uvariant = self.variant.unlearn_variant(&self.cfg);
        let mut ucfg = uvariant.apply(&self.cfg.unlearn);
        ucfg.max_steps = ctx.cap.current_cap(self.cfg.unlearn.max_steps);
        let cfg_hash = hash_json(&(&ctx.item.id, &ucfg));
        let unlearn_key = ctx.shared_key.child("unlearn").child(&cfg_hash);
        let opt_cfg = AdamWConfig {
            weight_decay: self.cfg.adamw_weight_decay as f32,
            ..AdamWConfig::default()
        };
        let (f2, _trace) = ctx.unlearn_cache.get_or_try_insert(&cfg_hash, || {
            let (f2, mut trace) = unlearn(
                ctx.f1,
                ctx.item,
                ctx.dataset,
                ctx.l_null,
                &ucfg,
                ctx.nominal_lr,
                opt_cfg,
                &unlearn_key,
            )?;
            trace.mode = uvariant.label();
            if trace.stop_reason == crate::unlearn::StopReason::Threshold {
                ctx.cap.record_threshold_stop(trace.steps_executed());
            }
            Ok((f2, trace))
        })?;

        // Score; consistent pair sets derive from the method-agnostic key so
        // variants differ only in their documented deviation.
        let mut result = score_variant(
            ctx.dataset,
            ctx.item,
            ctx.f1,
            &f2,
            self.variant.score_mode(),
            &self.cfg.score,
            &ctx.shared_key.child("score"),
        )?;
        result.method = self.variant.method_name().to_string();
        Ok(result)
    }
}
