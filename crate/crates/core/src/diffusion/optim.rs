//! AdamW over the named parameter registry, with group masking.

use crate::diffusion::params::DenoiserParams;

#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

pub struct AdamW {
    cfg: AdamWConfig,
    m: DenoiserParams,
    v: DenoiserParams,
    step: usize,
}

impl AdamW {
    pub fn new(template: &DenoiserParams, cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            m: template.zeros_like(),
            v: template.zeros_like(),
            step: 0,
        }
    }

    /// One decoupled-weight-decay Adam step. Only parameters whose group is
    /// in `mask` (or all, when `mask` is `None`) are updated; moments of
    /// masked-out parameters are untouched.
    pub fn step(
        &mut self,
        params: &mut DenoiserParams,
        grads: &DenoiserParams,
        lr: f32,
        mask: Option<&[String]>,
    ) {
        self.step += 1;
        let t = self.step as f32;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);

        let gs = grads.entries();
        let mut ms = self.m.entries_mut();
        let mut vs = self.v.entries_mut();
        for (((p, g), m), v) in params
            .entries_mut()
            .iter_mut()
            .zip(gs.iter())
            .zip(ms.iter_mut())
            .zip(vs.iter_mut())
        {
            debug_assert_eq!(p.name, g.name);
            if let Some(groups) = mask {
                if !groups.contains(&p.group) {
                    continue;
                }
            }
            for i in 0..p.data.len() {
                let grad = g.data[i];
                m.data[i] = b1 * m.data[i] + (1.0 - b1) * grad;
                v.data[i] = b2 * v.data[i] + (1.0 - b2) * grad * grad;
                let m_hat = m.data[i] / bc1;
                let v_hat = v.data[i] / bc2;
                p.data[i] -= lr * (m_hat / (v_hat.sqrt() + self.cfg.eps)
                    + self.cfg.weight_decay * p.data[i]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::arch::{ArchConfig, Conditioning, ImageShape};
    use crate::rng::RngKey;

    fn arch() -> ArchConfig {
        ArchConfig {
            input_shape: ImageShape {
                channels: 1,
                height: 2,
                width: 2,
            },
            d_model: 4,
            mlp_hidden: 4,
            dec_hidden: 4,
            blocks: 1,
            conditioning: Conditioning::None,
            cond_dropout: 0.0,
        }
    }

    #[test]
    fn masked_groups_never_move() {
        let a = arch();
        let mut params = DenoiserParams::init(&a, &mut RngKey::root(1).rng());
        let before = params.clone();
        let mut grads = params.zeros_like();
        for e in grads.entries_mut() {
            e.data.fill(1.0);
        }
        let mut opt = AdamW::new(&params, AdamWConfig::default());
        let mask = a.mlp_groups();
        for _ in 0..3 {
            opt.step(&mut params, &grads, 1e-2, Some(&mask));
        }
        assert!(params.groups_bit_identical(
            &before,
            &["encoder".to_string(), "decoder".to_string()]
        ));
        assert!(!params.groups_bit_identical(&before, &mask));
    }

    #[test]
    fn unmasked_step_moves_all_groups_with_nonzero_grads() {
        let a = arch();
        let mut params = DenoiserParams::init(&a, &mut RngKey::root(2).rng());
        // Perturb biases so weight decay alone cannot explain movement.
        let before = params.clone();
        let mut grads = params.zeros_like();
        for e in grads.entries_mut() {
            e.data.fill(0.5);
        }
        let mut opt = AdamW::new(&params, AdamWConfig::default());
        opt.step(&mut params, &grads, 1e-2, None);
        for (b, p) in before.entries().iter().zip(params.entries().iter()) {
            assert!(
                b.data.iter().zip(p.data.iter()).any(|(x, y)| x != y),
                "group {} did not move",
                p.group
            );
        }
    }
}
