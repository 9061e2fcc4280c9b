//! Named denoiser parameters.
//!
//! Parameters live in typed fields for the forward/backward pass but expose
//! a flat named registry (name, group, shape, data) for the optimizer,
//! masking, checkpoints, and bit-exact comparisons. Registry order is fixed
//! by construction, so positional zips across parameter sets are safe.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffusion::arch::ArchConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub w1: Array2<f32>,
    pub b1: Array1<f32>,
    pub w2: Array2<f32>,
    pub b2: Array1<f32>,
    /// Conditioning modulation: maps the embedding to per-channel
    /// (scale, shift) of the block input. Zero-initialized so modulation
    /// starts as the identity.
    pub film_w: Array2<f32>,
    pub film_b: Array1<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    pub enc_w: Array2<f32>,
    pub enc_b: Array1<f32>,
    pub cond_w1: Array2<f32>,
    pub cond_b1: Array1<f32>,
    pub cond_w2: Array2<f32>,
    pub cond_b2: Array1<f32>,
    pub blocks: Vec<BlockParams>,
    pub dec_w1: Array2<f32>,
    pub dec_b1: Array1<f32>,
    pub dec_w2: Array2<f32>,
    pub dec_b2: Array1<f32>,
}

/// One entry of the parameter registry.
pub struct ParamEntry<'a> {
    pub name: String,
    pub group: String,
    pub shape: Vec<usize>,
    pub data: &'a [f32],
}

/// Mutable registry entry.
pub struct ParamEntryMut<'a> {
    pub name: String,
    pub group: String,
    pub data: &'a mut [f32],
}

fn mat<'a>(name: &str, group: &str, a: &'a Array2<f32>) -> ParamEntry<'a> {
    ParamEntry {
        name: name.to_string(),
        group: group.to_string(),
        shape: a.shape().to_vec(),
        data: a.as_slice().expect("params are contiguous"),
    }
}

fn vec1<'a>(name: &str, group: &str, a: &'a Array1<f32>) -> ParamEntry<'a> {
    ParamEntry {
        name: name.to_string(),
        group: group.to_string(),
        shape: a.shape().to_vec(),
        data: a.as_slice().expect("params are contiguous"),
    }
}

fn mat_mut<'a>(name: &str, group: &str, a: &'a mut Array2<f32>) -> ParamEntryMut<'a> {
    ParamEntryMut {
        name: name.to_string(),
        group: group.to_string(),
        data: a.as_slice_mut().expect("params are contiguous"),
    }
}

fn vec1_mut<'a>(name: &str, group: &str, a: &'a mut Array1<f32>) -> ParamEntryMut<'a> {
    ParamEntryMut {
        name: name.to_string(),
        group: group.to_string(),
        data: a.as_slice_mut().expect("params are contiguous"),
    }
}

fn randn2<R: Rng>(rows: usize, cols: usize, scale: f32, rng: &mut R) -> Array2<f32> {
    Array2::from_shape_fn((rows, cols), |_| {
        let g: f32 = rng.sample(StandardNormal);
        g * scale
    })
}

impl DenoiserParams {
    /// Random initialization: 1/sqrt(fan-in) normal weights, zero biases,
    /// and a zero-initialized decoder so the freshly initialized network
    /// predicts exactly zero (the calibrated-loss null model).
    pub fn init<R: Rng>(arch: &ArchConfig, rng: &mut R) -> Self {
        let d = arch.data_dim();
        let m = arch.d_model;
        let h = arch.mlp_hidden;
        let dh = arch.dec_hidden;
        let ci = arch.cond_in_dim();

        DenoiserParams {
            enc_w: randn2(d, m, 1.0 / (d as f32).sqrt(), rng),
            enc_b: Array1::zeros(m),
            cond_w1: randn2(ci, m, 1.0 / (ci as f32).sqrt(), rng),
            cond_b1: Array1::zeros(m),
            cond_w2: randn2(m, m, 1.0 / (m as f32).sqrt(), rng),
            cond_b2: Array1::zeros(m),
            blocks: (0..arch.blocks)
                .map(|_| BlockParams {
                    w1: randn2(m, h, 1.0 / (m as f32).sqrt(), rng),
                    b1: Array1::zeros(h),
                    w2: randn2(h, m, 1.0 / (h as f32).sqrt(), rng),
                    b2: Array1::zeros(m),
                    film_w: Array2::zeros((m, 2 * m)),
                    film_b: Array1::zeros(2 * m),
                })
                .collect(),
            dec_w1: randn2(m + d, dh, 1.0 / ((m + d) as f32).sqrt(), rng),
            dec_b1: Array1::zeros(dh),
            dec_w2: Array2::zeros((dh, d)),
            dec_b2: Array1::zeros(d),
        }
    }

    pub fn zeros(arch: &ArchConfig) -> Self {
        let d = arch.data_dim();
        let m = arch.d_model;
        let h = arch.mlp_hidden;
        let dh = arch.dec_hidden;
        let ci = arch.cond_in_dim();
        DenoiserParams {
            enc_w: Array2::zeros((d, m)),
            enc_b: Array1::zeros(m),
            cond_w1: Array2::zeros((ci, m)),
            cond_b1: Array1::zeros(m),
            cond_w2: Array2::zeros((m, m)),
            cond_b2: Array1::zeros(m),
            blocks: (0..arch.blocks)
                .map(|_| BlockParams {
                    w1: Array2::zeros((m, h)),
                    b1: Array1::zeros(h),
                    w2: Array2::zeros((h, m)),
                    b2: Array1::zeros(m),
                    film_w: Array2::zeros((m, 2 * m)),
                    film_b: Array1::zeros(2 * m),
                })
                .collect(),
            dec_w1: Array2::zeros((m + d, dh)),
            dec_b1: Array1::zeros(dh),
            dec_w2: Array2::zeros((dh, d)),
            dec_b2: Array1::zeros(d),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for e in z.entries_mut() {
            e.data.fill(0.0);
        }
        z
    }

    /// Immutable registry view, in fixed order.
    pub fn entries(&self) -> Vec<ParamEntry<'_>> {
        let mut v = vec![
            mat("enc_w", "encoder", &self.enc_w),
            vec1("enc_b", "encoder", &self.enc_b),
            mat("cond_w1", "cond.mlp", &self.cond_w1),
            vec1("cond_b1", "cond.mlp", &self.cond_b1),
            mat("cond_w2", "cond.mlp", &self.cond_w2),
            vec1("cond_b2", "cond.mlp", &self.cond_b2),
        ];
        for (k, b) in self.blocks.iter().enumerate() {
            let g = format!("block{k}.mlp");
            let gf = format!("block{k}.film");
            v.push(mat(&format!("block{k}.w1"), &g, &b.w1));
            v.push(vec1(&format!("block{k}.b1"), &g, &b.b1));
            v.push(mat(&format!("block{k}.w2"), &g, &b.w2));
            v.push(vec1(&format!("block{k}.b2"), &g, &b.b2));
            v.push(mat(&format!("block{k}.film_w"), &gf, &b.film_w));
            v.push(vec1(&format!("block{k}.film_b"), &gf, &b.film_b));
        }
        v.push(mat("dec_w1", "decoder", &self.dec_w1));
        v.push(vec1("dec_b1", "decoder", &self.dec_b1));
        v.push(mat("dec_w2", "decoder", &self.dec_w2));
        v.push(vec1("dec_b2", "decoder", &self.dec_b2));
        v
    }

    /// Mutable registry view, same order as [`entries`](Self::entries).
    pub fn entries_mut(&mut self) -> Vec<ParamEntryMut<'_>> {
        let DenoiserParams {
            enc_w,
            enc_b,
            cond_w1,
            cond_b1,
            cond_w2,
            cond_b2,
            blocks,
            dec_w1,
            dec_b1,
            dec_w2,
            dec_b2,
        } = self;
        let mut v = vec![
            mat_mut("enc_w", "encoder", enc_w),
            vec1_mut("enc_b", "encoder", enc_b),
            mat_mut("cond_w1", "cond.mlp", cond_w1),
            vec1_mut("cond_b1", "cond.mlp", cond_b1),
            mat_mut("cond_w2", "cond.mlp", cond_w2),
            vec1_mut("cond_b2", "cond.mlp", cond_b2),
        ];
        for (k, b) in blocks.iter_mut().enumerate() {
            let g = format!("block{k}.mlp");
            let gf = format!("block{k}.film");
            v.push(mat_mut(&format!("block{k}.w1"), &g, &mut b.w1));
            v.push(vec1_mut(&format!("block{k}.b1"), &g, &mut b.b1));
            v.push(mat_mut(&format!("block{k}.w2"), &g, &mut b.w2));
            v.push(vec1_mut(&format!("block{k}.b2"), &g, &mut b.b2));
            v.push(mat_mut(&format!("block{k}.film_w"), &gf, &mut b.film_w));
            v.push(vec1_mut(&format!("block{k}.film_b"), &gf, &mut b.film_b));
        }
        v.push(mat_mut("dec_w1", "decoder", dec_w1));
        v.push(vec1_mut("dec_b1", "decoder", dec_b1));
        v.push(mat_mut("dec_w2", "decoder", dec_w2));
        v.push(vec1_mut("dec_b2", "decoder", dec_b2));
        v
    }

    pub fn num_params(&self) -> usize {
        self.entries().iter().map(|e| e.data.len()).sum()
    }

    /// Exact bitwise equality over the listed parameter groups.
    pub fn groups_bit_identical(&self, other: &Self, groups: &[String]) -> bool {
        let a = self.entries();
        let b = other.entries();
        a.iter().zip(b.iter()).all(|(x, y)| {
            if !groups.contains(&x.group) {
                return true;
            }
            x.data.len() == y.data.len()
                && x.data
                    .iter()
                    .zip(y.data.iter())
                    .all(|(p, q)| p.to_bits() == q.to_bits())
        })
    }
}
