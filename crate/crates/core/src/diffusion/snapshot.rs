//! Immutable model snapshots and their checkpoint container.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::arch::ArchConfig;
use crate::diffusion::loss::{LossConfig, LossVariant};
use crate::diffusion::network;
use crate::diffusion::params::DenoiserParams;
use crate::error::CoreError;
use crate::Result;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Which role the snapshot plays: random init, pretrained, or unlearned.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    F0,
    F1,
    F2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// RNG key (hex) or stored integer seed the weights derive from.
    pub seed: String,
    pub steps: usize,
    pub ema: bool,
}

/// Immutable weights plus the architecture and loss they belong to.
#[derive(Clone, Debug)]
pub struct ModelSnapshot {
    params: Arc<DenoiserParams>,
    arch: ArchConfig,
    loss: LossConfig,
    role: Role,
    provenance: Provenance,
    fingerprint: String,
}

impl ModelSnapshot {
    pub fn new(
        params: DenoiserParams,
        arch: ArchConfig,
        loss: LossConfig,
        role: Role,
        provenance: Provenance,
    ) -> Result<Self> {
        arch.validate()?;
        loss.validate()?;
        // Weights must match the architecture's parameter registry exactly.
        let expected = DenoiserParams::zeros(&arch);
        let exp_entries = expected.entries();
        let got_entries = params.entries();
        if exp_entries.len() != got_entries.len() {
            return Err(CoreError::ShapeMismatch {
                expected: format!("{} registry entries", exp_entries.len()),
                got: format!("{}", got_entries.len()),
            });
        }
        for (e, g) in exp_entries.iter().zip(got_entries.iter()) {
            if e.name != g.name || e.shape != g.shape {
                return Err(CoreError::ShapeMismatch {
                    expected: format!("param {} {:?}", e.name, e.shape),
                    got: format!("param {} {:?}", g.name, g.shape),
                });
            }
        }
        let fingerprint = fingerprint_of(&params, &arch, &loss, role);
        Ok(ModelSnapshot {
            params: Arc::new(params),
            arch,
            loss,
            role,
            provenance,
            fingerprint,
        })
    }

    pub fn params(&self) -> &DenoiserParams {
        &self.params
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn loss(&self) -> &LossConfig {
        &self.loss
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// Content hash over weights, architecture, loss, and role.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Denoise a batch at one noise scale, in x0 + sigma*n coordinates.
    /// Returns the denoised estimate D(x; sigma).
    pub fn denoise_batch(&self, xs: &Array2<f32>, sigma: f64, cond: &Array2<f32>) -> Array2<f32> {
        let s = sigma as f32;
        let batch = xs.nrows();
        let c_noise = vec![network::c_noise_of(s); batch];
        match self.loss.variant {
            LossVariant::Edm => {
                let sd = self.loss.sigma_data as f32;
                let den = s * s + sd * sd;
                let c_in = 1.0 / den.sqrt();
                let c_skip = sd * sd / den;
                let c_out = s * sd / den.sqrt();
                let x_net = xs.mapv(|v| v * c_in);
                let (out, _) = network::forward(&self.params, &self.arch, x_net, &c_noise, cond);
                xs.mapv(|v| v * c_skip) + out.mapv(|v| v * c_out)
            }
            LossVariant::Ddpm => {
                let abar = 1.0 / (1.0 + s * s);
                let x_vp = xs.mapv(|v| v * abar.sqrt());
                let (noise_pred, _) =
                    network::forward(&self.params, &self.arch, x_vp, &c_noise, cond);
                xs - &noise_pred.mapv(|v| v * s)
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        let record = CheckpointFile {
            format_version: CHECKPOINT_FORMAT_VERSION,
            role: self.role,
            arch: self.arch.clone(),
            loss: self.loss.clone(),
            provenance: self.provenance.clone(),
            fingerprint: self.fingerprint.clone(),
            params: self
                .params
                .entries()
                .iter()
                .map(|e| CheckpointParam {
                    name: e.name.clone(),
                    group: e.group.clone(),
                    shape: e.shape.clone(),
                    data: B64.encode(f32s_to_bytes(e.data)),
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &record)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut buf = String::new();
        BufReader::new(file).read_to_string(&mut buf)?;
        let record: CheckpointFile = serde_json::from_str(&buf)?;
        if record.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(CoreError::CheckpointFormat(format!(
                "unsupported format version {}",
                record.format_version
            )));
        }
        let mut params = DenoiserParams::zeros(&record.arch);
        let mut entries = params.entries_mut();
        if entries.len() != record.params.len() {
            return Err(CoreError::CheckpointFormat(format!(
                "expected {} params, file has {}",
                entries.len(),
                record.params.len()
            )));
        }
        for (slot, stored) in entries.iter_mut().zip(record.params.iter()) {
            if slot.name != stored.name {
                return Err(CoreError::CheckpointFormat(format!(
                    "param order mismatch: expected {}, got {}",
                    slot.name, stored.name
                )));
            }
            let bytes = B64
                .decode(&stored.data)
                .map_err(|e| CoreError::CheckpointFormat(format!("base64: {e}")))?;
            let vals = bytes_to_f32s(&bytes);
            if vals.len() != slot.data.len() {
                return Err(CoreError::CheckpointFormat(format!(
                    "param {} has {} values, expected {}",
                    slot.name,
                    vals.len(),
                    slot.data.len()
                )));
            }
            slot.data.copy_from_slice(&vals);
        }
        drop(entries);
        let snap = ModelSnapshot::new(params, record.arch, record.loss, record.role, record.provenance)?;
        if snap.fingerprint != record.fingerprint {
            return Err(CoreError::CheckpointFormat(
                "fingerprint mismatch after load".into(),
            ));
        }
        Ok(snap)
    }
}

fn fingerprint_of(params: &DenoiserParams, arch: &ArchConfig, loss: &LossConfig, role: Role) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(arch).expect("arch serializes"));
    h.update(serde_json::to_vec(loss).expect("loss serializes"));
    h.update(serde_json::to_vec(&role).expect("role serializes"));
    for e in params.entries() {
        h.update(e.name.as_bytes());
        h.update(f32s_to_bytes(e.data));
    }
    hex::encode(&h.finalize()[..16])
}

fn f32s_to_bytes(vals: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(vals.len() * 4);
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn bytes_to_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    role: Role,
    arch: ArchConfig,
    loss: LossConfig,
    provenance: Provenance,
    fingerprint: String,
    params: Vec<CheckpointParam>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointParam {
    name: String,
    group: String,
    shape: Vec<usize>,
    data: String,
}

/// EMA accumulator over raw weights: ema <- momentum*ema + (1-momentum)*raw.
pub fn ema_update(ema: &mut DenoiserParams, raw: &DenoiserParams, momentum: f32) {
    let raws = raw.entries();
    for (e, r) in ema.entries_mut().iter_mut().zip(raws.iter()) {
        for (a, b) in e.data.iter_mut().zip(r.data.iter()) {
            *a = momentum * *a + (1.0 - momentum) * *b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::arch::{Conditioning, ImageShape};
    use crate::rng::RngKey;

    fn arch() -> ArchConfig {
        ArchConfig {
            input_shape: ImageShape {
                channels: 1,
                height: 4,
                width: 4,
            },
            d_model: 6,
            mlp_hidden: 8,
            dec_hidden: 8,
            blocks: 1,
            conditioning: Conditioning::None,
            cond_dropout: 0.0,
        }
    }

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
    fn checkpoint_roundtrip_bit_exact() {
        let a = arch();
        let params = DenoiserParams::init(&a, &mut RngKey::root(4).rng());
        let snap = ModelSnapshot::new(
            params,
            a.clone(),
            lc(),
            Role::F1,
            Provenance {
                seed: "abc".into(),
                steps: 10,
                ema: true,
            },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        snap.save(&path).unwrap();
        let loaded = ModelSnapshot::load(&path).unwrap();
        assert_eq!(loaded.fingerprint(), snap.fingerprint());
        assert!(loaded
            .params()
            .groups_bit_identical(snap.params(), &a.param_groups()));
        assert_eq!(loaded.role(), Role::F1);
        assert!(loaded.provenance().ema);
    }

    #[test]
    fn mismatched_params_rejected() {
        let a = arch();
        let mut other = a.clone();
        other.d_model = 7;
        let params = DenoiserParams::init(&other, &mut RngKey::root(4).rng());
        let err = ModelSnapshot::new(
            params,
            a,
            lc(),
            Role::F0,
            Provenance {
                seed: "s".into(),
                steps: 0,
                ema: false,
            },
        );
        assert!(err.is_err());
    }

    #[test]
    fn ema_momentum_zero_copies_raw() {
        let a = arch();
        let raw = DenoiserParams::init(&a, &mut RngKey::root(5).rng());
        let mut ema = DenoiserParams::init(&a, &mut RngKey::root(6).rng());
        ema_update(&mut ema, &raw, 0.0);
        assert!(ema.groups_bit_identical(&raw, &a.param_groups()));
    }
}
