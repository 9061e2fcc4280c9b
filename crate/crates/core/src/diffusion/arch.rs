//! Denoiser architecture configuration and parameter grouping.
//!
//! The desk-scale denoiser is a residual MLP over flattened pixels with a
//! conditioning MLP for the noise-level embedding and the (optional)
//! condition vector. Parameter groups carry explicit labels so masked
//! unlearning ("mlp-only") is well defined: block MLPs and the conditioning
//! MLP are `mlp` groups, the pixel encoder/decoder projections are not.

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::Result;

/// Pixel geometry of the data the model operates on. Values are in [-1, 1].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn dim(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Conditioning mode of the denoiser.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum Conditioning {
    None,
    ClassId { num_classes: usize },
    Vector { dim: usize },
}

impl Conditioning {
    /// Width of the condition vector fed to the conditioning MLP.
    pub fn dim(&self) -> usize {
        match self {
            Conditioning::None => 0,
            Conditioning::ClassId { num_classes } => *num_classes,
            Conditioning::Vector { dim } => *dim,
        }
    }

    pub fn is_conditional(&self) -> bool {
        !matches!(self, Conditioning::None)
    }
}

/// A condition attached to one instance or generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "value")]
pub enum Condition {
    Empty,
    ClassId(usize),
    Vector(Vec<f32>),
}

impl Condition {
    /// Encode as the vector the network consumes (one-hot for class ids).
    /// The all-zero vector doubles as the null condition for dropout and
    /// classifier-free guidance.
    pub fn encode(&self, conditioning: &Conditioning) -> Result<Vec<f32>> {
        match (self, conditioning) {
            (Condition::Empty, Conditioning::None) => Ok(Vec::new()),
            (Condition::ClassId(c), Conditioning::ClassId { num_classes }) => {
                if *c >= *num_classes {
                    return Err(CoreError::InvalidConfig(format!(
                        "class id {c} out of range (num_classes={num_classes})"
                    )));
                }
                let mut v = vec![0.0; *num_classes];
                v[*c] = 1.0;
                Ok(v)
            }
            (Condition::Vector(v), Conditioning::Vector { dim }) => {
                if v.len() != *dim {
                    return Err(CoreError::ShapeMismatch {
                        expected: format!("condition vector of dim {dim}"),
                        got: format!("dim {}", v.len()),
                    });
                }
                Ok(v.clone())
            }
            _ => Err(CoreError::InvalidConfig(format!(
                "condition {self:?} incompatible with conditioning mode {conditioning:?}"
            ))),
        }
    }
}

/// Architecture of the denoiser network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub input_shape: ImageShape,
    pub d_model: usize,
    pub mlp_hidden: usize,
    /// Hidden width of the two-layer pixel decoder.
    pub dec_hidden: usize,
    pub blocks: usize,
    pub conditioning: Conditioning,
    /// Probability of replacing the condition by the null condition during
    /// training (enables classifier-free guidance at sampling).
    pub cond_dropout: f64,
}

/// Number of Fourier features used for the noise-level embedding.
pub const SIGMA_EMBED_DIM: usize = 16;

/// Fixed Fourier frequencies for the noise-level embedding.
pub const SIGMA_EMBED_FREQS: [f32; SIGMA_EMBED_DIM / 2] =
    [0.5, 1.0, 2.0, 3.0, 4.0, 6.0, 8.0, 12.0];

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_shape.dim() == 0 {
            return Err(CoreError::InvalidConfig("input shape has zero size".into()));
        }
        if self.d_model == 0 || self.mlp_hidden == 0 || self.dec_hidden == 0 {
            return Err(CoreError::InvalidConfig("zero-width denoiser layer".into()));
        }
        if self.blocks == 0 {
            return Err(CoreError::InvalidConfig(
                "denoiser needs at least one block".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(CoreError::InvalidConfig(format!(
                "cond_dropout {} outside [0, 1]",
                self.cond_dropout
            )));
        }
        if !self.conditioning.is_conditional() && self.cond_dropout != 0.0 {
            return Err(CoreError::InvalidConfig(
                "cond_dropout set on an unconditional architecture".into(),
            ));
        }
        Ok(())
    }

    pub fn data_dim(&self) -> usize {
        self.input_shape.dim()
    }

    pub fn cond_dim(&self) -> usize {
        self.conditioning.dim()
    }

    /// Input width of the conditioning MLP: sigma embedding plus condition.
    pub fn cond_in_dim(&self) -> usize {
        SIGMA_EMBED_DIM + self.cond_dim()
    }

    /// All parameter group labels, in registry order.
    pub fn param_groups(&self) -> Vec<String> {
        let mut groups = vec!["encoder".to_string(), "cond.mlp".to_string()];
        for k in 0..self.blocks {
            groups.push(format!("block{k}.mlp"));
            groups.push(format!("block{k}.film"));
        }
        groups.push("decoder".to_string());
        groups
    }

    /// Groups covered by the "mlp-only" unlearning mask: the block MLPs and
    /// the conditioning MLP. Encoder/decoder pixel projections and the
    /// modulation maps stay frozen.
    pub fn mlp_groups(&self) -> Vec<String> {
        self.param_groups()
            .into_iter()
            .filter(|g| g.ends_with(".mlp"))
            .collect()
    }
}
