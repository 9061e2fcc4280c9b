//! Image similarity metrics: SSIM plus embedding-cosine stand-ins.
//!
//! Metric names are stable registry keys: `ssim`, `cos-flat`, `cos-rp`,
//! `cos-ae`. The cosine metrics stand in for learned perceptual spaces and
//! are labeled as such in reports.

use ndarray::{Array1, Array2};

use crate::diffusion::arch::ImageShape;
use crate::embed::{cosine, Embedder, EmbedderSet};
use crate::error::CoreError;
use crate::Result;

/// Map from an image pair to a similarity (higher = more similar).
pub trait SimilarityMetric: Send + Sync {
    fn name(&self) -> &str;
    fn similarity(&self, a: &Array1<f32>, b: &Array1<f32>, shape: ImageShape) -> Result<f64>;
}

fn check_geometry(a: &Array1<f32>, b: &Array1<f32>, shape: ImageShape) -> Result<()> {
    let d = shape.dim();
    if a.len() != d || b.len() != d {
        return Err(CoreError::ShapeMismatch {
            expected: format!("images of dim {d}"),
            got: format!("{} and {}", a.len(), b.len()),
        });
    }
    Ok(())
}

/// Structural similarity with the standard windowed definition: Gaussian
/// window (11x11, sigma 1.5, shrunk for small images), valid positions
/// only, per-channel maps averaged over channels and positions. Data range
/// is the declared [-1, 1], so the dynamic range constant is 2.
pub struct Ssim;

pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_RANGE: f64 = 2.0;

fn gaussian_kernel(win: usize, sigma: f64) -> Vec<f64> {
    let c = (win as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..win)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Valid-mode separable convolution of a (h x w) channel with a 1-D kernel
/// applied along rows then columns.
fn blur_valid(img: &Array2<f64>, kernel: &[f64]) -> Array2<f64> {
    let (h, w) = (img.nrows(), img.ncols());
    let kw = kernel.len();
    let out_w = w - kw + 1;
    let mut rows = Array2::zeros((h, out_w));
    for y in 0..h {
        for x in 0..out_w {
            let mut acc = 0.0;
            for (j, kv) in kernel.iter().enumerate() {
                acc += kv * img[[y, x + j]];
            }
            rows[[y, x]] = acc;
        }
    }
    let out_h = h - kw + 1;
    let mut out = Array2::zeros((out_h, out_w));
    for x in 0..out_w {
        for y in 0..out_h {
            let mut acc = 0.0;
            for (j, kv) in kernel.iter().enumerate() {
                acc += kv * rows[[y + j, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

fn channel(data: &Array1<f32>, shape: ImageShape, c: usize) -> Array2<f64> {
    let (h, w) = (shape.height, shape.width);
    Array2::from_shape_fn((h, w), |(y, x)| data[c * h * w + y * w + x] as f64)
}

pub fn ssim(a: &Array1<f32>, b: &Array1<f32>, shape: ImageShape) -> Result<f64> {
    check_geometry(a, b, shape)?;
    let mut win = 11usize.min(shape.height).min(shape.width);
    if win % 2 == 0 {
        win -= 1;
    }
    if win < 3 {
        return Err(CoreError::InvalidConfig(format!(
            "image {}x{} too small for SSIM",
            shape.height, shape.width
        )));
    }
    let kernel = gaussian_kernel(win, 1.5);
    let c1 = (SSIM_K1 * SSIM_RANGE).powi(2);
    let c2 = (SSIM_K2 * SSIM_RANGE).powi(2);

    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..shape.channels {
        let xa = channel(a, shape, c);
        let xb = channel(b, shape, c);
        let mu_a = blur_valid(&xa, &kernel);
        let mu_b = blur_valid(&xb, &kernel);
        let aa = blur_valid(&(&xa * &xa), &kernel);
        let bb = blur_valid(&(&xb * &xb), &kernel);
        let ab = blur_valid(&(&xa * &xb), &kernel);
        for ((m_a, m_b), ((s_aa, s_bb), s_ab)) in mu_a
            .iter()
            .zip(mu_b.iter())
            .zip(aa.iter().zip(bb.iter()).zip(ab.iter()))
        {
            let var_a = s_aa - m_a * m_a;
            let var_b = s_bb - m_b * m_b;
            let cov = s_ab - m_a * m_b;
            let val = ((2.0 * m_a * m_b + c1) * (2.0 * cov + c2))
                / ((m_a * m_a + m_b * m_b + c1) * (var_a + var_b + c2));
            total += val;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

impl SimilarityMetric for Ssim {
    fn name(&self) -> &str {
        "ssim"
    }

    fn similarity(&self, a: &Array1<f32>, b: &Array1<f32>, shape: ImageShape) -> Result<f64> {
        ssim(a, b, shape)
    }
}

/// Cosine similarity in an embedder's space.
pub struct EmbedCosine<'a> {
    name: String,
    embedder: &'a dyn Embedder,
}

impl SimilarityMetric for EmbedCosine<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn similarity(&self, a: &Array1<f32>, b: &Array1<f32>, shape: ImageShape) -> Result<f64> {
        check_geometry(a, b, shape)?;
        Ok(cosine(&self.embedder.embed(a)?, &self.embedder.embed(b)?))
    }
}

/// All registered metric names.
pub fn metric_names() -> Vec<String> {
    vec![
        "ssim".into(),
        "cos-flat".into(),
        "cos-rp".into(),
        "cos-ae".into(),
    ]
}

/// Evaluate one named metric.
pub fn builtin_similarity(
    name: &str,
    a: &Array1<f32>,
    b: &Array1<f32>,
    shape: ImageShape,
    embedders: &EmbedderSet,
) -> Result<f64> {
    match name {
        "ssim" => Ssim.similarity(a, b, shape),
        "cos-flat" | "cos-rp" | "cos-ae" => {
            let embedder = embedders.get(&name["cos-".len()..])?;
            EmbedCosine {
                name: name.to_string(),
                embedder,
            }
            .similarity(a, b, shape)
        }
        other => Err(CoreError::UnknownName {
            kind: "similarity metric",
            name: other.into(),
            known: metric_names(),
        }),
    }
}
