//! Dataset construction, instance identity, and leave-k-out removal.
//!
//! The toy dataset is procedurally generated: colored geometric shapes with
//! class-structured palettes on jittered backgrounds, normalized so the
//! whole dataset has zero mean and a per-pixel RMS equal to the calibrated
//! loss scale (sigma_data). Removal bookkeeping implements the union-of-topk
//! semantics used by the counterfactual evaluation.

use std::collections::BTreeSet;

use ndarray::Array1;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::arch::{Condition, ImageShape};
use crate::error::CoreError;
use crate::methods::AttributionResult;
use crate::rng::RngKey;
use crate::Result;

/// One training pair: data item plus optional conditioning.
#[derive(Clone, Debug)]
pub struct TrainingInstance {
    pub id: String,
    pub x: Array1<f32>,
    pub c: Condition,
}

/// One generated item with everything needed to regenerate it exactly.
#[derive(Clone, Debug)]
pub struct GeneratedItem {
    pub id: String,
    pub x_hat: Array1<f32>,
    pub c_hat: Condition,
    pub seed: u64,
    /// Fingerprint of the snapshot that produced it.
    pub source: String,
}

/// Toy dataset specification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub size: usize,
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ToySpec {
    pub fn shape(&self) -> ImageShape {
        ImageShape {
            channels: self.channels,
            height: self.height,
            width: self.width,
        }
    }
}

/// Immutable dataset: instances in id order plus construction provenance.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: ToySpec,
    pub shape: ImageShape,
    pub instances: Vec<TrainingInstance>,
    pub content_hash: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.instances.iter().map(|i| i.id.clone()).collect()
    }

    pub fn instance(&self, id: &str) -> Option<&TrainingInstance> {
        self.instances.iter().find(|i| i.id == id)
    }

    /// Recompute the content hash over (id, condition, pixels).
    pub fn compute_hash(instances: &[TrainingInstance]) -> String {
        let mut h = Sha256::new();
        for inst in instances {
            h.update(inst.id.as_bytes());
            h.update(serde_json::to_vec(&inst.c).expect("condition serializes"));
            for v in inst.x.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..16])
    }
}

/// Removal bookkeeping for one attribution method.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RemovalSet {
    pub method: String,
    pub k_fraction: f64,
    /// Per generated item: (item id, its top-k instance ids).
    pub per_item: Vec<(String, Vec<String>)>,
    /// Sorted union of all removed ids.
    pub union: Vec<String>,
}

/// Deterministic generator for one shape image, in raw [0, 1] space.
///
/// Latent factors are quantized (position grid, two sizes, four angles,
/// small jitter palettes) so the dataset is structured and memorizable at
/// desk scale while instances stay class-clustered.
fn draw_shape<R: Rng>(spec: &ToySpec, class: usize, rng: &mut R, out: &mut [f32]) {
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    // Class-structured palette: hue from the class index, shape kind cycles.
    let hue = class as f32 / spec.classes.max(1) as f32;
    let kind = class % 5;
    let fg = hsv_to_rgb(hue, 0.9, 0.9);
    let bg = hsv_to_rgb((hue + 0.5) % 1.0, 0.35, 0.45);

    let grid = [0.3f32, 0.5, 0.7];
    let cx = grid[rng.gen_range(0..grid.len())] * w as f32;
    let cy = grid[rng.gen_range(0..grid.len())] * h as f32;
    let radius = [0.20f32, 0.30][rng.gen_range(0..2)] * w.min(h) as f32;
    let angle = [0.0f32, 0.25, 0.5, 0.75][rng.gen_range(0..4)] * std::f32::consts::PI;
    let fg_jit = [-0.08f32, 0.0, 0.08][rng.gen_range(0..3)];
    let bg_jit = [-0.06f32, 0.06][rng.gen_range(0..2)];

    for y in 0..h {
        for x in 0..w {
            let px = x as f32 + 0.5 - cx;
            let py = y as f32 + 0.5 - cy;
            // Rotate into the shape frame.
            let rx = px * angle.cos() + py * angle.sin();
            let ry = -px * angle.sin() + py * angle.cos();
            let dist = match kind {
                0 => (rx * rx + ry * ry).sqrt(),                   // disk
                1 => rx.abs().max(ry.abs()),                       // square
                2 => {
                    // triangle-ish: three half-plane distances
                    let a = ry - 0.5 * radius;
                    let b = -ry * 0.5 - rx * 0.866;
                    let c2 = -ry * 0.5 + rx * 0.866;
                    a.max(b).max(c2) + 0.5 * radius
                }
                3 => ((rx * rx + ry * ry).sqrt() - 0.72 * radius).abs() + 0.6 * radius, // ring
                _ => rx.abs().min(ry.abs()).max(rx.abs().max(ry.abs()) * 0.33), // cross
            };
            let coverage = (0.5 + (radius - dist)).clamp(0.0, 1.0);
            for ch in 0..c {
                let f = fg[ch % 3] + fg_jit;
                let b = bg[ch % 3] + bg_jit;
                out[ch * h * w + y * w + x] = (coverage * f + (1.0 - coverage) * b).clamp(0.0, 1.0);
            }
        }
    }
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match (i as i32).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Build the toy dataset: balanced classes, deterministic for (spec, key),
/// normalized to zero mean and RMS = `target_rms` over all pixels.
pub fn build_toy_dataset(spec: &ToySpec, key: &RngKey, target_rms: f64) -> Result<Dataset> {
    if spec.size == 0 {
        return Err(CoreError::InvalidConfig("dataset size must be > 0".into()));
    }
    if spec.classes == 0 || spec.size < spec.classes {
        return Err(CoreError::InvalidConfig(format!(
            "dataset size {} smaller than class count {}",
            spec.size, spec.classes
        )));
    }
    if spec.shape().dim() == 0 {
        return Err(CoreError::InvalidConfig("empty image geometry".into()));
    }

    let dim = spec.shape().dim();
    let mut raw: Vec<Array1<f32>> = Vec::with_capacity(spec.size);
    for idx in 0..spec.size {
        let class = idx % spec.classes;
        let mut rng = key.child("instance").child_idx(idx as u64).rng();
        let mut buf = vec![0f32; dim];
        draw_shape(spec, class, &mut rng, &mut buf);
        raw.push(Array1::from_vec(buf));
    }

    // Global affine normalization into the declared range. The clamp cuts
    // the scaled tails, so iterate the correction until the post-clamp
    // statistics hit the target.
    let n_total = (spec.size * dim) as f64;
    for _ in 0..8 {
        let mean: f64 = raw
            .iter()
            .map(|a| a.iter().map(|v| *v as f64).sum::<f64>())
            .sum::<f64>()
            / n_total;
        let var: f64 = raw
            .iter()
            .map(|a| a.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>())
            .sum::<f64>()
            / n_total;
        let scale = (target_rms / var.sqrt().max(1e-9)) as f32;
        let mean = mean as f32;
        for a in &mut raw {
            a.mapv_inplace(|v| ((v - mean) * scale).clamp(-1.0, 1.0));
        }
    }

    let width = (spec.size.max(2) - 1).to_string().len();
    let instances: Vec<TrainingInstance> = raw
        .into_iter()
        .enumerate()
        .map(|(idx, a)| TrainingInstance {
            id: format!("z{idx:0width$}"),
            x: a,
            c: Condition::ClassId(idx % spec.classes),
        })
        .collect();

    let content_hash = Dataset::compute_hash(&instances);
    Ok(Dataset {
        spec: spec.clone(),
        shape: spec.shape(),
        instances,
        content_hash,
    })
}

/// Top-k instance count for a fraction of the dataset (ceiling).
pub fn topk_count(dataset_size: usize, k_fraction: f64) -> usize {
    ((dataset_size as f64) * k_fraction).ceil() as usize
}

/// Remove the union of per-item top-k instances.
///
/// Each result must score the full dataset. Ties break by ascending
/// instance id so removal is deterministic.
pub fn remove_topk(
    dataset: &Dataset,
    results: &[AttributionResult],
    k_fraction: f64,
) -> Result<(Dataset, RemovalSet)> {
    if !(0.0 < k_fraction && k_fraction < 1.0) {
        return Err(CoreError::InvalidConfig(format!(
            "k_fraction must be in (0, 1), got {k_fraction}"
        )));
    }
    if results.is_empty() {
        return Err(CoreError::EmptyInput("no attribution results".into()));
    }
    let all_ids: BTreeSet<&str> = dataset.instances.iter().map(|i| i.id.as_str()).collect();
    for r in results {
        if r.scores.len() != dataset.len()
            || !r.scores.keys().all(|id| all_ids.contains(id.as_str()))
        {
            return Err(CoreError::InvalidConfig(format!(
                "result for item {} does not score the full dataset",
                r.item_id
            )));
        }
    }

    let k = topk_count(dataset.len(), k_fraction);
    let mut per_item = Vec::with_capacity(results.len());
    let mut union: BTreeSet<String> = BTreeSet::new();
    for r in results {
        let top = crate::methods::top_k_ids(&r.scores, k);
        union.extend(top.iter().cloned());
        per_item.push((r.item_id.clone(), top));
    }

    if union.len() >= dataset.len() {
        return Err(CoreError::RemovalExhaustsDataset {
            removed: union.len(),
            total: dataset.len(),
        });
    }

    let reduced_instances: Vec<TrainingInstance> = dataset
        .instances
        .iter()
        .filter(|i| !union.contains(&i.id))
        .cloned()
        .collect();
    let content_hash = Dataset::compute_hash(&reduced_instances);
    let reduced = Dataset {
        spec: dataset.spec.clone(),
        shape: dataset.shape,
        instances: reduced_instances,
        content_hash,
    };
    let removal = RemovalSet {
        method: results[0].method.clone(),
        k_fraction,
        per_item,
        union: union.into_iter().collect(),
    };
    Ok((reduced, removal))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn spec(size: usize, classes: usize) -> ToySpec {
        ToySpec {
            size,
            classes,
            channels: 3,
            height: 8,
            width: 8,
        }
    }

    fn result(method: &str, item: &str, scores: &[(&str, f64)]) -> AttributionResult {
        AttributionResult {
            method: method.into(),
            item_id: item.into(),
            scores: scores
                .iter()
                .map(|(k, v)| (k.to_string(), *v))
                .collect::<BTreeMap<_, _>>(),
            config_hash: "t".into(),
            noise_provenance: "t".into(),
        }
    }

    #[test]
    fn balanced_construction() {
        let ds = build_toy_dataset(&spec(50, 10), &RngKey::root(1), 0.5).unwrap();
        assert_eq!(ds.len(), 50);
        for class in 0..10 {
            let count = ds
                .instances
                .iter()
                .filter(|i| i.c == Condition::ClassId(class))
                .count();
            assert_eq!(count, 5, "class {class}");
        }
        // ids are unique and values in range
        let ids: BTreeSet<_> = ds.ids().into_iter().collect();
        assert_eq!(ids.len(), 50);
        assert!(ds
            .instances
            .iter()
            .all(|i| i.x.iter().all(|v| (-1.0..=1.0).contains(v))));
    }

    #[test]
    fn deterministic_manifest_hash() {
        let a = build_toy_dataset(&spec(30, 3), &RngKey::root(2), 0.5).unwrap();
        let b = build_toy_dataset(&spec(30, 3), &RngKey::root(2), 0.5).unwrap();
        assert_eq!(a.content_hash, b.content_hash);
        let c = build_toy_dataset(&spec(30, 3), &RngKey::root(3), 0.5).unwrap();
        assert_ne!(a.content_hash, c.content_hash);
    }

    #[test]
    fn normalization_hits_target_stats() {
        let ds = build_toy_dataset(&spec(200, 10), &RngKey::root(4), 0.5).unwrap();
        let n = (ds.len() * ds.shape.dim()) as f64;
        let mean: f64 = ds
            .instances
            .iter()
            .map(|i| i.x.iter().map(|v| *v as f64).sum::<f64>())
            .sum::<f64>()
            / n;
        let ms: f64 = ds
            .instances
            .iter()
            .map(|i| i.x.iter().map(|v| (*v as f64).powi(2)).sum::<f64>())
            .sum::<f64>()
            / n;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((ms.sqrt() - 0.5).abs() < 0.02, "rms {}", ms.sqrt());
    }

    #[test]
    fn degenerate_specs_rejected() {
        assert!(build_toy_dataset(&spec(0, 1), &RngKey::root(0), 0.5).is_err());
        assert!(build_toy_dataset(&spec(5, 10), &RngKey::root(0), 0.5).is_err());
    }

    #[test]
    fn removal_counts_and_union_semantics() {
        let ds = build_toy_dataset(&spec(100, 10), &RngKey::root(5), 0.5).unwrap();
        let ids = ds.ids();
        // m=1: exactly ceil(0.02*100) = 2 ids removed.
        let scores: Vec<(&str, f64)> = ids.iter().map(|id| (id.as_str(), 0.0)).collect();
        let mut s1 = scores.clone();
        s1[7].1 = 2.0;
        s1[3].1 = 1.0;
        let r1 = result("m", "g0", &s1);
        let (reduced, removal) = remove_topk(&ds, &[r1.clone()], 0.02).unwrap();
        assert_eq!(removal.union.len(), 2);
        assert_eq!(reduced.len(), 98);
        assert_eq!(removal.per_item[0].1, vec![ids[7].clone(), ids[3].clone()]);

        // Two items with identical top-k lists: union size k, not 2k.
        let r2 = result("m", "g1", &s1);
        let (_, removal2) = remove_topk(&ds, &[r1.clone(), r2], 0.02).unwrap();
        assert_eq!(removal2.union.len(), 2);

        // Disjoint lists across m items: union m*k.
        let mut results = Vec::new();
        for m in 0..20 {
            let mut s = scores.clone();
            s[2 * m].1 = 2.0;
            s[2 * m + 1].1 = 1.0;
            results.push(result("m", &format!("g{m}"), &s));
        }
        let (reduced3, removal3) = remove_topk(&ds, &results, 0.02).unwrap();
        assert_eq!(removal3.union.len(), 40); // 40% of the data
        assert_eq!(reduced3.len(), 60);
    }

    #[test]
    fn removal_idempotent_and_exhaustion_rejected() {
        let ds = build_toy_dataset(&spec(10, 2), &RngKey::root(6), 0.5).unwrap();
        let ids = ds.ids();
        let scores: Vec<(&str, f64)> = ids.iter().map(|id| (id.as_str(), 1.0)).collect();
        let r = result("m", "g0", &scores);
        let (a1, s1) = remove_topk(&ds, &[r.clone()], 0.2).unwrap();
        let (a2, s2) = remove_topk(&ds, &[r.clone()], 0.2).unwrap();
        assert_eq!(a1.content_hash, a2.content_hash);
        assert_eq!(s1.union, s2.union);
        // All scores tied: top-2 by ascending id.
        assert_eq!(s1.union, vec![ids[0].clone(), ids[1].clone()]);

        assert!(remove_topk(&ds, &[r], 0.999).is_err());
    }

    #[test]
    fn tie_break_is_ascending_id() {
        let ds = build_toy_dataset(&spec(6, 2), &RngKey::root(7), 0.5).unwrap();
        let ids = ds.ids();
        let scores: Vec<(&str, f64)> = ids.iter().map(|id| (id.as_str(), 5.0)).collect();
        let r = result("m", "g0", &scores);
        let top = crate::methods::top_k_ids(&r.scores, 3);
        assert_eq!(top, vec![ids[0].clone(), ids[1].clone(), ids[2].clone()]);
    }
}
