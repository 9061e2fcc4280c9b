//! Top-k overlap statistics and rank-based ensembling.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::methods::{top_k_ids, AttributionResult};
use crate::stats::mean_ci95;
use crate::Result;

/// Mean pairwise overlap percentage with its 95% CI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapStat {
    pub label: String,
    pub mean_percent: f64,
    pub ci95: f64,
    pub pairs: usize,
}

/// Symmetric overlap percentages between labeled result groups.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OverlapMatrix {
    pub labels: Vec<String>,
    /// entries[i][j]: mean overlap % between labels i and j; the diagonal
    /// of the across-items matrix is omitted (None).
    pub entries: Vec<Vec<Option<f64>>>,
    pub ci95: Vec<Vec<Option<f64>>>,
}

fn overlap_fraction(a: &[String], b: &[String]) -> f64 {
    let sa: BTreeSet<&String> = a.iter().collect();
    let inter = b.iter().filter(|id| sa.contains(id)).count();
    inter as f64 / a.len().max(1) as f64
}

fn validate_same_dataset(results: &[AttributionResult]) -> Result<usize> {
    let first = results
        .first()
        .ok_or_else(|| CoreError::EmptyInput("no attribution results".into()))?;
    let ids: BTreeSet<&String> = first.scores.keys().collect();
    for r in results.iter().skip(1) {
        if r.scores.len() != ids.len() || !r.scores.keys().all(|k| ids.contains(k)) {
            return Err(CoreError::InvalidConfig(format!(
                "results for items {} and {} score different datasets",
                first.item_id, r.item_id
            )));
        }
    }
    Ok(first.scores.len())
}

/// Mean top-k overlap across generated items for one method: all
/// m(m-1)/2 unordered item pairs, as a percentage of the top-k size.
pub fn topk_overlap_across_items(
    results: &[AttributionResult],
    k_fraction: f64,
) -> Result<OverlapStat> {
    if results.len() < 2 {
        return Err(CoreError::InvalidConfig(
            "across-items overlap needs at least 2 generated items".into(),
        ));
    }
    let dataset_size = validate_same_dataset(results)?;
    let k = crate::data::topk_count(dataset_size, k_fraction);
    let tops: Vec<Vec<String>> = results.iter().map(|r| top_k_ids(&r.scores, k)).collect();
    let mut overlaps = Vec::new();
    for i in 0..tops.len() {
        for j in (i + 1)..tops.len() {
            overlaps.push(100.0 * overlap_fraction(&tops[i], &tops[j]));
        }
    }
    let (mean, ci) = mean_ci95(&overlaps);
    Ok(OverlapStat {
        label: results[0].method.clone(),
        mean_percent: mean,
        ci95: ci,
        pairs: overlaps.len(),
    })
}

/// Mean top-k overlap between methods: for each method pair, the overlap is
/// computed per generated item and averaged across items.
pub fn topk_overlap_across_methods(
    results_by_method: &BTreeMap<String, Vec<AttributionResult>>,
    k_fraction: f64,
) -> Result<OverlapMatrix> {
    if results_by_method.is_empty() {
        return Err(CoreError::EmptyInput("no methods".into()));
    }
    let labels: Vec<String> = results_by_method.keys().cloned().collect();
    // Validate: same item sets and same dataset everywhere.
    let item_ids = |rs: &[AttributionResult]| -> Vec<String> {
        let mut v: Vec<String> = rs.iter().map(|r| r.item_id.clone()).collect();
        v.sort();
        v
    };
    let reference_items = item_ids(&results_by_method[&labels[0]]);
    let mut dataset_size = 0;
    for label in &labels {
        let rs = &results_by_method[label];
        if item_ids(rs) != reference_items {
            return Err(CoreError::InvalidConfig(format!(
                "method {label} scored a different item set"
            )));
        }
        dataset_size = validate_same_dataset(rs)?;
    }
    let k = crate::data::topk_count(dataset_size, k_fraction);

    // Top-k lists per (method, item id).
    let mut tops: BTreeMap<(String, String), Vec<String>> = BTreeMap::new();
    for (label, rs) in results_by_method {
        for r in rs {
            tops.insert((label.clone(), r.item_id.clone()), top_k_ids(&r.scores, k));
        }
    }

    let m = labels.len();
    let mut entries = vec![vec![None; m]; m];
    let mut ci95 = vec![vec![None; m]; m];
    for i in 0..m {
        for j in i..m {
            let per_item: Vec<f64> = reference_items
                .iter()
                .map(|item| {
                    let a = &tops[&(labels[i].clone(), item.clone())];
                    let b = &tops[&(labels[j].clone(), item.clone())];
                    100.0 * overlap_fraction(a, b)
                })
                .collect();
            let (mean, ci) = mean_ci95(&per_item);
            entries[i][j] = Some(mean);
            entries[j][i] = Some(mean);
            ci95[i][j] = Some(ci);
            ci95[j][i] = Some(ci);
        }
    }
    Ok(OverlapMatrix {
        labels,
        entries,
        ci95,
    })
}

/// Ensemble specification: ordered method names and non-negative integer
/// weights; at least one weight must be positive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub methods: Vec<String>,
    pub weights: Vec<u32>,
}

impl EnsembleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.methods.len() != self.weights.len() {
            return Err(CoreError::InvalidConfig(format!(
                "{} methods but {} weights",
                self.methods.len(),
                self.weights.len()
            )));
        }
        if self.methods.is_empty() || self.weights.iter().all(|w| *w == 0) {
            return Err(CoreError::InvalidConfig(
                "ensemble needs at least one positive weight".into(),
            ));
        }
        Ok(())
    }
}

/// Descending ranks with the average-rank convention for ties
/// (rank 1 = highest score).
pub fn ranks_descending(scores: &BTreeMap<String, f64>) -> BTreeMap<String, f64> {
    let mut ordered: Vec<(&String, &f64)> = scores.iter().collect();
    ordered.sort_by(|a, b| {
        b.1.partial_cmp(a.1)
            .expect("finite scores")
            .then_with(|| a.0.cmp(b.0))
    });
    let mut ranks = BTreeMap::new();
    let mut i = 0;
    while i < ordered.len() {
        let mut j = i + 1;
        while j < ordered.len() && ordered[j].1 == ordered[i].1 {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for item in &ordered[i..j] {
            ranks.insert(item.0.clone(), avg_rank);
        }
        i = j;
    }
    ranks
}

/// Rank-based ensemble over one generated item's per-method score maps.
///
/// Scores become descending ranks per method, ranks are weighted and
/// summed, and the ensemble score is the negated weighted rank sum (a
/// monotone order reversal, rank-equivalent to taking the inverse).
pub fn rank_ensemble(
    results_by_method: &BTreeMap<String, AttributionResult>,
    spec: &EnsembleSpec,
) -> Result<AttributionResult> {
    spec.validate()?;
    let mut picked: Vec<(&AttributionResult, u32)> = Vec::new();
    for (name, w) in spec.methods.iter().zip(spec.weights.iter()) {
        let r = results_by_method.get(name).ok_or_else(|| CoreError::UnknownName {
            kind: "ensemble method",
            name: name.clone(),
            known: results_by_method.keys().cloned().collect(),
        })?;
        picked.push((r, *w));
    }
    let all: Vec<AttributionResult> = picked.iter().map(|(r, _)| (*r).clone()).collect();
    validate_same_dataset(&all)?;
    let item_id = picked[0].0.item_id.clone();
    for (r, _) in &picked {
        if r.item_id != item_id {
            return Err(CoreError::InvalidConfig(format!(
                "ensemble inputs mix items {item_id} and {}",
                r.item_id
            )));
        }
    }

    let mut sums: BTreeMap<String, f64> = picked[0]
        .0
        .scores
        .keys()
        .map(|id| (id.clone(), 0.0))
        .collect();
    for (r, w) in &picked {
        if *w == 0 {
            continue;
        }
        let ranks = ranks_descending(&r.scores);
        for (id, rank) in ranks {
            *sums.get_mut(&id).expect("same id set") += *w as f64 * rank;
        }
    }
    let scores: BTreeMap<String, f64> = sums.into_iter().map(|(id, s)| (id, -s)).collect();

    Ok(AttributionResult {
        method: "ensemble".into(),
        item_id,
        scores,
        config_hash: crate::records::hash_json(spec),
        noise_provenance: String::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(method: &str, item: &str, scores: &[(&str, f64)]) -> AttributionResult {
        AttributionResult {
            method: method.into(),
            item_id: item.into(),
            scores: scores.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            config_hash: "t".into(),
            noise_provenance: "t".into(),
        }
    }

    fn scores_n(n: usize, f: impl Fn(usize) -> f64) -> Vec<(String, f64)> {
        (0..n).map(|i| (format!("z{i:03}"), f(i))).collect()
    }

    fn result_owned(method: &str, item: &str, scores: Vec<(String, f64)>) -> AttributionResult {
        AttributionResult {
            method: method.into(),
            item_id: item.into(),
            scores: scores.into_iter().collect(),
            config_hash: "t".into(),
            noise_provenance: "t".into(),
        }
    }

    #[test]
    fn identical_items_give_full_overlap() {
        let r1 = result_owned("m", "g0", scores_n(50, |i| i as f64));
        let r2 = result_owned("m", "g1", scores_n(50, |i| i as f64));
        let s = topk_overlap_across_items(&[r1, r2], 0.1).unwrap();
        assert_eq!(s.mean_percent, 100.0);
        assert_eq!(s.pairs, 1);
    }

    #[test]
    fn hand_computed_two_item_overlap() {
        // top-2 lists {a, b} and {b, c} -> 50%.
        let r1 = result("m", "g0", &[("a", 3.0), ("b", 2.0), ("c", 1.0), ("d", 0.0)]);
        let r2 = result("m", "g1", &[("a", 0.0), ("b", 3.0), ("c", 2.0), ("d", 1.0)]);
        let s = topk_overlap_across_items(&[r1, r2], 0.5).unwrap();
        assert_eq!(s.mean_percent, 50.0);
    }

    #[test]
    fn single_item_rejected() {
        let r1 = result("m", "g0", &[("a", 1.0)]);
        assert!(topk_overlap_across_items(&[r1], 0.5).is_err());
    }

    #[test]
    fn across_methods_diagonal_and_disjoint() {
        let mut by_method = BTreeMap::new();
        by_method.insert(
            "a".to_string(),
            vec![result_owned("a", "g0", scores_n(10, |i| i as f64))],
        );
        // method b ranks the complement highest -> disjoint top-k
        by_method.insert(
            "b".to_string(),
            vec![result_owned("b", "g0", scores_n(10, |i| -(i as f64)))],
        );
        let m = topk_overlap_across_methods(&by_method, 0.2).unwrap();
        assert_eq!(m.labels, vec!["a".to_string(), "b".to_string()]);
        assert_eq!(m.entries[0][0], Some(100.0));
        assert_eq!(m.entries[1][1], Some(100.0));
        assert_eq!(m.entries[0][1], Some(0.0));
        assert_eq!(m.entries[0][1], m.entries[1][0]);
    }

    #[test]
    fn item_set_mismatch_rejected() {
        let mut by_method = BTreeMap::new();
        by_method.insert("a".to_string(), vec![result("a", "g0", &[("x", 1.0)])]);
        by_method.insert("b".to_string(), vec![result("b", "g1", &[("x", 1.0)])]);
        assert!(topk_overlap_across_methods(&by_method, 0.5).is_err());
    }

    #[test]
    fn single_method_ensemble_preserves_order() {
        let r = result("m", "g0", &[("a", 0.3), ("b", 0.9), ("c", 0.5)]);
        let mut by_method = BTreeMap::new();
        by_method.insert("m".to_string(), r.clone());
        let spec = EnsembleSpec {
            methods: vec!["m".into()],
            weights: vec![4],
        };
        let e = rank_ensemble(&by_method, &spec).unwrap();
        let order = top_k_ids(&e.scores, 3);
        assert_eq!(order, top_k_ids(&r.scores, 3));
    }

    #[test]
    fn opposite_rankings_with_equal_weights_tie() {
        let r1 = result("m1", "g0", &[("a", 3.0), ("b", 2.0), ("c", 1.0)]);
        let r2 = result("m2", "g0", &[("a", 1.0), ("b", 2.0), ("c", 3.0)]);
        let mut by_method = BTreeMap::new();
        by_method.insert("m1".to_string(), r1);
        by_method.insert("m2".to_string(), r2);
        let spec = EnsembleSpec {
            methods: vec!["m1".into(), "m2".into()],
            weights: vec![5, 5],
        };
        let e = rank_ensemble(&by_method, &spec).unwrap();
        let vals: Vec<f64> = e.scores.values().copied().collect();
        assert!(vals.iter().all(|v| *v == vals[0]), "{vals:?}");
    }

    #[test]
    fn all_zero_weights_rejected() {
        let spec = EnsembleSpec {
            methods: vec!["m".into()],
            weights: vec![0],
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn average_rank_ties() {
        let scores: BTreeMap<String, f64> = [
            ("a".to_string(), 2.0),
            ("b".to_string(), 2.0),
            ("c".to_string(), 1.0),
        ]
        .into_iter()
        .collect();
        let ranks = ranks_descending(&scores);
        assert_eq!(ranks["a"], 1.5);
        assert_eq!(ranks["b"], 1.5);
        assert_eq!(ranks["c"], 3.0);
    }
}
