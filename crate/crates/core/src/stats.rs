//! Distribution-overlap statistics: AUC by exact pair counting, the
//! Mann-Whitney U significance test (exact tie-aware enumeration for small
//! samples, normal approximation with tie correction otherwise), and the
//! average normalized similarity difference.

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucResult {
    /// P(s_rand > s_method) + 0.5 * P(tie).
    pub auc: f64,
    /// Mann-Whitney U statistic (same pair count, unnormalized).
    pub u: f64,
    /// One-tailed p for H1 "method similarities are lower than random".
    pub p_one_tailed: f64,
    /// Whether the p-value came from exact enumeration.
    pub exact: bool,
}

/// Pair-counting AUC and Mann-Whitney significance.
///
/// Higher AUC means the method shifted similarities lower than random
/// removal did. The exact null distribution (conditional on observed ties)
/// is enumerated when n1*n2 <= 10^4; larger samples use the normal
/// approximation with tie correction and continuity correction.
pub fn compute_auc(s_rand: &[f64], s_method: &[f64]) -> Result<AucResult> {
    if s_rand.is_empty() || s_method.is_empty() {
        return Err(CoreError::EmptyInput("compute_auc needs non-empty lists".into()));
    }
    let n1 = s_rand.len();
    let n2 = s_method.len();

    let mut u = 0.0f64;
    for r in s_rand {
        for m in s_method {
            if r > m {
                u += 1.0;
            } else if r == m {
                u += 0.5;
            }
        }
    }
    let auc = u / (n1 * n2) as f64;

    let (p, exact) = if n1 * n2 <= 10_000 {
        (exact_p_one_tailed(s_rand, s_method, u), true)
    } else {
        (normal_p_one_tailed(s_rand, s_method, u), false)
    };

    Ok(AucResult {
        auc,
        u,
        p_one_tailed: p,
        exact,
    })
}

/// U via pooled midranks: R1 - n1(n1+1)/2. Algebraically equal to the
/// pair count, including tie handling.
pub fn rank_sum_u(s_rand: &[f64], s_method: &[f64]) -> f64 {
    let n1 = s_rand.len();
    let ranks = pooled_midranks(s_rand, s_method);
    let r1: f64 = ranks[..n1].iter().sum();
    r1 - (n1 * (n1 + 1)) as f64 / 2.0
}

/// Midranks of the pooled sample, first block s_rand then s_method.
fn pooled_midranks(s_rand: &[f64], s_method: &[f64]) -> Vec<f64> {
    let n = s_rand.len() + s_method.len();
    let mut idx: Vec<usize> = (0..n).collect();
    let value = |i: usize| {
        if i < s_rand.len() {
            s_rand[i]
        } else {
            s_method[i - s_rand.len()]
        }
    };
    idx.sort_by(|a, b| value(*a).partial_cmp(&value(*b)).expect("finite similarities"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && value(idx[j]) == value(idx[i]) {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        for k in i..j {
            ranks[idx[k]] = midrank;
        }
        i = j;
    }
    ranks
}

/// Exact one-tailed p = P(U >= u_obs) under the permutation null,
/// conditional on the observed (tied) pooled values. Enumerates the rank
/// sum distribution by dynamic programming over doubled midranks (which
/// are integers even with ties).
fn exact_p_one_tailed(s_rand: &[f64], s_method: &[f64], u_obs: f64) -> f64 {
    let n1 = s_rand.len();
    let ranks = pooled_midranks(s_rand, s_method);
    let doubled: Vec<usize> = {
        let mut all: Vec<f64> = ranks.clone();
        // pooled multiset of ranks: order does not matter for the null
        all.sort_by(|a, b| a.partial_cmp(b).expect("finite ranks"));
        all.iter().map(|r| (2.0 * r).round() as usize).collect()
    };
    let max_sum: usize = doubled.iter().sum();
    // ways[k][s]: subsets of size k with doubled-rank sum s
    let mut ways = vec![vec![0.0f64; max_sum + 1]; n1 + 1];
    ways[0][0] = 1.0;
    for &dr in &doubled {
        for k in (1..=n1).rev() {
            for s in (dr..=max_sum).rev() {
                let add = ways[k - 1][s - dr];
                if add != 0.0 {
                    ways[k][s] += add;
                }
            }
        }
    }
    let total: f64 = ways[n1].iter().sum();
    // R1 = U + n1(n1+1)/2, doubled to stay integral.
    let r_obs_doubled = (2.0 * u_obs).round() as usize + n1 * (n1 + 1);
    let tail: f64 = ways[n1]
        .iter()
        .enumerate()
        .filter(|(s, _)| *s >= r_obs_doubled)
        .map(|(_, w)| *w)
        .sum();
    (tail / total).clamp(0.0, 1.0)
}

/// Normal approximation with tie correction and continuity correction.
fn normal_p_one_tailed(s_rand: &[f64], s_method: &[f64], u_obs: f64) -> f64 {
    let n1 = s_rand.len() as f64;
    let n2 = s_method.len() as f64;
    let n = n1 + n2;
    let mut pooled: Vec<f64> = s_rand.iter().chain(s_method.iter()).copied().collect();
    pooled.sort_by(|a, b| a.partial_cmp(b).expect("finite similarities"));
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i + 1;
        while j < pooled.len() && pooled[j] == pooled[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let mu = n1 * n2 / 2.0;
    let var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        return if u_obs > mu { 0.0 } else { 1.0 };
    }
    let z = (u_obs - 0.5 - mu) / var.sqrt();
    (0.5 * erfc(z / std::f64::consts::SQRT_2)).clamp(0.0, 1.0)
}

/// Complementary error function (rational approximation, |error| < 1.2e-7).
pub fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let ans = t * (-z * z
        - 1.26551223
        + t * (1.00002368
            + t * (0.37409196
                + t * (0.09678418
                    + t * (-0.18628806
                        + t * (0.27886807
                            + t * (-1.13520398
                                + t * (1.48851587
                                    + t * (-0.82215223 + t * 0.17087277)))))))))
        .exp();
    if x >= 0.0 {
        ans
    } else {
        2.0 - ans
    }
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mnsd {
    /// Percentage; more negative = stronger attribution effect.
    pub value: f64,
    /// Half-width of the 95% CI (percentage points); absent for n < 2.
    pub ci95: Option<f64>,
}

/// Average normalized similarity difference:
/// (100/n) * sum_i (s_i / median(S_rand) - 1).
pub fn mean_normalized_similarity_difference(s_method: &[f64], s_rand_all: &[f64]) -> Result<Mnsd> {
    if s_method.is_empty() || s_rand_all.is_empty() {
        return Err(CoreError::EmptyInput(
            "normalized similarity difference needs non-empty lists".into(),
        ));
    }
    let med = median(s_rand_all);
    if med == 0.0 {
        return Err(CoreError::InvalidConfig(
            "random-arm similarity median is zero; normalized difference undefined".into(),
        ));
    }
    let terms: Vec<f64> = s_method.iter().map(|s| s / med - 1.0).collect();
    let n = terms.len() as f64;
    let mean = terms.iter().sum::<f64>() / n;
    let ci95 = if terms.len() >= 2 {
        let var = terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Some(100.0 * 1.96 * (var / n).sqrt())
    } else {
        None
    };
    Ok(Mnsd {
        value: 100.0 * mean,
        ci95,
    })
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Mean and half-width of a normal-approximation 95% CI.
pub fn mean_ci95(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_lists_give_half() {
        let a = vec![0.1, 0.5, 0.9];
        let r = compute_auc(&a, &a).unwrap();
        assert_eq!(r.auc, 0.5);
    }

    #[test]
    fn perfect_separation_gives_one() {
        let r = compute_auc(
            &[0.9, 0.8, 0.7, 0.75, 0.85],
            &[0.2, 0.1, 0.3, 0.25, 0.15],
        )
        .unwrap();
        assert_eq!(r.auc, 1.0);
        // minimum attainable one-tailed p for 5 vs 5: 1/C(10,5)
        assert!((r.p_one_tailed - 1.0 / 252.0).abs() < 1e-12);
    }

    #[test]
    fn hand_counted_pairs() {
        // pairs: (0.9,0.85) win, (0.9,0.1) win, (0.8,0.85) loss, (0.8,0.1) win
        let r = compute_auc(&[0.9, 0.8], &[0.85, 0.1]).unwrap();
        assert_eq!(r.auc, 0.75);
        assert_eq!(r.u, 3.0);
    }

    #[test]
    fn empty_rejected() {
        assert!(compute_auc(&[], &[1.0]).is_err());
        assert!(compute_auc(&[1.0], &[]).is_err());
    }

    #[test]
    fn pair_count_equals_rank_route_with_ties() {
        let rand = vec![0.5, 0.5, 0.7, 0.2, 0.9];
        let method = vec![0.5, 0.1, 0.7, 0.7];
        let r = compute_auc(&rand, &method).unwrap();
        let u_ranks = rank_sum_u(&rand, &method);
        assert_eq!(r.u, u_ranks);
    }

    #[test]
    fn arm_symmetry() {
        let a = vec![0.3, 0.9, 0.5, 0.5];
        let b = vec![0.2, 0.6, 0.5];
        let ab = compute_auc(&a, &b).unwrap().auc;
        let ba = compute_auc(&b, &a).unwrap().auc;
        assert!((ab + ba - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exact_p_matches_brute_force_enumeration() {
        // Oracle: enumerate all C(n, n1) group assignments of the pooled
        // values and count how often U >= U_obs.
        fn brute_p(s_rand: &[f64], s_method: &[f64]) -> f64 {
            let pooled: Vec<f64> = s_rand.iter().chain(s_method.iter()).copied().collect();
            let n = pooled.len();
            let n1 = s_rand.len();
            let u_of = |rand: &[f64], method: &[f64]| {
                let mut u = 0.0;
                for r in rand {
                    for m in method {
                        if r > m {
                            u += 1.0;
                        } else if r == m {
                            u += 0.5;
                        }
                    }
                }
                u
            };
            let u_obs = u_of(s_rand, s_method);
            let mut count = 0usize;
            let mut total = 0usize;
            // iterate bitmasks with n1 bits set
            for mask in 0u32..(1 << n) {
                if (mask.count_ones() as usize) != n1 {
                    continue;
                }
                let mut ra = Vec::new();
                let mut me = Vec::new();
                for (i, v) in pooled.iter().enumerate() {
                    if mask & (1 << i) != 0 {
                        ra.push(*v);
                    } else {
                        me.push(*v);
                    }
                }
                if u_of(&ra, &me) >= u_obs - 1e-9 {
                    count += 1;
                }
                total += 1;
            }
            count as f64 / total as f64
        }

        let cases: Vec<(Vec<f64>, Vec<f64>)> = vec![
            (vec![0.9, 0.8, 0.7, 0.5], vec![0.4, 0.3, 0.6]),
            (vec![0.5, 0.5, 0.2], vec![0.5, 0.1, 0.2, 0.9]),
            (vec![1.0, 1.0, 1.0], vec![1.0, 1.0]),
            (vec![0.1, 0.9, 0.3, 0.3, 0.8], vec![0.3, 0.2, 0.8]),
        ];
        for (ra, me) in cases {
            let r = compute_auc(&ra, &me).unwrap();
            assert!(r.exact);
            let p_brute = brute_p(&ra, &me);
            assert!(
                (r.p_one_tailed - p_brute).abs() < 1e-9,
                "exact {} vs brute {} for {ra:?} / {me:?}",
                r.p_one_tailed,
                p_brute
            );
        }
    }

    #[test]
    fn normal_approx_close_to_exact_midsize() {
        // Force the approximate path by construction and compare to the
        // exact DP on the same data.
        let s_rand: Vec<f64> = (0..60).map(|i| (i as f64 * 0.7919).sin()).collect();
        let s_method: Vec<f64> = (0..60).map(|i| (i as f64 * 1.3).cos() - 0.3).collect();
        let u = {
            let mut u = 0.0;
            for r in &s_rand {
                for m in &s_method {
                    if r > m {
                        u += 1.0;
                    } else if r == m {
                        u += 0.5;
                    }
                }
            }
            u
        };
        let exact = exact_p_one_tailed(&s_rand, &s_method, u);
        let approx = normal_p_one_tailed(&s_rand, &s_method, u);
        assert!(
            (exact - approx).abs() < 5e-3,
            "exact {exact} vs approx {approx}"
        );
    }

    #[test]
    fn erfc_reference_values() {
        assert!((erfc(0.0) - 1.0).abs() < 1e-7);
        assert!((erfc(1.0) - 0.157_299_207_050_285).abs() < 1e-6);
        assert!((erfc(-1.0) - 1.842_700_792_949_715).abs() < 1e-6);
    }

    #[test]
    fn mnsd_formula() {
        // s=[0.5], median(S)=1.0 -> -50%.
        let r = mean_normalized_similarity_difference(&[0.5], &[1.0]).unwrap();
        assert_eq!(r.value, -50.0);
        assert!(r.ci95.is_none());

        // method at the random median -> 0%.
        let r2 = mean_normalized_similarity_difference(&[2.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(r2.value, 0.0);

        assert!(mean_normalized_similarity_difference(&[0.5], &[0.0]).is_err());
    }

    #[test]
    fn median_even_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
