//! Descending noise-scale schedule used for generation (and scoring).

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::Result;

/// Strictly descending sigma schedule with exact endpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub values: Vec<f64>,
}

impl GenerationSchedule {
    pub fn num_steps(&self) -> usize {
        self.values.len()
    }
}

/// Power-interpolated schedule:
/// sigma_i = (sigma_max^(1/rho) + (i/(n-1)) * (sigma_min^(1/rho) - sigma_max^(1/rho)))^rho.
pub fn build_generation_schedule(
    sigma_min: f64,
    sigma_max: f64,
    rho: f64,
    num_steps: usize,
) -> Result<GenerationSchedule> {
    if !(sigma_min > 0.0 && sigma_min < sigma_max) {
        return Err(CoreError::InvalidConfig(format!(
            "need 0 < sigma_min < sigma_max, got ({sigma_min}, {sigma_max})"
        )));
    }
    if num_steps < 2 {
        return Err(CoreError::InvalidConfig(format!(
            "schedule needs num_steps >= 2, got {num_steps}"
        )));
    }
    if rho <= 0.0 {
        return Err(CoreError::InvalidConfig(format!("rho must be > 0, got {rho}")));
    }

    let inv_rho = 1.0 / rho;
    let hi = sigma_max.powf(inv_rho);
    let lo = sigma_min.powf(inv_rho);
    let n = num_steps;
    let mut values: Vec<f64> = (0..n)
        .map(|i| (hi + (i as f64 / (n - 1) as f64) * (lo - hi)).powf(rho))
        .collect();
    // Anchor the endpoints exactly; powf round-trips can drift in the ulps.
    values[0] = sigma_max;
    values[n - 1] = sigma_min;

    for w in values.windows(2) {
        if !(w[1] < w[0]) {
            return Err(CoreError::InvalidConfig(format!(
                "schedule not strictly decreasing near {} -> {}",
                w[0], w[1]
            )));
        }
    }

    Ok(GenerationSchedule {
        sigma_min,
        sigma_max,
        rho,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_anchored() {
        let s = build_generation_schedule(0.002, 80.0, 7.0, 32).unwrap();
        assert_eq!(s.values[0], 80.0);
        assert_eq!(s.values[31], 0.002);
        assert_eq!(s.num_steps(), 32);
    }

    #[test]
    fn rho_one_is_linear() {
        let s = build_generation_schedule(1.0, 5.0, 1.0, 5).unwrap();
        for (i, v) in s.values.iter().enumerate() {
            assert!((v - (5.0 - i as f64)).abs() < 1e-12, "value {i} = {v}");
        }
    }

    #[test]
    fn long_schedule_stays_strictly_decreasing() {
        // 142 values: the scorer keeps the first 100 of these.
        let s = build_generation_schedule(0.002, 80.0, 7.0, 142).unwrap();
        assert_eq!(s.values.len(), 142);
        for w in s.values.windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn invalid_bounds_rejected() {
        assert!(build_generation_schedule(0.0, 80.0, 7.0, 32).is_err());
        assert!(build_generation_schedule(80.0, 0.002, 7.0, 32).is_err());
        assert!(build_generation_schedule(0.002, 80.0, 7.0, 1).is_err());
        assert!(build_generation_schedule(0.002, 80.0, -1.0, 32).is_err());
    }
}
