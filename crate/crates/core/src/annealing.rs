//! Staircase decay of the reconstruction and consistency weights.
//!
//! Training is split into `K` equal segments; during segment `j` the
//! regression terms are scaled by `1 - j / (K - 1)`, reaching exactly zero in
//! the last segment. The adversarial term is never annealed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnealConfig {
    #[serde(default)]
    pub enabled: bool,
    /// Number of segments `K`.
    #[serde(default = "default_segments")]
    pub segments: usize,
    /// Base weight `λ'` applied to reconstruction and consistency.
    #[serde(default = "default_base")]
    pub base_weight: f64,
}

fn default_segments() -> usize {
    5
}

fn default_base() -> f64 {
    1.0
}

impl Default for AnnealConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            segments: default_segments(),
            base_weight: default_base(),
        }
    }
}

impl AnnealConfig {
    pub fn validate(&self, total: u64) -> Result<()> {
        if self.segments < 2 {
            return Err(Error::config("segments", format!("must be >= 2, got {}", self.segments)));
        }
        if total < self.segments as u64 {
            return Err(Error::config(
                "iterations",
                format!("must be >= anneal segments ({total} < {})", self.segments),
            ));
        }
        if !(self.base_weight >= 0.0) {
            return Err(Error::config("base_weight", "must be >= 0"));
        }
        Ok(())
    }

    /// First iteration at which the multiplier is zero: `ceil(N (K-1) / K)`.
    pub fn zero_from(&self, total: u64) -> u64 {
        let k = self.segments as u64;
        (total * (k - 1)).div_ceil(k)
    }
}

/// `1 - floor(n K / N) / (K - 1)` clamped to `[0, 1]`; `1.0` when disabled.
///
/// The segment index is computed as `floor(n K / N)`, which equals
/// `floor(n / (N / K))` for real-valued `N / K`.
pub fn anneal_multiplier(n: u64, total: u64, cfg: &AnnealConfig) -> Result<f64> {
    if n >= total {
        return Err(Error::Precondition(format!(
            "iteration {n} is past the end of training ({total})"
        )));
    }
    if !cfg.enabled {
        return Ok(1.0);
    }
    let k = cfg.segments as u64;
    let segment = (n as u128 * k as u128 / total as u128) as f64;
    Ok((1.0 - segment / (k - 1) as f64).clamp(0.0, 1.0))
}
