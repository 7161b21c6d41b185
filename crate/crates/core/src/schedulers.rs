//! Discrete noise schedules and the forward (noising) process.
//!
//! Timesteps are 0-indexed: `t = 0` is the least corrupted level and
//! `t = T - 1` the terminal one. A sample at level `t` is
//! `signal_coef[t] * x0 + noise_coef[t] * eps` with
//! `signal_coef = sqrt(alpha_bar)` and `noise_coef = sqrt(1 - alpha_bar)`.

use std::io::Write;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    ScaledLinear,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub num_steps: usize,
    pub schedule_kind: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(default)]
    pub zero_terminal_snr: bool,
}

/// Named schedules that can be referenced from a config file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulePreset {
    /// Stable Diffusion's training schedule: 1000 steps, scaled-linear
    /// betas from 0.00085 to 0.012.
    Sd,
    /// The original DDPM schedule: 1000 steps, linear betas from 1e-4 to 0.02.
    Ddpm,
    /// Improved-DDPM cosine schedule over 1000 steps.
    Cosine,
}

impl SchedulePreset {
    pub fn config(self) -> ScheduleConfig {
        match self {
            SchedulePreset::Sd => ScheduleConfig::sd(),
            SchedulePreset::Ddpm => ScheduleConfig {
                num_steps: 1000,
                schedule_kind: ScheduleKind::Linear,
                beta_start: 1e-4,
                beta_end: 0.02,
                zero_terminal_snr: false,
            },
            SchedulePreset::Cosine => ScheduleConfig {
                num_steps: 1000,
                schedule_kind: ScheduleKind::Cosine,
                beta_start: 1e-4,
                beta_end: 0.02,
                zero_terminal_snr: false,
            },
        }
    }
}

/// Config-file form of a schedule: either a preset name with optional
/// overrides, or every field spelled out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScheduleSpec {
    Preset {
        preset: SchedulePreset,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        num_steps: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        zero_terminal_snr: Option<bool>,
    },
    Explicit(ScheduleConfig),
}

impl ScheduleSpec {
    pub fn resolve(&self) -> ScheduleConfig {
        match self {
            ScheduleSpec::Preset {
                preset,
                num_steps,
                zero_terminal_snr,
            } => {
                let mut cfg = preset.config();
                if let Some(n) = num_steps {
                    cfg.num_steps = *n;
                }
                if let Some(z) = zero_terminal_snr {
                    cfg.zero_terminal_snr = *z;
                }
                cfg
            }
            ScheduleSpec::Explicit(cfg) => cfg.clone(),
        }
    }
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec::Preset {
            preset: SchedulePreset::Sd,
            num_steps: None,
            zero_terminal_snr: None,
        }
    }
}

impl ScheduleConfig {
    pub fn sd() -> Self {
        Self {
            num_steps: 1000,
            schedule_kind: ScheduleKind::ScaledLinear,
            beta_start: 0.00085,
            beta_end: 0.012,
            zero_terminal_snr: false,
        }
    }

    pub fn with_zero_terminal_snr(mut self, on: bool) -> Self {
        self.zero_terminal_snr = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_steps < 2 {
            return Err(Error::config("num_steps", format!("must be >= 2, got {}", self.num_steps)));
        }
        if !(self.beta_start > 0.0 && self.beta_start < 1.0) {
            return Err(Error::config(
                "beta_start",
                format!("must lie in (0, 1), got {}", self.beta_start),
            ));
        }
        if !(self.beta_end > 0.0 && self.beta_end < 1.0) {
            return Err(Error::config(
                "beta_end",
                format!("must lie in (0, 1), got {}", self.beta_end),
            ));
        }
        if self.beta_start > self.beta_end {
            return Err(Error::config(
                "beta_start",
                format!("must not exceed beta_end ({} > {})", self.beta_start, self.beta_end),
            ));
        }
        Ok(())
    }
}

/// Precomputed per-timestep quantities. Immutable after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleTable {
    config: ScheduleConfig,
    pub betas: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub signal_coef: Vec<f64>,
    pub noise_coef: Vec<f64>,
    pub snr: Vec<f64>,
    id: u64,
}

fn linspace(start: f64, end: f64, n: usize) -> Vec<f64> {
    let step = (end - start) / (n - 1) as f64;
    (0..n).map(|i| start + step * i as f64).collect()
}

fn cosine_betas(n: usize) -> Vec<f64> {
    let s = 0.008;
    let f = |t: f64| ((t + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
    (0..n)
        .map(|i| {
            let t1 = i as f64 / n as f64;
            let t2 = (i + 1) as f64 / n as f64;
            (1.0 - f(t2) / f(t1)).min(0.999)
        })
        .collect()
}

/// Build the schedule table for `cfg`.
pub fn build_schedule(cfg: &ScheduleConfig) -> Result<ScheduleTable> {
    cfg.validate()?;
    let n = cfg.num_steps;
    let betas = match cfg.schedule_kind {
        ScheduleKind::Linear => linspace(cfg.beta_start, cfg.beta_end, n),
        ScheduleKind::ScaledLinear => linspace(cfg.beta_start.sqrt(), cfg.beta_end.sqrt(), n)
            .into_iter()
            .map(|b| b * b)
            .collect(),
        ScheduleKind::Cosine => cosine_betas(n),
    };
    let mut alpha_bar = Vec::with_capacity(n);
    let mut prod = 1.0;
    for b in &betas {
        prod *= 1.0 - b;
        alpha_bar.push(prod);
    }

    let (betas, alpha_bar, signal_coef) = if cfg.zero_terminal_snr {
        let s: Vec<f64> = alpha_bar.iter().map(|a| a.sqrt()).collect();
        let s0 = s[0];
        let s_last = s[n - 1];
        let scale = s0 / (s0 - s_last);
        let mut rescaled: Vec<f64> = s.iter().map(|&v| (v - s_last) * scale).collect();
        rescaled[0] = s0;
        rescaled[n - 1] = 0.0;
        let ab: Vec<f64> = rescaled.iter().map(|v| v * v).collect();
        let mut new_betas = Vec::with_capacity(n);
        new_betas.push(1.0 - ab[0]);
        for t in 1..n {
            new_betas.push(1.0 - ab[t] / ab[t - 1]);
        }
        (new_betas, ab, rescaled)
    } else {
        let s = alpha_bar.iter().map(|a| a.sqrt()).collect();
        (betas, alpha_bar, s)
    };
    let noise_coef = alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect();
    let snr = alpha_bar.iter().map(|a| a / (1.0 - a)).collect();

    let mut h = Sha256::new();
    h.update((n as u64).to_le_bytes());
    for b in &betas {
        h.update(b.to_bits().to_le_bytes());
    }
    let digest = h.finalize();
    let id = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));

    Ok(ScheduleTable {
        config: cfg.clone(),
        betas,
        alpha_bar,
        signal_coef,
        noise_coef,
        snr,
        id,
    })
}

/// `max(t - s, 0)`.
pub fn skip(t: usize, s: usize) -> usize {
    t.saturating_sub(s)
}

impl ScheduleTable {
    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn terminal(&self) -> usize {
        self.num_steps() - 1
    }

    /// Identity of this table; equal tables share it.
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn hash_hex(&self) -> String {
        format!("{:016x}", self.id)
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.num_steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                num_steps: self.num_steps(),
            });
        }
        Ok(())
    }

    fn check_ts(&self, ts: &[usize], rows: usize) -> Result<()> {
        if ts.len() != rows {
            return Err(Error::Shape {
                context: "timesteps",
                expected: vec![rows],
                actual: vec![ts.len()],
            });
        }
        ts.iter().try_for_each(|&t| self.check_t(t))
    }

    /// Range-checked [`skip`].
    pub fn skip(&self, t: usize, s: usize) -> Result<usize> {
        self.check_t(t)?;
        Ok(skip(t, s))
    }

    /// Per-row signal coefficients as a B×1 column.
    pub fn signal_col(&self, ts: &[usize]) -> Matrix {
        Array2::from_shape_fn((ts.len(), 1), |(i, _)| self.signal_coef[ts[i]])
    }

    pub fn noise_col(&self, ts: &[usize]) -> Matrix {
        Array2::from_shape_fn((ts.len(), 1), |(i, _)| self.noise_coef[ts[i]])
    }

    pub fn snr_col(&self, ts: &[usize]) -> Matrix {
        Array2::from_shape_fn((ts.len(), 1), |(i, _)| self.snr[ts[i]])
    }

    /// `signal_coef[t] * x0 + noise_coef[t] * eps` for one timestep.
    pub fn corrupt(&self, x0: &Matrix, eps: &Matrix, t: usize) -> Result<Matrix> {
        self.corrupt_rows(x0, eps, &vec![t; x0.nrows()])
    }

    /// Row `i` corrupted to level `ts[i]`.
    pub fn corrupt_rows(&self, x0: &Matrix, eps: &Matrix, ts: &[usize]) -> Result<Matrix> {
        check_same_shape("corrupt", x0, eps)?;
        self.check_ts(ts, x0.nrows())?;
        Ok(x0 * &self.signal_col(ts) + eps * &self.noise_col(ts))
    }

    /// Noise implied by a corrupted sample: `(x_t - signal * x0) / noise`.
    /// Rows whose noise coefficient is zero get zero noise.
    pub fn implied_noise(&self, x0: &Matrix, x_t: &Matrix, ts: &[usize]) -> Result<Matrix> {
        check_same_shape("implied_noise", x0, x_t)?;
        self.check_ts(ts, x0.nrows())?;
        let mut out = x_t - &(x0 * &self.signal_col(ts));
        for (mut row, &t) in out.rows_mut().into_iter().zip(ts) {
            let n = self.noise_coef[t];
            if n > 0.0 {
                row.mapv_inplace(|v| v / n);
            } else {
                row.fill(0.0);
            }
        }
        Ok(out)
    }

    /// Transition coefficients of `q(x_t | x_s)`: `(sqrt(ab_t/ab_s), sqrt(1 - ab_t/ab_s))`.
    fn transition(&self, s: usize, t: usize) -> (f64, f64) {
        let ratio = if self.alpha_bar[s] > 0.0 {
            self.alpha_bar[t] / self.alpha_bar[s]
        } else {
            0.0
        };
        (ratio.sqrt(), (1.0 - ratio).max(0.0).sqrt())
    }

    /// Continue the forward chain from `x_tm` at level `t_m[i]` to `t[i]`
    /// using the supplied standard-normal noise `xi`.
    ///
    /// The process is Markov, so `x0` only fixes shapes; it is kept in the
    /// signature to mirror `q(x_t | x_{t_m}, x0)`.
    pub fn forward_chain_with_noise(
        &self,
        x0: &Matrix,
        x_tm: &Matrix,
        t_m: &[usize],
        t: &[usize],
        xi: &Matrix,
    ) -> Result<Matrix> {
        check_same_shape("forward_chain", x0, x_tm)?;
        check_same_shape("forward_chain", x_tm, xi)?;
        self.check_ts(t_m, x0.nrows())?;
        self.check_ts(t, x0.nrows())?;
        let mut out = Matrix::zeros(x_tm.dim());
        for i in 0..x0.nrows() {
            if t_m[i] >= t[i] {
                return Err(Error::Precondition(format!(
                    "forward_chain needs t_m < t, got t_m={} t={}",
                    t_m[i], t[i]
                )));
            }
            let (a, s) = self.transition(t_m[i], t[i]);
            for j in 0..x0.ncols() {
                out[[i, j]] = a * x_tm[[i, j]] + s * xi[[i, j]];
            }
        }
        Ok(out)
    }

    pub fn forward_chain(
        &self,
        x0: &Matrix,
        x_tm: &Matrix,
        t_m: &[usize],
        t: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Matrix> {
        let xi = standard_normal(x0.dim(), rng);
        self.forward_chain_with_noise(x0, x_tm, t_m, t, &xi)
    }

    /// Draw `x_s ~ q(x_s | x_t, x0)` for `s[i] < t[i]`; jointly with `x_t`
    /// this is a pair on one forward trajectory.
    pub fn posterior_with_noise(
        &self,
        x0: &Matrix,
        x_t: &Matrix,
        s: &[usize],
        t: &[usize],
        xi: &Matrix,
    ) -> Result<Matrix> {
        check_same_shape("posterior", x0, x_t)?;
        check_same_shape("posterior", x0, xi)?;
        self.check_ts(s, x0.nrows())?;
        self.check_ts(t, x0.nrows())?;
        let mut out = Matrix::zeros(x0.dim());
        for i in 0..x0.nrows() {
            let (si, ti) = (s[i], t[i]);
            if si >= ti {
                return Err(Error::Precondition(format!(
                    "posterior needs s < t, got s={si} t={ti}"
                )));
            }
            let a_s = self.signal_coef[si];
            let var_s = 1.0 - self.alpha_bar[si];
            let var_t = 1.0 - self.alpha_bar[ti];
            let (a_ts, sd_ts) = self.transition(si, ti);
            let var_ts = sd_ts * sd_ts;
            for j in 0..x0.ncols() {
                out[[i, j]] = if var_t > 0.0 {
                    let mean = (a_s * var_ts * x0[[i, j]] + a_ts * var_s * x_t[[i, j]]) / var_t;
                    let sd = (var_ts * var_s / var_t).sqrt();
                    mean + sd * xi[[i, j]]
                } else {
                    a_s * x0[[i, j]]
                };
            }
        }
        Ok(out)
    }

    /// CSV with columns `t,beta,alpha_bar,snr`.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "t,beta,alpha_bar,snr")?;
        for t in 0..self.num_steps() {
            writeln!(w, "{},{},{},{}", t, self.betas[t], self.alpha_bar[t], self.snr[t])?;
        }
        Ok(())
    }

    /// True when `self` is the zero-terminal-SNR rescale of `base`.
    pub fn is_terminal_rescale_of(&self, base: &ScheduleTable) -> bool {
        if self.num_steps() != base.num_steps() || self.snr[self.terminal()] != 0.0 {
            return false;
        }
        let cfg = base.config.clone().with_zero_terminal_snr(true);
        match build_schedule(&cfg) {
            Ok(expected) => expected
                .signal_coef
                .iter()
                .zip(&self.signal_coef)
                .all(|(a, b)| (a - b).abs() <= 1e-12),
            Err(_) => false,
        }
    }
}

pub(crate) fn check_same_shape(context: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape {
            context,
            expected: vec![a.nrows(), a.ncols()],
            actual: vec![b.nrows(), b.ncols()],
        });
    }
    Ok(())
}

pub fn standard_normal(shape: (usize, usize), rng: &mut impl Rng) -> Matrix {
    Array2::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkipMap {
    /// Skip for the adversarial teacher.
    pub k: usize,
    /// Skip for the consistency target.
    pub m: usize,
}

impl Default for SkipMap {
    fn default() -> Self {
        Self { k: 250, m: 25 }
    }
}

impl SkipMap {
    pub fn validate(&self, num_steps: usize) -> Result<()> {
        if self.m < 1 {
            return Err(Error::config("m", "must be >= 1"));
        }
        if self.m > self.k {
            return Err(Error::config("m", format!("must not exceed k ({} > {})", self.m, self.k)));
        }
        if self.k >= num_steps {
            return Err(Error::config(
                "k",
                format!("must be below num_steps ({} >= {num_steps})", self.k),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sd_terminal_coefficients() {
        let table = build_schedule(&ScheduleConfig::sd()).unwrap();
        assert!((table.signal_coef[999] - 0.068265).abs() < 1e-4);
        assert!((table.noise_coef[999] - 0.99767).abs() < 1e-4);
        assert!((table.snr[999] - 0.004682).abs() < 1e-5);
    }

    #[test]
    fn zero_terminal_rescale() {
        let base = build_schedule(&ScheduleConfig::sd()).unwrap();
        let table = build_schedule(&ScheduleConfig::sd().with_zero_terminal_snr(true)).unwrap();
        assert_eq!(table.snr[999], 0.0);
        assert_eq!(table.alpha_bar[999], 0.0);
        assert_eq!(table.signal_coef[0], base.signal_coef[0]);
        assert!(table.is_terminal_rescale_of(&base));
        assert!(!base.is_terminal_rescale_of(&base));
        let x0 = array![[1.5, -2.0]];
        let eps = array![[0.3, 0.7]];
        assert_eq!(table.corrupt(&x0, &eps, 999).unwrap(), eps);
    }

    #[test]
    fn two_step_linear_alpha_bar() {
        let cfg = ScheduleConfig {
            num_steps: 2,
            schedule_kind: ScheduleKind::Linear,
            beta_start: 0.1,
            beta_end: 0.2,
            zero_terminal_snr: false,
        };
        let table = build_schedule(&cfg).unwrap();
        assert!((table.alpha_bar[0] - 0.9).abs() < 1e-15);
        assert!((table.alpha_bar[1] - 0.72).abs() < 1e-15);
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let mut cfg = ScheduleConfig::sd();
        cfg.num_steps = 1;
        assert!(matches!(build_schedule(&cfg), Err(Error::Config { field: "num_steps", .. })));
        let mut cfg = ScheduleConfig::sd();
        cfg.beta_start = 0.5;
        assert!(matches!(build_schedule(&cfg), Err(Error::Config { field: "beta_start", .. })));
        let mut cfg = ScheduleConfig::sd();
        cfg.beta_end = 1.0;
        assert!(matches!(build_schedule(&cfg), Err(Error::Config { field: "beta_end", .. })));
    }

    #[test]
    fn snr_strictly_decreasing_and_unit_norm() {
        for kind in [ScheduleKind::Linear, ScheduleKind::ScaledLinear, ScheduleKind::Cosine] {
            for zt in [false, true] {
                let cfg = ScheduleConfig {
                    num_steps: 1000,
                    schedule_kind: kind,
                    beta_start: 1e-4,
                    beta_end: 0.02,
                    zero_terminal_snr: zt,
                };
                let table = build_schedule(&cfg).unwrap();
                for t in 0..1000 {
                    let s = table.signal_coef[t].powi(2) + table.noise_coef[t].powi(2);
                    assert!((s - 1.0).abs() < 1e-6);
                    assert!(table.snr[t] >= 0.0);
                    if t > 0 {
                        assert!(table.snr[t] < table.snr[t - 1], "{kind:?} zt={zt} t={t}");
                        assert!(table.alpha_bar[t] < table.alpha_bar[t - 1]);
                    }
                }
            }
        }
    }

    #[test]
    fn corrupt_examples() {
        let cfg = ScheduleConfig {
            num_steps: 2,
            schedule_kind: ScheduleKind::Linear,
            beta_start: 0.1,
            beta_end: 0.2,
            zero_terminal_snr: false,
        };
        let mut table = build_schedule(&cfg).unwrap();
        table.alpha_bar[0] = 0.25;
        table.signal_coef[0] = 0.5;
        table.noise_coef[0] = 0.75f64.sqrt();
        let out = table.corrupt(&array![[1.0]], &array![[0.0]], 0).unwrap();
        assert!((out[[0, 0]] - 0.5).abs() < 1e-15);
        assert!(table.corrupt(&array![[1.0]], &array![[0.0, 1.0]], 0).is_err());
        assert!(matches!(
            table.corrupt(&array![[1.0]], &array![[0.0]], 2),
            Err(Error::TimestepOutOfRange { .. })
        ));
    }

    #[test]
    fn skip_clamps() {
        assert_eq!(skip(600, 250), 350);
        assert_eq!(skip(100, 250), 0);
        assert_eq!(skip(42, 0), 42);
        let table = build_schedule(&ScheduleConfig::sd()).unwrap();
        assert!(table.skip(1000, 1).is_err());
    }

    #[test]
    fn skip_map_validation() {
        assert!(SkipMap { k: 250, m: 25 }.validate(1000).is_ok());
        assert!(SkipMap { k: 25, m: 250 }.validate(1000).is_err());
        assert!(SkipMap { k: 1000, m: 25 }.validate(1000).is_err());
        assert!(SkipMap { k: 5, m: 0 }.validate(1000).is_err());
    }

    #[test]
    fn forward_chain_rejects_non_increasing_levels() {
        let table = build_schedule(&ScheduleConfig::sd()).unwrap();
        let x = array![[1.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(table.forward_chain(&x, &x, &[10], &[10], &mut rng).is_err());
        assert!(table.forward_chain(&x, &x, &[11], &[10], &mut rng).is_err());
    }

    #[test]
    fn forward_chain_is_identity_without_noise_between_levels() {
        let cfg = ScheduleConfig {
            num_steps: 4,
            schedule_kind: ScheduleKind::Linear,
            beta_start: 0.1,
            beta_end: 0.2,
            zero_terminal_snr: false,
        };
        let mut table = build_schedule(&cfg).unwrap();
        // zero betas between levels 1 and 3
        table.alpha_bar[2] = table.alpha_bar[1];
        table.alpha_bar[3] = table.alpha_bar[1];
        let x0 = array![[0.4, 2.0]];
        let x_tm = array![[0.1, -0.3]];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = table.forward_chain(&x0, &x_tm, &[1], &[3], &mut rng).unwrap();
        assert_eq!(out, x_tm);
    }

    #[test]
    fn forward_chain_marginal_matches_corrupt() {
        let table = build_schedule(&ScheduleConfig::sd()).unwrap();
        let n = 100_000;
        let (t_m, t) = (300, 600);
        let x0 = Matrix::from_elem((n, 1), 1.5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let eps = standard_normal((n, 1), &mut rng);
        let x_tm = table.corrupt(&x0, &eps, t_m).unwrap();
        let x_t = table
            .forward_chain(&x0, &x_tm, &vec![t_m; n], &vec![t; n], &mut rng)
            .unwrap();
        let mean = x_t.mean().unwrap();
        let var = x_t.mapv(|v| (v - mean).powi(2)).sum() / (n - 1) as f64;
        let want_mean = table.signal_coef[t] * 1.5;
        let want_var = table.noise_coef[t].powi(2);
        let se_mean = (want_var / n as f64).sqrt();
        let se_var = want_var * (2.0 / (n - 1) as f64).sqrt();
        assert!((mean - want_mean).abs() < 3.0 * se_mean, "mean {mean} vs {want_mean}");
        assert!((var - want_var).abs() < 3.0 * se_var, "var {var} vs {want_var}");
    }

    #[test]
    fn posterior_pairs_have_the_forward_joint_law() {
        // With x0 = 0 the forward chain gives Var(x_s) = 1 - ab_s and
        // Cov(x_s, x_t) = sqrt(ab_t / ab_s) * Var(x_s).
        let table = build_schedule(&ScheduleConfig::sd()).unwrap();
        let n = 100_000;
        let (s, t) = (200, 700);
        let x0 = Matrix::zeros((n, 1));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let eps = standard_normal((n, 1), &mut rng);
        let x_t = table.corrupt(&x0, &eps, t).unwrap();
        let xi = standard_normal((n, 1), &mut rng);
        let x_s = table
            .posterior_with_noise(&x0, &x_t, &vec![s; n], &vec![t; n], &xi)
            .unwrap();
        let var_s = x_s.mapv(|v| v * v).mean().unwrap();
        let cross = (&x_s * &x_t).mean().unwrap();
        let want_var = 1.0 - table.alpha_bar[s];
        let want_cross = (table.alpha_bar[t] / table.alpha_bar[s]).sqrt() * want_var;
        assert!((var_s - want_var).abs() < 0.01, "{var_s} vs {want_var}");
        assert!((cross - want_cross).abs() < 0.01, "{cross} vs {want_cross}");
    }

    #[test]
    fn presets_resolve_with_overrides() {
        let spec: ScheduleSpec = toml::from_str("preset = \"sd\"\nzero_terminal_snr = true").unwrap();
        let cfg = spec.resolve();
        assert_eq!(cfg.beta_start, 0.00085);
        assert!(cfg.zero_terminal_snr);
        let spec: ScheduleSpec = toml::from_str(
            "num_steps = 10\nschedule_kind = \"linear\"\nbeta_start = 0.1\nbeta_end = 0.2",
        )
        .unwrap();
        assert_eq!(spec.resolve().num_steps, 10);
    }

    #[test]
    fn csv_export_has_one_row_per_step() {
        let table = build_schedule(&ScheduleConfig::sd()).unwrap();
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1001);
        assert!(text.starts_with("t,beta,alpha_bar,snr\n0,"));
    }
}
