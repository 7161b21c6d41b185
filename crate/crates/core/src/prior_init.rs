//! Informative terminal prior.
//!
//! Schedules without zero terminal SNR leave a little signal at `T-1`, so
//! the true marginal there is `corrupt(x̃, ε, T-1)` with `x̃` distributed like
//! the data. We approximate `x̃` by a diagonal Gaussian fitted to data moments.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::schedulers::{standard_normal, ScheduleTable};

/// Default cap on the number of samples used for moment estimation.
pub const DEFAULT_STATS_SAMPLES: usize = 10_000;

/// Below this terminal SNR the informative prior is numerically unhelpful.
pub const LOW_TERMINAL_SNR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorStats {
    pub mean: Vec<f64>,
    /// Population standard deviation.
    pub std: Vec<f64>,
    pub n_samples: usize,
}

impl PriorStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Per-dimension mean and population std over the first `n` rows of the stream.
pub fn estimate_stats<I, R>(rows: I, n: usize) -> Result<PriorStats>
where
    I: IntoIterator<Item = R>,
    R: AsRef<[f64]>,
{
    if n < 2 {
        return Err(Error::Precondition(format!("need at least 2 samples, got n={n}")));
    }
    let mut sum: Vec<f64> = Vec::new();
    let mut collected: Vec<Vec<f64>> = Vec::new();
    for row in rows.into_iter().take(n) {
        let row = row.as_ref();
        if sum.is_empty() {
            sum = vec![0.0; row.len()];
        } else if row.len() != sum.len() {
            return Err(Error::Shape {
                context: "prior statistics sample",
                expected: vec![sum.len()],
                actual: vec![row.len()],
            });
        }
        for (s, x) in sum.iter_mut().zip(row) {
            *s += x;
        }
        collected.push(row.to_vec());
    }
    let count = collected.len();
    if count == 0 {
        return Err(Error::Dataset("empty sample stream".into()));
    }
    if count < 2 {
        return Err(Error::Precondition(format!("need at least 2 samples, stream had {count}")));
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut var = vec![0.0; mean.len()];
    for row in &collected {
        for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    let std = var.iter().map(|v| (v / count as f64).sqrt()).collect();
    Ok(PriorStats {
        mean,
        std,
        n_samples: count,
    })
}

/// [`estimate_stats`] over the rows of a matrix, using at most
/// `min(rows, DEFAULT_STATS_SAMPLES)` rows when `n` is `None`.
pub fn estimate_stats_matrix(data: &Matrix, n: Option<usize>) -> Result<PriorStats> {
    let n = n.unwrap_or(data.nrows().min(DEFAULT_STATS_SAMPLES));
    estimate_stats(data.rows().into_iter().map(|r| r.to_vec()), n)
}

/// Warns and returns `true` when the terminal SNR is too low for the
/// informative prior to matter.
pub fn warn_if_low_terminal_snr(table: &ScheduleTable) -> bool {
    let snr = table.snr[table.terminal()];
    if snr < LOW_TERMINAL_SNR {
        log::warn!(
            "terminal SNR {snr:.3e} is below {LOW_TERMINAL_SNR:e}; the informative prior is \
             numerically fragile here, prefer adapting to a zero-terminal-SNR schedule"
        );
        true
    } else {
        false
    }
}

/// `signal[T-1]·(mean + std⊙ε') + noise[T-1]·ε` for given draws.
pub fn informative_prior_with_noise(
    stats: &PriorStats,
    table: &ScheduleTable,
    eps_data: &Matrix,
    eps: &Matrix,
) -> Result<Matrix> {
    let d = stats.dim();
    for m in [eps_data, eps] {
        if m.ncols() != d || m.dim() != eps_data.dim() {
            return Err(Error::Shape {
                context: "informative prior noise",
                expected: vec![eps_data.nrows(), d],
                actual: vec![m.nrows(), m.ncols()],
            });
        }
    }
    let last = table.terminal();
    let (a, s) = (table.signal_coef[last], table.noise_coef[last]);
    let mut out = eps * s;
    for (mut row, e) in out.rows_mut().into_iter().zip(eps_data.rows()) {
        for j in 0..d {
            row[j] += a * (stats.mean[j] + stats.std[j] * e[j]);
        }
    }
    Ok(out)
}

/// Draw `batch` terminal inputs from the informative prior.
pub fn sample_informative_prior(
    stats: &PriorStats,
    table: &ScheduleTable,
    batch: usize,
    rng: &mut impl Rng,
) -> Result<Matrix> {
    let d = stats.dim();
    let eps_data = standard_normal((batch, d), rng);
    let eps = standard_normal((batch, d), rng);
    informative_prior_with_noise(stats, table, &eps_data, &eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedulers::{build_schedule, ScheduleConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_point_moments() {
        let s = estimate_stats([[1.0, 1.0], [-1.0, -1.0]], 2).unwrap();
        assert_eq!(s.mean, vec![0.0, 0.0]);
        assert_eq!(s.std, vec![1.0, 1.0]);
        assert_eq!(s.n_samples, 2);
    }

    #[test]
    fn constant_data_and_errors() {
        let rows = vec![[3.0, -2.0]; 5];
        let s = estimate_stats(&rows, 5).unwrap();
        assert_eq!(s.mean, vec![3.0, -2.0]);
        assert_eq!(s.std, vec![0.0, 0.0]);
        assert!(estimate_stats(&rows, 1).is_err());
        assert!(matches!(
            estimate_stats(Vec::<[f64; 2]>::new(), 4),
            Err(Error::Dataset(_))
        ));
        assert!(estimate_stats([vec![1.0], vec![1.0, 2.0]], 2).is_err());
    }

    #[test]
    fn zero_terminal_snr_is_pure_noise() {
        let table = build_schedule(&ScheduleConfig::sd().with_zero_terminal_snr(true)).unwrap();
        let stats = PriorStats {
            mean: vec![5.0, -5.0],
            std: vec![2.0, 2.0],
            n_samples: 10,
        };
        let e1 = standard_normal((4, 2), &mut ChaCha8Rng::seed_from_u64(0));
        let e2 = standard_normal((4, 2), &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(informative_prior_with_noise(&stats, &table, &e1, &e2).unwrap(), e2);
    }

    #[test]
    fn low_snr_warning_threshold() {
        let sd = build_schedule(&ScheduleConfig::sd()).unwrap();
        assert!(!warn_if_low_terminal_snr(&sd));
        let zt = build_schedule(&ScheduleConfig::sd().with_zero_terminal_snr(true)).unwrap();
        assert!(warn_if_low_terminal_snr(&zt));
    }
}
