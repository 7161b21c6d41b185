//! Sample-quality and diversity metrics for desk-scale runs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::schedulers::standard_normal;

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_dims(a: &Matrix, b: &Matrix, context: &'static str) -> Result<()> {
    if a.ncols() != b.ncols() {
        return Err(Error::Shape {
            context,
            expected: vec![a.ncols()],
            actual: vec![b.ncols()],
        });
    }
    Ok(())
}

/// Fraction of centers with at least `min_mass` of all samples within `radius`.
pub fn mode_coverage(samples: &Matrix, centers: &Matrix, radius: f64, min_mass: f64) -> Result<f64> {
    if samples.nrows() == 0 {
        return Err(Error::Precondition("mode coverage needs samples".into()));
    }
    if centers.nrows() == 0 {
        return Err(Error::Precondition("mode coverage needs centers".into()));
    }
    check_dims(samples, centers, "mode coverage")?;
    let r2 = radius * radius;
    let n = samples.nrows() as f64;
    let covered = centers
        .rows()
        .into_iter()
        .filter(|c| {
            let hits = samples.rows().into_iter().filter(|s| sq_dist(*s, *c) <= r2).count();
            hits as f64 / n >= min_mass
        })
        .count();
    Ok(covered as f64 / centers.nrows() as f64)
}

/// Fraction of samples within `radius` of some center.
pub fn high_quality_fraction(samples: &Matrix, centers: &Matrix, radius: f64) -> Result<f64> {
    if samples.nrows() == 0 {
        return Err(Error::Precondition("quality fraction needs samples".into()));
    }
    check_dims(samples, centers, "quality fraction")?;
    let r2 = radius * radius;
    let good = samples
        .rows()
        .into_iter()
        .filter(|s| centers.rows().into_iter().any(|c| sq_dist(*s, c) <= r2))
        .count();
    Ok(good as f64 / samples.nrows() as f64)
}

/// Unbiased RBF-kernel MMD², summed over bandwidths `h` with
/// `k(x, y) = exp(-‖x - y‖² / (2h²))`.
pub fn mmd(a: &Matrix, b: &Matrix, bandwidths: &[f64]) -> Result<f64> {
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(Error::Precondition("MMD needs at least 2 samples per set".into()));
    }
    if bandwidths.is_empty() || bandwidths.iter().any(|h| !(*h > 0.0)) {
        return Err(Error::Precondition("MMD bandwidths must be positive".into()));
    }
    check_dims(a, b, "mmd")?;
    let gammas: Vec<f64> = bandwidths.iter().map(|h| 1.0 / (2.0 * h * h)).collect();
    let kernel = |d2: f64| gammas.iter().map(|g| (-g * d2).exp()).sum::<f64>();
    let within = |x: &Matrix| {
        let n = x.nrows();
        let mut s = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                s += kernel(sq_dist(x.row(i), x.row(j)));
            }
        }
        2.0 * s / (n * (n - 1)) as f64
    };
    let mut cross = 0.0;
    for ra in a.rows() {
        for rb in b.rows() {
            cross += kernel(sq_dist(ra, rb));
        }
    }
    cross /= (a.nrows() * b.nrows()) as f64;
    Ok(within(a) + within(b) - 2.0 * cross)
}

/// Mean over random unit directions of the squared 1D Wasserstein-2
/// distance between projections, square-rooted. Directions come from a
/// fixed seed so the metric is deterministic.
pub fn sliced_w2(a: &Matrix, b: &Matrix, projections: usize, seed: u64) -> Result<f64> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::Precondition("sliced W2 needs non-empty sets".into()));
    }
    check_dims(a, b, "sliced w2")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dirs = standard_normal((a.ncols(), projections.max(1)), &mut rng);
    for mut col in dirs.columns_mut() {
        let n = col.dot(&col).sqrt().max(1e-12);
        col.mapv_inplace(|x| x / n);
    }
    let pa = a.dot(&dirs);
    let pb = b.dot(&dirs);
    let q = pa.nrows().max(pb.nrows());
    let mut total = 0.0;
    for j in 0..dirs.ncols() {
        let mut xa: Vec<f64> = pa.column(j).to_vec();
        let mut xb: Vec<f64> = pb.column(j).to_vec();
        xa.sort_by(f64::total_cmp);
        xb.sort_by(f64::total_cmp);
        let mut s = 0.0;
        for i in 0..q {
            let u = (i as f64 + 0.5) / q as f64;
            let d = quantile(&xa, u) - quantile(&xb, u);
            s += d * d;
        }
        total += s / q as f64;
    }
    Ok((total / dirs.ncols() as f64).sqrt())
}

fn quantile(sorted: &[f64], u: f64) -> f64 {
    let i = ((u * sorted.len() as f64) as usize).min(sorted.len() - 1);
    sorted[i]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilitySummary {
    /// Mean over the final window.
    pub mean: f64,
    pub variance: f64,
    pub min: f64,
    pub collapse_suspect: bool,
}

/// Summarise the last `window` discriminator losses; flags the run when
/// the windowed mean falls below `threshold`.
pub fn stability_trace(d_loss: &[f64], window: usize, threshold: f64) -> Result<StabilitySummary> {
    if window == 0 || d_loss.len() < window {
        return Err(Error::Precondition(format!(
            "stability trace needs at least {window} entries, got {}",
            d_loss.len()
        )));
    }
    let tail = &d_loss[d_loss.len() - window..];
    let mean = tail.iter().sum::<f64>() / window as f64;
    let variance = tail.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / window as f64;
    let min = tail.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(StabilitySummary {
        mean,
        variance,
        min,
        collapse_suspect: mean < threshold,
    })
}

/// Midpoint between the mean windowed D losses of two groups of runs.
pub fn calibrate_threshold(stable_means: &[f64], collapsing_means: &[f64]) -> Result<f64> {
    if stable_means.is_empty() || collapsing_means.is_empty() {
        return Err(Error::Precondition("calibration needs runs in both groups".into()));
    }
    let m = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(0.5 * (m(stable_means) + m(collapsing_means)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub step: u64,
    pub mode_coverage: Option<f64>,
    pub high_quality_fraction: Option<f64>,
    pub mmd: f64,
    pub w2_1d_projections: f64,
    pub d_loss_mean: Option<f64>,
    pub d_loss_min: Option<f64>,
}

/// Metric settings shared by every evaluation of a run.
#[derive(Clone, Debug)]
pub struct EvalSettings<'a> {
    pub centers: Option<&'a Matrix>,
    pub radius: f64,
    pub min_mass: f64,
    pub bandwidths: &'a [f64],
    pub projections: usize,
    pub seed: u64,
}

impl EvalReport {
    pub const CSV_FIELDS: [&'static str; 6] = [
        "mode_coverage",
        "high_quality_fraction",
        "mmd",
        "w2",
        "d_loss_mean",
        "d_loss_min",
    ];

    pub fn compute(
        step: u64,
        samples: &Matrix,
        reference: &Matrix,
        settings: &EvalSettings,
        d_losses: Option<&StabilitySummary>,
    ) -> Result<Self> {
        if samples.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                context: "evaluation samples".into(),
            });
        }
        let (mode_coverage, high_quality_fraction) = match settings.centers {
            Some(c) => (
                Some(mode_coverage(samples, c, settings.radius, settings.min_mass)?),
                Some(high_quality_fraction(samples, c, settings.radius)?),
            ),
            None => (None, None),
        };
        Ok(Self {
            step,
            mode_coverage,
            high_quality_fraction,
            mmd: mmd(samples, reference, settings.bandwidths)?,
            w2_1d_projections: sliced_w2(samples, reference, settings.projections, settings.seed)?,
            d_loss_mean: d_losses.map(|s| s.mean),
            d_loss_min: d_losses.map(|s| s.min),
        })
    }

    pub fn csv_values(&self) -> [String; 6] {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        [
            f(self.mode_coverage),
            f(self.high_quality_fraction),
            format!("{:.6}", self.mmd),
            format!("{:.6}", self.w2_1d_projections),
            f(self.d_loss_mean),
            f(self.d_loss_min),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn coverage_basics() {
        let c = array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        assert_eq!(mode_coverage(&c, &c, 0.1, 0.2).unwrap(), 1.0);
        let one = Matrix::from_elem((10, 2), 0.0);
        assert_eq!(mode_coverage(&one, &c, 0.1, 0.02).unwrap(), 0.25);
        assert!(mode_coverage(&Matrix::zeros((0, 2)), &c, 0.1, 0.02).is_err());
        assert_eq!(high_quality_fraction(&c, &c, 0.1).unwrap(), 1.0);
    }

    #[test]
    fn mmd_identical_sets_and_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = standard_normal((200, 2), &mut rng);
        let bw = [0.5, 1.0];
        assert!(mmd(&a, &a, &bw).unwrap() <= 1e-6);
        let mut rev = a.clone();
        rev.invert_axis(ndarray::Axis(0));
        let b = standard_normal((150, 2), &mut rng) + 1.0;
        let x = mmd(&a, &b, &bw).unwrap();
        let y = mmd(&rev, &b, &bw).unwrap();
        assert!((x - y).abs() < 1e-12);
        assert!(mmd(&a.slice(ndarray::s![..1, ..]).to_owned(), &b, &bw).is_err());
    }

    #[test]
    fn sliced_w2_of_a_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = standard_normal((2000, 1), &mut rng);
        let b = &a + 3.0;
        assert!((sliced_w2(&a, &b, 4, 0).unwrap() - 3.0).abs() < 1e-9);
        assert_eq!(sliced_w2(&a, &a, 4, 0).unwrap(), 0.0);
    }

    #[test]
    fn stability_summary() {
        let s = stability_trace(&[1.0; 10], 5, 0.5).unwrap();
        assert_eq!(s.variance, 0.0);
        assert!(!s.collapse_suspect);
        assert!(stability_trace(&[0.1; 10], 5, 0.5).unwrap().collapse_suspect);
        assert!(stability_trace(&[1.0; 3], 5, 0.5).is_err());
        assert!((calibrate_threshold(&[1.2, 1.4], &[0.2]).unwrap() - 0.75).abs() < 1e-12);
    }
}
