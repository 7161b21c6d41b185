//! Desk-scale datasets.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Eight isotropic Gaussians evenly spaced on a circle.
    EightGaussians {
        #[serde(default = "default_radius")]
        radius: f64,
        #[serde(default = "default_mode_std")]
        std: f64,
    },
    TwoMoons {
        #[serde(default = "default_noise")]
        noise: f64,
    },
    SwissRoll {
        #[serde(default = "default_noise")]
        noise: f64,
    },
    /// A single point.
    PointMass { point: Vec<f64> },
    /// Uniform over a finite set of points.
    Points { points: Vec<Vec<f64>> },
    /// Procedural `size × size` grayscale images of a bright square on a
    /// dark background, pixel values in `[-1, 1]`.
    SyntheticSquares {
        #[serde(default = "default_image_size")]
        size: usize,
    },
    /// Grayscale PNG files from a directory, resized to `size × size`.
    ImageDir {
        path: PathBuf,
        #[serde(default = "default_image_size")]
        size: usize,
    },
}

fn default_radius() -> f64 {
    2.0
}

fn default_mode_std() -> f64 {
    0.1
}

fn default_noise() -> f64 {
    0.05
}

fn default_image_size() -> usize {
    16
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::EightGaussians {
            radius: default_radius(),
            std: default_mode_std(),
        }
    }
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Dataset> {
        let images = match self {
            DatasetSpec::ImageDir { path, size } => Some(load_image_dir(path, *size)?),
            DatasetSpec::PointMass { point } if point.is_empty() => {
                return Err(Error::Dataset("point mass needs a non-empty point".into()))
            }
            DatasetSpec::Points { points } => {
                let d = points.first().map(Vec::len).unwrap_or(0);
                if d == 0 || points.iter().any(|p| p.len() != d) {
                    return Err(Error::Dataset("points must be non-empty and of equal length".into()));
                }
                None
            }
            _ => None,
        };
        Ok(Dataset {
            spec: self.clone(),
            images,
        })
    }
}

/// A loaded dataset that can be sampled with an injected RNG.
#[derive(Clone, Debug)]
pub struct Dataset {
    spec: DatasetSpec,
    images: Option<Matrix>,
}

impl Dataset {
    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    /// Shape of one sample: `[d]` for vectors, `[h, w]` for images.
    pub fn data_shape(&self) -> Vec<usize> {
        match &self.spec {
            DatasetSpec::EightGaussians { .. } | DatasetSpec::TwoMoons { .. } | DatasetSpec::SwissRoll { .. } => {
                vec![2]
            }
            DatasetSpec::PointMass { point } => vec![point.len()],
            DatasetSpec::Points { points } => vec![points[0].len()],
            DatasetSpec::SyntheticSquares { size } | DatasetSpec::ImageDir { size, .. } => vec![*size, *size],
        }
    }

    pub fn data_dim(&self) -> usize {
        self.data_shape().iter().product()
    }

    pub fn is_image(&self) -> bool {
        self.data_shape().len() == 2
    }

    /// Mode centers for mixture-like datasets.
    pub fn centers(&self) -> Option<Matrix> {
        match &self.spec {
            DatasetSpec::EightGaussians { radius, .. } => {
                let mut c = Matrix::zeros((8, 2));
                for i in 0..8 {
                    let a = 2.0 * PI * i as f64 / 8.0;
                    c[[i, 0]] = radius * a.cos();
                    c[[i, 1]] = radius * a.sin();
                }
                Some(c)
            }
            DatasetSpec::PointMass { point } => Some(Matrix::from_shape_vec((1, point.len()), point.clone()).ok()?),
            DatasetSpec::Points { points } => {
                let d = points[0].len();
                Matrix::from_shape_vec((points.len(), d), points.concat()).ok()
            }
            _ => None,
        }
    }

    /// Per-mode standard deviation, where the dataset has one.
    pub fn mode_std(&self) -> Option<f64> {
        match &self.spec {
            DatasetSpec::EightGaussians { std, .. } => Some(*std),
            DatasetSpec::PointMass { .. } | DatasetSpec::Points { .. } => Some(0.0),
            _ => None,
        }
    }

    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Matrix {
        let d = self.data_dim();
        let mut out = Matrix::zeros((n, d));
        match &self.spec {
            DatasetSpec::EightGaussians { std, .. } => {
                let c = self.centers().expect("mixture");
                for mut row in out.rows_mut() {
                    let k = rng.gen_range(0..8);
                    for j in 0..2 {
                        let z: f64 = StandardNormal.sample(rng);
                        row[j] = c[[k, j]] + std * z;
                    }
                }
            }
            DatasetSpec::TwoMoons { noise } => {
                for mut row in out.rows_mut() {
                    let a = rng.gen_range(0.0..PI);
                    let (x, y) = if rng.gen_bool(0.5) {
                        (a.cos(), a.sin())
                    } else {
                        (1.0 - a.cos(), 0.5 - a.sin())
                    };
                    let (zx, zy): (f64, f64) = (StandardNormal.sample(rng), StandardNormal.sample(rng));
                    row[0] = x - 0.5 + noise * zx;
                    row[1] = y - 0.25 + noise * zy;
                }
            }
            DatasetSpec::SwissRoll { noise } => {
                for mut row in out.rows_mut() {
                    let t = 1.5 * PI * (1.0 + 2.0 * rng.gen::<f64>());
                    let (zx, zy): (f64, f64) = (StandardNormal.sample(rng), StandardNormal.sample(rng));
                    row[0] = t * t.cos() / 5.0 + noise * zx;
                    row[1] = t * t.sin() / 5.0 + noise * zy;
                }
            }
            DatasetSpec::PointMass { point } => {
                for mut row in out.rows_mut() {
                    row.assign(&ndarray::ArrayView1::from(point.as_slice()));
                }
            }
            DatasetSpec::Points { points } => {
                for mut row in out.rows_mut() {
                    let p = &points[rng.gen_range(0..points.len())];
                    row.assign(&ndarray::ArrayView1::from(p.as_slice()));
                }
            }
            DatasetSpec::SyntheticSquares { size } => {
                let size = *size;
                for mut row in out.rows_mut() {
                    row.fill(-1.0);
                    let side = rng.gen_range(size / 4..=size / 2).max(1);
                    let (r0, c0) = (rng.gen_range(0..=size - side), rng.gen_range(0..=size - side));
                    for r in r0..r0 + side {
                        for c in c0..c0 + side {
                            row[r * size + c] = 1.0;
                        }
                    }
                }
            }
            DatasetSpec::ImageDir { .. } => {
                let imgs = self.images.as_ref().expect("loaded");
                for mut row in out.rows_mut() {
                    row.assign(&imgs.row(rng.gen_range(0..imgs.nrows())));
                }
            }
        }
        out
    }
}

fn load_image_dir(path: &Path, size: usize) -> Result<Matrix> {
    let entries = std::fs::read_dir(path).map_err(|e| Error::io(path, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Dataset(format!("no PNG files in {}", path.display())));
    }
    let mut out = Matrix::zeros((files.len(), size * size));
    for (i, f) in files.iter().enumerate() {
        let img = image::open(f)
            .map_err(|e| Error::Dataset(format!("{}: {e}", f.display())))?
            .resize_exact(size as u32, size as u32, image::imageops::FilterType::Triangle)
            .to_luma8();
        for (j, p) in img.pixels().enumerate() {
            out[[i, j]] = p.0[0] as f64 / 127.5 - 1.0;
        }
    }
    Ok(out)
}
