//! Checkpoint arithmetic over named weight sets.

use indexmap::IndexMap;

use crate::autodiff::Matrix;
use crate::error::{Error, Result};
pub use crate::params::WeightSet;

/// Bounds policy for the combination coefficients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CoefficientCheck {
    /// Require `α, β ∈ (0, 1]`.
    #[default]
    Strict,
    /// Accept any finite coefficient.
    Override,
}

/// `base + α(up - base) + β(tuned - base)`, elementwise.
pub fn combine(
    base: &WeightSet,
    up: &WeightSet,
    tuned: &WeightSet,
    alpha: f64,
    beta: f64,
    check: CoefficientCheck,
) -> Result<WeightSet> {
    for (name, v) in [("alpha", alpha), ("beta", beta)] {
        if !v.is_finite() {
            return Err(Error::Weights(format!("{name} must be finite, got {v}")));
        }
        if check == CoefficientCheck::Strict && !(v > 0.0 && v <= 1.0) {
            return Err(Error::Weights(format!(
                "{name} = {v} is outside (0, 1]; pass an override to allow it"
            )));
        }
    }
    base.check_aligned(up, "combine: up")?;
    base.check_aligned(tuned, "combine: tuned")?;
    let mut out = base.clone();
    for (name, w) in out.iter_mut() {
        let b = base.get(name).expect("aligned");
        let u = up.get(name).expect("aligned");
        let t = tuned.get(name).expect("aligned");
        ndarray::Zip::from(w)
            .and(b)
            .and(u)
            .and(t)
            .for_each(|w, &b, &u, &t| *w = b + alpha * (u - b) + beta * (t - b));
    }
    Ok(out)
}

/// One entry of a weight delta.
#[derive(Clone, Debug, PartialEq)]
pub enum DeltaEntry {
    Dense(Matrix),
    /// Materialises as `b · a`, with `b` of shape (rows, r) and `a` of shape (r, cols).
    LowRank { a: Matrix, b: Matrix },
}

impl DeltaEntry {
    pub fn rank(&self) -> Option<usize> {
        match self {
            DeltaEntry::Dense(_) => None,
            DeltaEntry::LowRank { a, .. } => Some(a.nrows()),
        }
    }

    pub fn materialize(&self, name: &str) -> Result<Matrix> {
        match self {
            DeltaEntry::Dense(m) => Ok(m.clone()),
            DeltaEntry::LowRank { a, b } => {
                if b.ncols() != a.nrows() {
                    return Err(Error::Weights(format!(
                        "rank mismatch for '{name}': B is {}x{}, A is {}x{}",
                        b.nrows(),
                        b.ncols(),
                        a.nrows(),
                        a.ncols()
                    )));
                }
                Ok(b.dot(a))
            }
        }
    }
}

/// Named deltas to add onto a weight set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightDelta {
    pub entries: IndexMap<String, DeltaEntry>,
}

impl WeightDelta {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, entry: DeltaEntry) {
        self.entries.insert(name.into(), entry);
    }

    /// `tuned - base` as dense entries.
    pub fn difference(tuned: &WeightSet, base: &WeightSet) -> Result<Self> {
        base.check_aligned(tuned, "delta difference")?;
        let mut d = Self::new();
        for (name, t) in tuned.iter() {
            d.insert(name, DeltaEntry::Dense(t - base.get(name).expect("aligned")));
        }
        Ok(d)
    }
}

/// `base + scale · delta` for every named target in `delta`.
pub fn apply_lora(base: &WeightSet, delta: &WeightDelta, scale: f64) -> Result<WeightSet> {
    let mut out = base.clone();
    for (name, entry) in &delta.entries {
        let target = out
            .get_mut(name)
            .ok_or_else(|| Error::Weights(format!("delta targets unknown tensor '{name}'")))?;
        let d = entry.materialize(name)?;
        if d.dim() != target.dim() {
            return Err(Error::Weights(format!(
                "delta for '{name}' has shape {:?}, target has {:?}",
                d.dim(),
                target.dim()
            )));
        }
        target.scaled_add(scale, &d);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn ws(v: f64) -> WeightSet {
        let mut w = WeightSet::new();
        w.insert("a", array![[v, 2.0 * v]]);
        w.insert("b", array![[v], [-v]]);
        w
    }

    #[test]
    fn combine_special_cases() {
        let (b, u, t) = (ws(1.0), ws(3.0), ws(-2.0));
        let full = combine(&b, &u, &t, 1.0, 1.0, CoefficientCheck::Strict).unwrap();
        assert_eq!(full, ws(3.0 - 2.0 - 1.0));
        assert!(combine(&b, &u, &t, 1.0, 0.0, CoefficientCheck::Strict).is_err());
        let up_only = combine(&b, &u, &t, 1.0, 0.0, CoefficientCheck::Override).unwrap();
        assert_eq!(up_only, u);
        assert!(combine(&b, &u, &t, 1.5, 0.5, CoefficientCheck::Strict).is_err());
        assert!(combine(&b, &u, &t, f64::NAN, 0.5, CoefficientCheck::Override).is_err());
    }

    #[test]
    fn combine_rejects_misaligned_sets() {
        let mut missing = WeightSet::new();
        missing.insert("a", array![[1.0, 2.0]]);
        assert!(combine(&ws(1.0), &missing, &ws(1.0), 1.0, 1.0, CoefficientCheck::Strict).is_err());
        let mut wrong = ws(1.0);
        *wrong.get_mut("a").unwrap() = array![[1.0]];
        assert!(combine(&ws(1.0), &ws(1.0), &wrong, 1.0, 1.0, CoefficientCheck::Strict).is_err());
    }

    #[test]
    fn lora_cases() {
        let base = ws(1.0);
        let mut delta = WeightDelta::new();
        delta.insert(
            "a",
            DeltaEntry::LowRank {
                a: array![[1.0, 1.0]],
                b: array![[2.0]],
            },
        );
        assert_eq!(apply_lora(&base, &delta, 0.0).unwrap(), base);
        let out = apply_lora(&base, &delta, 0.5).unwrap();
        assert_eq!(out.get("a").unwrap(), &array![[2.0, 3.0]]);
        assert_eq!(out.get("b").unwrap(), base.get("b").unwrap());

        let mut bad = WeightDelta::new();
        bad.insert(
            "a",
            DeltaEntry::LowRank {
                a: array![[1.0, 1.0]],
                b: array![[2.0, 1.0]],
            },
        );
        assert!(apply_lora(&base, &bad, 1.0).is_err());
        let mut unknown = WeightDelta::new();
        unknown.insert("zzz", DeltaEntry::Dense(array![[1.0]]));
        assert!(apply_lora(&base, &unknown, 1.0).is_err());
        let mut wrong_shape = WeightDelta::new();
        wrong_shape.insert("b", DeltaEntry::Dense(array![[1.0, 1.0]]));
        assert!(apply_lora(&base, &wrong_shape, 1.0).is_err());
    }

    #[test]
    fn difference_round_trips() {
        let d = WeightDelta::difference(&ws(4.0), &ws(1.0)).unwrap();
        assert_eq!(apply_lora(&ws(1.0), &d, 1.0).unwrap(), ws(4.0));
    }
}
