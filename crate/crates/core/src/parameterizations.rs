//! Conversions among the ε, x0 and v views of a model output.
//!
//! With `a = signal_coef[t]`, `s = noise_coef[t]` and `a² + s² = 1`:
//!
//! ```text
//! x_t = a·x0 + s·ε        v = a·ε − s·x0
//! ```
//!
//! Every conversion is linear in `(x_t, prediction)` with per-row
//! coefficients, so the same table drives both plain matrices and graph
//! nodes.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Matrix, Var};
use crate::error::{Error, Result};
use crate::schedulers::ScheduleTable;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionKind {
    Eps,
    #[default]
    X0,
    V,
}

impl PredictionKind {
    pub fn name(self) -> &'static str {
        match self {
            PredictionKind::Eps => "eps",
            PredictionKind::X0 => "x0",
            PredictionKind::V => "v",
        }
    }
}

impl std::fmt::Display for PredictionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A model output together with the context needed to reinterpret it.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub value: Matrix,
    pub kind: PredictionKind,
    /// Timestep of each row.
    pub t: Vec<usize>,
    /// [`ScheduleTable::id`] of the schedule the timesteps refer to.
    pub schedule_id: u64,
}

/// `(c_xt, c_pred)` such that `target = c_xt·x_t + c_pred·pred`.
pub fn coefficients(
    from: PredictionKind,
    to: PredictionKind,
    t: usize,
    table: &ScheduleTable,
) -> Result<(f64, f64)> {
    use PredictionKind::*;
    table.check_t(t)?;
    let a = table.signal_coef[t];
    let s = table.noise_coef[t];
    let singular = |coefficient| Error::Singular {
        from: from.name(),
        to: to.name(),
        t,
        coefficient,
    };
    Ok(match (from, to) {
        (f, t) if f == t => (0.0, 1.0),
        (Eps, X0) => {
            if a == 0.0 {
                return Err(singular("signal"));
            }
            (1.0 / a, -s / a)
        }
        (Eps, V) => {
            if a == 0.0 {
                return Err(singular("signal"));
            }
            (-s / a, 1.0 / a)
        }
        (V, X0) => (a, -s),
        (V, Eps) => (s, a),
        (X0, Eps) => {
            if s == 0.0 {
                return Err(singular("noise"));
            }
            (1.0 / s, -a / s)
        }
        (X0, V) => {
            if s == 0.0 {
                return Err(singular("noise"));
            }
            (a / s, -1.0 / s)
        }
        _ => unreachable!(),
    })
}

fn coefficient_cols(
    from: PredictionKind,
    to: PredictionKind,
    ts: &[usize],
    table: &ScheduleTable,
) -> Result<(Matrix, Matrix)> {
    let mut c_xt = Matrix::zeros((ts.len(), 1));
    let mut c_pred = Matrix::zeros((ts.len(), 1));
    for (i, &t) in ts.iter().enumerate() {
        let (cx, cp) = coefficients(from, to, t, table)?;
        c_xt[[i, 0]] = cx;
        c_pred[[i, 0]] = cp;
    }
    Ok((c_xt, c_pred))
}

fn check_pred(pred: &Prediction, x_t: &Matrix, table: &ScheduleTable) -> Result<()> {
    if pred.schedule_id != table.id() {
        return Err(Error::ScheduleMismatch(format!(
            "prediction refers to schedule {:016x}, table is {}",
            pred.schedule_id,
            table.hash_hex()
        )));
    }
    if pred.value.dim() != x_t.dim() || pred.t.len() != x_t.nrows() {
        return Err(Error::Shape {
            context: "prediction",
            expected: vec![x_t.nrows(), x_t.ncols()],
            actual: vec![pred.value.nrows(), pred.value.ncols()],
        });
    }
    Ok(())
}

/// Reinterpret `pred` as a prediction of kind `to`.
pub fn convert(
    pred: &Prediction,
    x_t: &Matrix,
    to: PredictionKind,
    table: &ScheduleTable,
) -> Result<Matrix> {
    check_pred(pred, x_t, table)?;
    if pred.kind == to {
        return Ok(pred.value.clone());
    }
    let (c_xt, c_pred) = coefficient_cols(pred.kind, to, &pred.t, table)?;
    Ok(x_t * &c_xt + &pred.value * &c_pred)
}

pub fn to_x0(pred: &Prediction, x_t: &Matrix, table: &ScheduleTable) -> Result<Matrix> {
    convert(pred, x_t, PredictionKind::X0, table)
}

pub fn to_eps(pred: &Prediction, x_t: &Matrix, table: &ScheduleTable) -> Result<Matrix> {
    convert(pred, x_t, PredictionKind::Eps, table)
}

pub fn to_v(pred: &Prediction, x_t: &Matrix, table: &ScheduleTable) -> Result<Matrix> {
    convert(pred, x_t, PredictionKind::V, table)
}

/// Graph version of [`convert`]; gradient flows through `value` only.
pub fn convert_var(
    g: &Graph,
    value: Var,
    x_t: &Matrix,
    ts: &[usize],
    from: PredictionKind,
    to: PredictionKind,
    table: &ScheduleTable,
) -> Result<Var> {
    if from == to {
        return Ok(value);
    }
    let (c_xt, c_pred) = coefficient_cols(from, to, ts, table)?;
    let scaled = g.mul_col(value, c_pred);
    let base = g.constant(x_t * &c_xt);
    Ok(g.add(base, scaled))
}

/// `v = signal·ε − noise·x0` built from ground truth.
pub fn v_from(x0: &Matrix, eps: &Matrix, ts: &[usize], table: &ScheduleTable) -> Matrix {
    eps * &table.signal_col(ts) - &(x0 * &table.noise_col(ts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedulers::{build_schedule, standard_normal, ScheduleConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use PredictionKind::*;

    fn pred(value: Matrix, kind: PredictionKind, t: usize, table: &ScheduleTable) -> Prediction {
        let rows = value.nrows();
        Prediction {
            value,
            kind,
            t: vec![t; rows],
            schedule_id: table.id(),
        }
    }

    #[test]
    fn identity_and_clean_level() {
        let table = build_schedule(&ScheduleConfig::sd()).unwrap();
        let x = ndarray::array![[1.0, -3.0]];
        let p = pred(x.clone(), X0, 10, &table);
        assert_eq!(to_x0(&p, &x, &table).unwrap(), x);

        // a = 1, s = 0
        let mut t1 = table.clone();
        t1.signal_coef[0] = 1.0;
        t1.noise_coef[0] = 0.0;
        let eps = ndarray::array![[0.2, 0.4]];
        let p = pred(eps.clone(), Eps, 0, &t1);
        assert_eq!(to_x0(&p, &x, &t1).unwrap(), x);
        // v = ε at a = 1
        let v = v_from(&x, &eps, &[0], &t1);
        assert_eq!(v, eps);
        assert_eq!(to_v(&p, &x, &t1).unwrap(), eps);
    }

    #[test]
    fn v_roundtrip_recovers_x0() {
        let table = build_schedule(&ScheduleConfig::sd()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &t in &[0usize, 17, 500, 999] {
            let x0 = standard_normal((8, 3), &mut rng);
            let eps = standard_normal((8, 3), &mut rng);
            let x_t = table.corrupt(&x0, &eps, t).unwrap();
            let v = v_from(&x0, &eps, &vec![t; 8], &table);
            let got = to_x0(&pred(v, V, t, &table), &x_t, &table).unwrap();
            assert!((&got - &x0).iter().all(|d| d.abs() < 1e-6));
        }
    }

    #[test]
    fn terminal_zero_snr_v_is_total_and_eps_is_singular() {
        let table = build_schedule(&ScheduleConfig::sd().with_zero_terminal_snr(true)).unwrap();
        let t = table.terminal();
        let x0 = ndarray::array![[0.5, -1.5]];
        let eps = ndarray::array![[1.0, 2.0]];
        let x_t = table.corrupt(&x0, &eps, t).unwrap();
        let v = v_from(&x0, &eps, &[t], &table);
        assert_eq!(v, -&x0);
        let back = to_x0(&pred(v, V, t, &table), &x_t, &table).unwrap();
        assert_eq!(back, x0);
        let err = to_x0(&pred(eps, Eps, t, &table), &x_t, &table).unwrap_err();
        assert!(matches!(err, Error::Singular { coefficient: "signal", .. }));
    }

    #[test]
    fn eps_v_eps_roundtrip() {
        let table = build_schedule(&ScheduleConfig::sd()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x_t = standard_normal((16, 4), &mut rng);
        let eps = standard_normal((16, 4), &mut rng);
        let t = 400;
        let v = to_v(&pred(eps.clone(), Eps, t, &table), &x_t, &table).unwrap();
        let back = to_eps(&pred(v, V, t, &table), &x_t, &table).unwrap();
        assert!((&back - &eps).iter().all(|d| d.abs() < 1e-6));
    }

    #[test]
    fn schedule_identity_is_checked() {
        let a = build_schedule(&ScheduleConfig::sd()).unwrap();
        let b = build_schedule(&ScheduleConfig::sd().with_zero_terminal_snr(true)).unwrap();
        let x = ndarray::array![[1.0]];
        let p = pred(x.clone(), V, 3, &a);
        assert!(matches!(to_x0(&p, &x, &b), Err(Error::ScheduleMismatch(_))));
    }

    #[test]
    fn graph_conversion_matches_matrix_conversion() {
        let table = build_schedule(&ScheduleConfig::sd()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x_t = standard_normal((4, 2), &mut rng);
        let value = standard_normal((4, 2), &mut rng);
        let ts = vec![1, 200, 600, 999];
        let g = Graph::new();
        let v = g.constant(value.clone());
        let out = convert_var(&g, v, &x_t, &ts, Eps, X0, &table).unwrap();
        let p = Prediction {
            value,
            kind: Eps,
            t: ts,
            schedule_id: table.id(),
        };
        let want = to_x0(&p, &x_t, &table).unwrap();
        assert!((&g.value(out) - &want).iter().all(|d| d.abs() < 1e-12));
    }
}
