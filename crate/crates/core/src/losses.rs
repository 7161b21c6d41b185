//! Training losses.
//!
//! All scalar losses are batch means of per-row terms. Logits are clamped to
//! `±LOGIT_CLAMP` before the log-sigmoid.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Graph, Matrix, Var};
use crate::error::{Error, Result};
use crate::networks::{Discriminator, FeatureExtractor, Generator};
use crate::schedulers::ScheduleTable;

pub const LOGIT_CLAMP: f64 = 30.0;

/// Which distribution plays "real" for the discriminator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvFormulation {
    /// Stop-gradient generations from the less corrupted level `t_k`.
    #[default]
    Cooperative,
    /// Data samples.
    NaiveReal,
    /// `q(x_{t-1} | x0)` against re-corrupted generations `q(x_{t-1} | x = G(x_t, t))`.
    CorruptedUfogen,
}

impl AdvFormulation {
    pub fn name(self) -> &'static str {
        match self {
            AdvFormulation::Cooperative => "cooperative",
            AdvFormulation::NaiveReal => "naive_real",
            AdvFormulation::CorruptedUfogen => "corrupted_ufogen",
        }
    }
}

/// Functional form of the adversarial objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvObjective {
    /// D: `-log σ(real) - log(1 - σ(fake))`; G: `-log σ(fake)`.
    #[default]
    NonSaturating,
    /// D maximises `log σ(real) - log σ(fake)` with no fake-side `log(1 - σ)`
    /// term; G is unchanged.
    Literal,
}

/// Distance used by the reconstruction and consistency terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    #[default]
    Mse,
    LatentPerceptual,
}

/// A resolved distance metric.
#[derive(Clone, Debug)]
pub enum Distance {
    /// Mean over dimensions of squared differences.
    Mse,
    /// Squared L2 distance between frozen bottleneck features.
    LatentPerceptual(FeatureExtractor),
}

/// `λ_rec(t) = SNR(t)`.
pub fn lambda_rec(table: &ScheduleTable, t: usize) -> f64 {
    table.snr[t]
}

/// `λ_con(t) = 1 / (1/SNR(t) - 1/SNR(t_m))`, evaluated as
/// `SNR(t)·SNR(t_m) / (SNR(t_m) - SNR(t))`. Zero when `SNR(t) = 0`; zero with
/// a warning when the two levels have equal SNR.
pub fn lambda_con(table: &ScheduleTable, t: usize, t_m: usize) -> f64 {
    lambda_con_from_snr(table.snr[t], table.snr[t_m])
}

pub fn lambda_con_from_snr(snr_t: f64, snr_tm: f64) -> f64 {
    if snr_t == 0.0 {
        return 0.0;
    }
    if snr_tm <= snr_t {
        log::warn!("degenerate consistency weight: SNR(t_m)={snr_tm} <= SNR(t)={snr_t}; using 0");
        return 0.0;
    }
    if snr_tm.is_infinite() {
        return snr_t;
    }
    snr_t * snr_tm / (snr_tm - snr_t)
}

/// Per-row weights for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_rec: Vec<f64>,
    pub lambda_con: Vec<f64>,
    pub anneal_multiplier: f64,
    pub adv_weight: f64,
}

impl LossWeights {
    pub fn for_batch(
        table: &ScheduleTable,
        ts: &[usize],
        tms: &[usize],
        anneal_multiplier: f64,
        adv_weight: f64,
    ) -> Self {
        Self {
            lambda_rec: ts.iter().map(|&t| lambda_rec(table, t)).collect(),
            lambda_con: ts.iter().zip(tms).map(|(&t, &tm)| lambda_con(table, t, tm)).collect(),
            anneal_multiplier,
            adv_weight,
        }
    }
}

fn col(values: &[f64]) -> Matrix {
    Matrix::from_shape_vec((values.len(), 1), values.to_vec()).expect("column")
}

fn check_finite(g: &Graph, v: Var, context: &str) -> Result<()> {
    if g.value_ref(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: context.to_string(),
        })
    }
}

/// Discriminator loss from real/fake logits.
pub fn d_loss_from_logits(g: &Graph, real: Var, fake: Var, objective: AdvObjective) -> Var {
    let real_term = {
        let l = g.log_sigmoid(real, LOGIT_CLAMP);
        g.mean(l)
    };
    match objective {
        AdvObjective::NonSaturating => {
            // log(1 - σ(x)) = log σ(-x)
            let neg = g.neg(fake);
            let l = g.log_sigmoid(neg, LOGIT_CLAMP);
            let fake_term = g.mean(l);
            let s = g.add(real_term, fake_term);
            g.neg(s)
        }
        AdvObjective::Literal => {
            let l = g.log_sigmoid(fake, LOGIT_CLAMP);
            let fake_term = g.mean(l);
            g.sub(fake_term, real_term)
        }
    }
}

/// Generator loss `-log σ(fake)` from fake logits.
pub fn g_loss_from_logits(g: &Graph, fake: Var) -> Var {
    let l = g.log_sigmoid(fake, LOGIT_CLAMP);
    let m = g.mean(l);
    g.neg(m)
}

/// Discriminator side of the cooperative adversarial loss: teacher samples
/// are real, student samples fake. The teacher branch must be detached.
#[allow(clippy::too_many_arguments)]
pub fn coop_adv_d_loss(
    g: &Graph,
    disc: &Discriminator,
    dp: &Bound,
    x_teacher: Var,
    x_student: Var,
    ts: &[usize],
    cond: Option<&Matrix>,
    objective: AdvObjective,
) -> Result<Var> {
    if g.requires_grad(x_teacher) {
        return Err(Error::Contract(
            "adversarial teacher samples carry gradient; detach them first".into(),
        ));
    }
    let real = disc.logits(g, dp, x_teacher, ts, cond)?;
    let fake = disc.logits(g, dp, x_student, ts, cond)?;
    check_finite(g, real, "discriminator logits")?;
    check_finite(g, fake, "discriminator logits")?;
    Ok(d_loss_from_logits(g, real, fake, objective))
}

/// Generator side: non-saturating `-log σ(D(x_student, t))`.
pub fn coop_adv_g_loss(
    g: &Graph,
    disc: &Discriminator,
    dp: &Bound,
    x_student: Var,
    ts: &[usize],
    cond: Option<&Matrix>,
) -> Result<Var> {
    let fake = disc.logits(g, dp, x_student, ts, cond)?;
    check_finite(g, fake, "discriminator logits")?;
    Ok(g_loss_from_logits(g, fake))
}

/// Per-row distance, shape (B, 1).
pub fn distance_rows(
    g: &Graph,
    distance: &Distance,
    a: Var,
    b: Var,
    cond: Option<&Matrix>,
) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        let (ra, ca) = g.shape(a);
        let (rb, cb) = g.shape(b);
        return Err(Error::Shape {
            context: "distance",
            expected: vec![ra, ca],
            actual: vec![rb, cb],
        });
    }
    Ok(match distance {
        Distance::Mse => {
            let d = g.sub(a, b);
            let sq = g.square(d);
            g.row_mean(sq)
        }
        Distance::LatentPerceptual(f) => {
            let fa = f.extract(g, a, cond)?;
            let fb = f.extract(g, b, cond)?;
            let d = g.sub(fa, fb);
            let sq = g.square(d);
            g.row_sum(sq)
        }
    })
}

fn weighted_mean(g: &Graph, rows: Var, weights: &[f64]) -> Var {
    let w = g.mul_col(rows, col(weights));
    g.mean(w)
}

/// `mean_i λ_con[i] · d(student_i, sg(target_i))`.
pub fn consistency_loss(
    g: &Graph,
    student: Var,
    target: Var,
    lambda_con: &[f64],
    distance: &Distance,
    cond: Option<&Matrix>,
) -> Result<Var> {
    if g.requires_grad(target) {
        return Err(Error::Contract(
            "consistency target carries gradient; detach it first".into(),
        ));
    }
    let d = distance_rows(g, distance, student, target, cond)?;
    Ok(weighted_mean(g, d, lambda_con))
}

/// `mean_i λ_rec[i] · d(student_i, x0_i)`.
pub fn reconstruction_loss(
    g: &Graph,
    student: Var,
    x0: &Matrix,
    lambda_rec: &[f64],
    distance: &Distance,
    cond: Option<&Matrix>,
) -> Result<Var> {
    let (r, c) = g.shape(student);
    if x0.dim() != (r, c) {
        return Err(Error::Shape {
            context: "reconstruction",
            expected: vec![r, c],
            actual: vec![x0.nrows(), x0.ncols()],
        });
    }
    let target = g.constant(x0.clone());
    let d = distance_rows(g, distance, student, target, cond)?;
    Ok(weighted_mean(g, d, lambda_rec))
}

/// Batch mean of `‖F(z_pred) - F(z_target)‖²`.
pub fn latent_perceptual(
    g: &Graph,
    extractor: &FeatureExtractor,
    z_pred: Var,
    z_target: Var,
    cond: Option<&Matrix>,
) -> Result<Var> {
    extractor.ensure_frozen()?;
    let d = distance_rows(g, &Distance::LatentPerceptual(extractor.clone()), z_pred, z_target, cond)?;
    Ok(g.mean(d))
}

/// Consistency loss evaluated end to end from the generator: the student
/// sees `x_t` at `t`, the detached target sees `x_tm` at `t_m`.
#[allow(clippy::too_many_arguments)]
pub fn consistency_loss_for(
    g: &Graph,
    gen: &Generator,
    gp: &Bound,
    x_t: &Matrix,
    ts: &[usize],
    x_tm: &Matrix,
    tms: &[usize],
    table: &ScheduleTable,
    distance: &Distance,
    cond: Option<&Matrix>,
) -> Result<Var> {
    if let Some((t, tm)) = ts.iter().zip(tms).find(|(t, tm)| tm >= t) {
        return Err(Error::Precondition(format!(
            "consistency pair needs t_m < t, got t_m={tm} t={t}"
        )));
    }
    let student = gen.predict_x0(g, gp, x_t, ts, cond, table)?;
    let target_raw = gen.predict_x0(g, gp, x_tm, tms, cond, table)?;
    let target = g.detach(target_raw);
    let lam: Vec<f64> = ts.iter().zip(tms).map(|(&t, &tm)| lambda_con(table, t, tm)).collect();
    consistency_loss(g, student, target, &lam, distance, cond)
}

/// Reconstruction loss evaluated end to end from the generator.
#[allow(clippy::too_many_arguments)]
pub fn reconstruction_loss_for(
    g: &Graph,
    gen: &Generator,
    gp: &Bound,
    x_t: &Matrix,
    ts: &[usize],
    x0: &Matrix,
    table: &ScheduleTable,
    distance: &Distance,
    cond: Option<&Matrix>,
) -> Result<Var> {
    let student = gen.predict_x0(g, gp, x_t, ts, cond, table)?;
    let lam: Vec<f64> = ts.iter().map(|&t| lambda_rec(table, t)).collect();
    reconstruction_loss(g, student, x0, &lam, distance, cond)
}

/// Everything the adversarial variants need besides the networks.
#[derive(Clone, Copy, Debug)]
pub struct AdvBatch<'a> {
    pub x0: &'a Matrix,
    /// Detached generations from level `t_k` (cooperative only).
    pub teacher: &'a Matrix,
    pub ts: &'a [usize],
    /// Two independent standard-normal draws for re-corruption (ufogen only).
    pub noise_real: &'a Matrix,
    pub noise_fake: &'a Matrix,
    pub table: &'a ScheduleTable,
}

/// Real samples and the timesteps the discriminator sees them at.
pub fn adv_real(formulation: AdvFormulation, batch: &AdvBatch) -> Result<(Matrix, Vec<usize>)> {
    Ok(match formulation {
        AdvFormulation::Cooperative => (batch.teacher.clone(), batch.ts.to_vec()),
        AdvFormulation::NaiveReal => (batch.x0.clone(), batch.ts.to_vec()),
        AdvFormulation::CorruptedUfogen => {
            let prev = prev_levels(batch.ts)?;
            (batch.table.corrupt_rows(batch.x0, batch.noise_real, &prev)?, prev)
        }
    })
}

/// Fake samples on the graph, differentiable w.r.t. the student output.
pub fn adv_fake(g: &Graph, formulation: AdvFormulation, student: Var, batch: &AdvBatch) -> Result<Var> {
    Ok(match formulation {
        AdvFormulation::Cooperative | AdvFormulation::NaiveReal => student,
        AdvFormulation::CorruptedUfogen => {
            let prev = prev_levels(batch.ts)?;
            let scaled = g.mul_col(student, batch.table.signal_col(&prev));
            let noise = g.constant(batch.noise_fake * &batch.table.noise_col(&prev));
            g.add(scaled, noise)
        }
    })
}

fn prev_levels(ts: &[usize]) -> Result<Vec<usize>> {
    ts.iter()
        .map(|&t| {
            t.checked_sub(1).ok_or_else(|| {
                Error::Precondition("corrupted-data formulation needs t >= 1".into())
            })
        })
        .collect()
}

/// `(d_loss, g_loss)` for any formulation, evaluated against the current
/// discriminator weights on one graph. `student` should carry generator
/// gradient; the discriminator loss sees it detached.
#[allow(clippy::too_many_arguments)]
pub fn variant_adv_losses(
    g: &Graph,
    formulation: AdvFormulation,
    objective: AdvObjective,
    disc: &Discriminator,
    dp: &Bound,
    student: Var,
    batch: &AdvBatch,
    cond: Option<&Matrix>,
) -> Result<(Var, Var)> {
    let (real, d_ts) = adv_real(formulation, batch)?;
    let real = g.constant(real);
    let fake = adv_fake(g, formulation, student, batch)?;
    let fake_detached = g.detach(fake);
    let d_loss = coop_adv_d_loss(g, disc, dp, real, fake_detached, &d_ts, cond, objective)?;
    let g_loss = coop_adv_g_loss(g, disc, dp, fake, &d_ts, cond)?;
    Ok((d_loss, g_loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{Architecture, Conditioning, DiscriminatorSpec, GeneratorSpec};
    use crate::schedulers::{build_schedule, ScheduleConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn disc(zero: bool) -> Discriminator {
        let spec = DiscriminatorSpec {
            zero_init_head: zero,
            backbone: crate::networks::DiscriminatorBackbone::Fresh {
                architecture: Architecture::ResMlp { width: 8, blocks: 2 },
            },
            head_width: 8,
            time_embed_dim: 4,
        };
        Discriminator::new(&spec, 2, Conditioning::None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn zero_head_d_loss_is_two_log_two() {
        let d = disc(true);
        let g = Graph::new();
        let dp = g.bind(&d.weights);
        let a = g.constant(Matrix::from_elem((4, 2), 0.5));
        let b = g.constant(Matrix::from_elem((4, 2), -0.5));
        let l = coop_adv_d_loss(&g, &d, &dp, a, b, &[3; 4], None, AdvObjective::NonSaturating).unwrap();
        assert!((g.scalar(l) - 2.0 * 2f64.ln()).abs() < 1e-12);
        let gl = coop_adv_g_loss(&g, &d, &dp, b, &[3; 4], None).unwrap();
        assert!((g.scalar(gl) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_logits_give_near_zero_d_loss() {
        let g = Graph::new();
        let real = g.constant(Matrix::from_elem((3, 1), 1e6));
        let fake = g.constant(Matrix::from_elem((3, 1), -1e6));
        let l = d_loss_from_logits(&g, real, fake, AdvObjective::NonSaturating);
        assert!(g.scalar(l) < 1e-12);
    }

    #[test]
    fn g_loss_strictly_decreases_in_logit() {
        let vals: Vec<f64> = [-3.0, -1.0, 0.0, 0.5, 2.0, 10.0]
            .iter()
            .map(|&x| {
                let g = Graph::new();
                let f = g.constant(Matrix::from_elem((1, 1), x));
                let l = g_loss_from_logits(&g, f);
                g.scalar(l)
            })
            .collect();
        assert!(vals.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn attached_teacher_is_a_contract_violation() {
        let d = disc(true);
        let g = Graph::new();
        let dp = g.bind(&d.weights);
        let a = g.variable(Matrix::zeros((2, 2)));
        let b = g.constant(Matrix::zeros((2, 2)));
        let err = coop_adv_d_loss(&g, &d, &dp, a, b, &[1, 1], None, AdvObjective::NonSaturating);
        assert!(matches!(err, Err(Error::Contract(_))));
        let err = consistency_loss(&g, b, a, &[1.0, 1.0], &Distance::Mse, None);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn lambda_hand_values() {
        assert!((lambda_con_from_snr(4.0, 9.0) - 7.2).abs() < 1e-12);
        assert_eq!(lambda_con_from_snr(0.0, 9.0), 0.0);
        assert_eq!(lambda_con_from_snr(4.0, 4.0), 0.0);
        let table = build_schedule(&ScheduleConfig::sd()).unwrap();
        assert_eq!(lambda_rec(&table, 10), table.snr[10]);
    }

    #[test]
    fn reconstruction_hand_value_and_zero() {
        let g = Graph::new();
        let x0 = Matrix::zeros((3, 4));
        let s = g.variable(Matrix::ones((3, 4)));
        let l = reconstruction_loss(&g, s, &x0, &[2.0; 3], &Distance::Mse, None).unwrap();
        assert!((g.scalar(l) - 2.0).abs() < 1e-12);
        let same = g.variable(x0.clone());
        let l = reconstruction_loss(&g, same, &x0, &[2.0; 3], &Distance::Mse, None).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        let bad = Matrix::zeros((3, 2));
        assert!(reconstruction_loss(&g, s, &bad, &[1.0; 3], &Distance::Mse, None).is_err());
    }

    #[test]
    fn snr_weighting_orders_equal_distances() {
        let table = build_schedule(&ScheduleConfig::sd()).unwrap();
        let g = Graph::new();
        let x0 = Matrix::zeros((1, 2));
        let s = g.variable(Matrix::ones((1, 2)));
        let hi = reconstruction_loss(&g, s, &x0, &[lambda_rec(&table, 10)], &Distance::Mse, None).unwrap();
        let lo = reconstruction_loss(&g, s, &x0, &[lambda_rec(&table, 900)], &Distance::Mse, None).unwrap();
        assert!(g.scalar(hi) > g.scalar(lo));
    }

    #[test]
    fn time_constant_generator_has_zero_consistency() {
        // A generator whose output ignores its input and timestep.
        let table = build_schedule(&ScheduleConfig::sd()).unwrap();
        let mut spec = GeneratorSpec::new(vec![2], Architecture::ResMlp { width: 4, blocks: 1 });
        spec.time_embed_dim = 4;
        let mut gen = Generator::new(spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        gen.weights.get_mut("head.b").unwrap().fill(0.7);
        let g = Graph::new();
        let gp = g.bind(&gen.weights);
        let x_t = Matrix::from_elem((3, 2), 0.2);
        let x_tm = Matrix::from_elem((3, 2), -0.4);
        let l = consistency_loss_for(
            &g, &gen, &gp, &x_t, &[500; 3], &x_tm, &[475; 3], &table, &Distance::Mse, None,
        )
        .unwrap();
        assert_eq!(g.scalar(l), 0.0);
        assert!(consistency_loss_for(
            &g, &gen, &gp, &x_t, &[5; 3], &x_tm, &[5; 3], &table, &Distance::Mse, None
        )
        .is_err());
    }

    #[test]
    fn ufogen_real_at_t1_is_one_noising_step_from_data() {
        let table = build_schedule(&ScheduleConfig::sd()).unwrap();
        let x0 = Matrix::from_elem((2, 2), 1.0);
        let noise = Matrix::from_elem((2, 2), 0.5);
        let batch = AdvBatch {
            x0: &x0,
            teacher: &x0,
            ts: &[1, 1],
            noise_real: &noise,
            noise_fake: &noise,
            table: &table,
        };
        let (real, d_ts) = adv_real(AdvFormulation::CorruptedUfogen, &batch).unwrap();
        assert_eq!(d_ts, vec![0, 0]);
        let naive = adv_real(AdvFormulation::NaiveReal, &batch).unwrap().0;
        let gap = (&real - &naive).iter().map(|d| d.abs()).fold(0.0, f64::max);
        assert!(gap < 0.03, "gap {gap}");
    }
}
