//! Quick adaptation of a frozen ε-prediction teacher into a v-prediction
//! student (stage I), then onto a zero-terminal-SNR schedule (stage II).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Graph, Matrix, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::networks::Generator;
use crate::optim::{Adam, AdamConfig};
use crate::parameterizations::{coefficients, PredictionKind};
use crate::schedulers::{build_schedule, standard_normal, ScheduleTable};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptStage {
    /// Switch the output parameterization to v.
    #[default]
    One,
    /// Switch the student's schedule to zero terminal SNR.
    Two,
}

/// Inputs seen by student and teacher in stage II.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage2Pairing {
    /// Both networks see one draw corrupted with the student schedule.
    #[default]
    SharedInput,
    /// The student sees the student-schedule corruption and the teacher the
    /// teacher-schedule corruption of the same `(x0, ε)`.
    Literal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptConfig {
    #[serde(default)]
    pub stage: AdaptStage,
    #[serde(default = "default_iterations")]
    pub iterations: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub pairing: Stage2Pairing,
    /// Rows in the fixed batch used to report initial and final loss.
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
}

fn default_iterations() -> u64 {
    1000
}
fn default_batch() -> usize {
    128
}
fn default_lr() -> f64 {
    1e-4
}
fn default_eval_batch() -> usize {
    2048
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            stage: AdaptStage::One,
            iterations: default_iterations(),
            batch_size: default_batch(),
            lr: default_lr(),
            seed: 0,
            pairing: Stage2Pairing::SharedInput,
            eval_batch: default_eval_batch(),
        }
    }
}

fn ensure_frozen(g: &Graph, tp: &Bound) -> Result<()> {
    if tp.vars().iter().any(|&v| g.requires_grad(v)) {
        return Err(Error::Contract("adaptation teacher must be frozen".into()));
    }
    Ok(())
}

fn weighted_sq_error(g: &Graph, a: Var, b: Var, lambda: Matrix) -> Var {
    let d = g.sub(a, b);
    let sq = g.square(d);
    let rows = g.row_mean(sq);
    let w = g.mul_col(rows, lambda);
    g.mean(w)
}

/// Teacher `(ε, x0)` estimates at `x_t` under the teacher's own schedule, detached.
fn teacher_eps_x0(
    g: &Graph,
    teacher: &Generator,
    tp: &Bound,
    x_t: &Matrix,
    ts: &[usize],
    table: &ScheduleTable,
) -> Result<(Var, Var)> {
    let eps = teacher.predict_as(g, tp, x_t, ts, None, table, PredictionKind::Eps)?;
    let x0 = teacher.predict_as(g, tp, x_t, ts, None, table, PredictionKind::X0)?;
    Ok((g.detach(eps), g.detach(x0)))
}

/// `mean_i λ_t ‖v_θ(x_t, t) - v_φ(x_t, t)‖²` (squared error averaged over
/// dimensions), with `x_t = corrupt(x0, ε, t)` on the teacher schedule and
/// `λ_t = SNR(t)`.
#[allow(clippy::too_many_arguments)]
pub fn adapt_stage1_loss(
    g: &Graph,
    student: &Generator,
    sp: &Bound,
    teacher: &Generator,
    tp: &Bound,
    x0: &Matrix,
    eps: &Matrix,
    ts: &[usize],
    table: &ScheduleTable,
) -> Result<Var> {
    ensure_frozen(g, tp)?;
    let x_t = table.corrupt_rows(x0, eps, ts)?;
    let v_student = student.predict_as(g, sp, &x_t, ts, None, table, PredictionKind::V)?;
    let v_teacher = teacher.predict_as(g, tp, &x_t, ts, None, table, PredictionKind::V)?;
    let v_teacher = g.detach(v_teacher);
    Ok(weighted_sq_error(g, v_student, v_teacher, table.snr_col(ts)))
}

/// Stage II: the student runs on the zero-terminal-SNR schedule. The
/// teacher's `(ε, x0)` estimates come from its own schedule, and the v
/// target is assembled with the student schedule's coefficients so that it
/// decodes consistently on the student side. `λ_t` is the student SNR.
#[allow(clippy::too_many_arguments)]
pub fn adapt_stage2_loss(
    g: &Graph,
    student: &Generator,
    sp: &Bound,
    teacher: &Generator,
    tp: &Bound,
    x0: &Matrix,
    eps: &Matrix,
    ts: &[usize],
    teacher_table: &ScheduleTable,
    student_table: &ScheduleTable,
    pairing: Stage2Pairing,
) -> Result<Var> {
    ensure_frozen(g, tp)?;
    if !student_table.is_terminal_rescale_of(teacher_table) {
        return Err(Error::ScheduleMismatch(
            "stage II student schedule must be the zero-terminal-SNR rescale of the teacher schedule".into(),
        ));
    }
    let x_student = student_table.corrupt_rows(x0, eps, ts)?;
    let x_teacher = match pairing {
        Stage2Pairing::SharedInput => x_student.clone(),
        Stage2Pairing::Literal => teacher_table.corrupt_rows(x0, eps, ts)?,
    };
    let v_student = student.predict_as(g, sp, &x_student, ts, None, student_table, PredictionKind::V)?;
    let (e, x) = teacher_eps_x0(g, teacher, tp, &x_teacher, ts, teacher_table)?;
    let a = g.mul_col(e, student_table.signal_col(ts));
    let s = g.mul_col(x, student_table.noise_col(ts));
    let v_target = g.sub(a, s);
    Ok(weighted_sq_error(g, v_student, v_target, student_table.snr_col(ts)))
}

/// Result of one adaptation stage.
#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    pub student: Generator,
    pub student_table: ScheduleTable,
    pub losses: Vec<f64>,
    /// Loss on a fixed held-out batch before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
}

struct Fixed {
    x0: Matrix,
    eps: Matrix,
    ts: Vec<usize>,
}

fn draw(dataset: &Dataset, n: usize, t_max: usize, rng: &mut impl Rng) -> Fixed {
    let x0 = dataset.sample(n, rng);
    let eps = standard_normal(x0.dim(), rng);
    let ts = (0..n).map(|_| rng.gen_range(0..t_max)).collect();
    Fixed { x0, eps, ts }
}

/// Run one adaptation stage. Stage I starts from the teacher's weights
/// reinterpreted as v-prediction unless `student` is given; stage II needs a
/// v-prediction student.
pub fn adapt(
    teacher: &Generator,
    teacher_table: &ScheduleTable,
    student: Option<Generator>,
    dataset: &Dataset,
    cfg: &AdaptConfig,
) -> Result<AdaptOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let student_table = match cfg.stage {
        AdaptStage::One => teacher_table.clone(),
        AdaptStage::Two => build_schedule(&teacher_table.config().clone().with_zero_terminal_snr(true))?,
    };
    let mut student = match (cfg.stage, student) {
        (_, Some(s)) => s,
        (AdaptStage::One, None) => teacher.clone().with_kind(PredictionKind::V),
        (AdaptStage::Two, None) => {
            return Err(Error::config("student", "stage II needs a stage-I (v-prediction) student"))
        }
    };
    if cfg.stage == AdaptStage::Two && student.kind() != PredictionKind::V {
        return Err(Error::config("student", "stage II needs a v-prediction student"));
    }
    // Singular conversions at the terminal step are reported up front.
    coefficients(teacher.kind(), PredictionKind::X0, teacher_table.terminal(), teacher_table)?;

    let loss_on = |g: &Graph, s: &Generator, sp: &Bound, b: &Fixed| -> Result<Var> {
        let tp = g.bind_frozen(&teacher.weights);
        match cfg.stage {
            AdaptStage::One => adapt_stage1_loss(g, s, sp, teacher, &tp, &b.x0, &b.eps, &b.ts, teacher_table),
            AdaptStage::Two => adapt_stage2_loss(
                g,
                s,
                sp,
                teacher,
                &tp,
                &b.x0,
                &b.eps,
                &b.ts,
                teacher_table,
                &student_table,
                cfg.pairing,
            ),
        }
    };
    let held_out = draw(dataset, cfg.eval_batch, student_table.num_steps(), &mut rng);
    let eval = |s: &Generator| -> Result<f64> {
        let g = Graph::new();
        let sp = g.bind_frozen(&s.weights);
        Ok(g.scalar(loss_on(&g, s, &sp, &held_out)?))
    };
    let initial_loss = eval(&student)?;
    let mut opt = Adam::new(AdamConfig::new(cfg.lr, (0.9, 0.999)), &student.weights);
    let mut losses = Vec::with_capacity(cfg.iterations as usize);
    for step in 0..cfg.iterations {
        let b = draw(dataset, cfg.batch_size, student_table.num_steps(), &mut rng);
        let g = Graph::new();
        let sp = g.bind(&student.weights);
        let loss = loss_on(&g, &student, &sp, &b)?;
        let v = g.scalar(loss);
        if !v.is_finite() {
            return Err(Error::Diverged {
                step,
                reason: "non-finite adaptation loss".into(),
            });
        }
        losses.push(v);
        let grads = g.backward(loss).for_bound(&sp);
        opt.step(&mut student.weights, &grads);
    }
    let final_loss = eval(&student)?;
    Ok(AdaptOutcome {
        student,
        student_table,
        losses,
        initial_loss,
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{Architecture, GeneratorSpec};
    use crate::schedulers::ScheduleConfig;

    fn teacher() -> Generator {
        let mut spec = GeneratorSpec::new(vec![2], Architecture::ResMlp { width: 8, blocks: 1 });
        spec.prediction = PredictionKind::Eps;
        spec.zero_init_head = false;
        Generator::new(spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    fn batch() -> (Matrix, Matrix, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        (
            standard_normal((5, 2), &mut rng),
            standard_normal((5, 2), &mut rng),
            vec![0, 10, 400, 800, 999],
        )
    }

    #[test]
    fn algebraic_view_of_the_teacher_has_zero_stage1_loss() {
        let table = build_schedule(&ScheduleConfig::sd()).unwrap();
        let t = teacher();
        let (x0, eps, ts) = batch();
        let g = Graph::new();
        let sp = g.bind(&t.weights);
        let tp = g.bind_frozen(&t.weights);
        let l = adapt_stage1_loss(&g, &t, &sp, &t, &tp, &x0, &eps, &ts, &table).unwrap();
        assert!(g.scalar(l).abs() < 1e-20);
        let student = t.clone().with_kind(PredictionKind::V);
        let l = adapt_stage1_loss(&g, &student, &sp, &t, &tp, &x0, &eps, &ts, &table).unwrap();
        assert!(g.scalar(l) > 0.0);
    }

    #[test]
    fn unfrozen_teacher_and_mismatched_schedules_are_rejected() {
        let table = build_schedule(&ScheduleConfig::sd()).unwrap();
        let t = teacher();
        let (x0, eps, ts) = batch();
        let g = Graph::new();
        let sp = g.bind(&t.weights);
        let tp = g.bind(&t.weights);
        assert!(matches!(
            adapt_stage1_loss(&g, &t, &sp, &t, &tp, &x0, &eps, &ts, &table),
            Err(Error::Contract(_))
        ));
        let tp = g.bind_frozen(&t.weights);
        let other = build_schedule(&ScheduleConfig::sd()).unwrap();
        assert!(matches!(
            adapt_stage2_loss(&g, &t, &sp, &t, &tp, &x0, &eps, &ts, &table, &other, Stage2Pairing::SharedInput),
            Err(Error::ScheduleMismatch(_))
        ));
    }

    #[test]
    fn stages_agree_where_schedules_coincide() {
        let table = build_schedule(&ScheduleConfig::sd()).unwrap();
        let zt = build_schedule(&ScheduleConfig::sd().with_zero_terminal_snr(true)).unwrap();
        let t = teacher();
        let s = teacher().with_kind(PredictionKind::V);
        let (x0, eps, _) = batch();
        let ts = vec![0; 5];
        let g = Graph::new();
        let sp = g.bind(&s.weights);
        let tp = g.bind_frozen(&t.weights);
        let l1 = g.scalar(adapt_stage1_loss(&g, &s, &sp, &t, &tp, &x0, &eps, &ts, &table).unwrap());
        for pairing in [Stage2Pairing::SharedInput, Stage2Pairing::Literal] {
            let l2 = adapt_stage2_loss(&g, &s, &sp, &t, &tp, &x0, &eps, &ts, &table, &zt, pairing).unwrap();
            assert!((g.scalar(l2) - l1).abs() <= 1e-12 * l1.max(1.0));
        }
    }
}
