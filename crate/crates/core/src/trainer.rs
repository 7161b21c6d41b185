//! The alternating discriminator/generator training loop.

use std::collections::VecDeque;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annealing::anneal_multiplier;
use crate::autodiff::{Graph, Matrix};
use crate::checkpoint::{self, Checkpoint, CheckpointMeta, StageRecord};
use crate::config::{Coupling, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::{stability_trace, EvalReport, EvalSettings, StabilitySummary};
use crate::losses::{
    adv_fake, adv_real, coop_adv_d_loss, coop_adv_g_loss, consistency_loss, lambda_con, lambda_rec,
    reconstruction_loss, AdvBatch, Distance, DistanceKind,
};
use crate::networks::{Discriminator, DiscriminatorBackbone, EmaState, FeatureExtractor, Generator, GeneratorSpec};
use crate::optim::{clip_grad_norm, Adam, AdamConfig};
use crate::parameterizations::{to_x0, v_from, PredictionKind};
use crate::prior_init::{estimate_stats_matrix, sample_informative_prior, warn_if_low_terminal_snr, PriorStats};
use crate::schedulers::{build_schedule, skip, standard_normal, ScheduleTable};

/// Windowed mean D loss below which a run is flagged as collapse-suspect.
pub const COLLAPSE_THRESHOLD: f64 = 0.9;

pub const METRICS_HEADER: &str =
    "step,d_loss,g_adv,g_rec,g_con,anneal,mode_coverage,high_quality_fraction,mmd,w2,d_loss_mean,d_loss_min";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub d_loss: f64,
    pub g_adv: f64,
    pub g_rec: f64,
    pub g_con: f64,
    pub anneal: f64,
    pub grad_norm_g: f64,
}

impl StepMetrics {
    fn csv(&self, eval: Option<&EvalReport>) -> String {
        let eval = match eval {
            Some(r) => r.csv_values().join(","),
            None => ",,,,,".to_string(),
        };
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.d_loss, self.g_adv, self.g_rec, self.g_con, self.anneal, eval
        )
    }
}

/// Noisy inputs for one iteration.
#[derive(Clone, Debug)]
pub struct Inputs {
    pub x0: Matrix,
    pub ts: Vec<usize>,
    pub tms: Vec<usize>,
    pub tks: Vec<usize>,
    pub x_t: Matrix,
    pub x_tm: Matrix,
    pub x_tk: Matrix,
    pub noise_real: Matrix,
    pub noise_fake: Matrix,
}

/// Draw `x_t`, `x_{t_m}`, `x_{t_k}` from `x0` under a coupling mode.
/// Requires `tks[i] <= tms[i] < ts[i]`.
#[allow(clippy::too_many_arguments)]
pub fn couple(
    table: &ScheduleTable,
    coupling: Coupling,
    x0: &Matrix,
    eps: &Matrix,
    ts: &[usize],
    tms: &[usize],
    tks: &[usize],
    rng: &mut impl Rng,
) -> Result<(Matrix, Matrix, Matrix)> {
    match coupling {
        Coupling::SharedNoise => Ok((
            table.corrupt_rows(x0, eps, ts)?,
            table.corrupt_rows(x0, eps, tms)?,
            table.corrupt_rows(x0, eps, tks)?,
        )),
        Coupling::Mixed => {
            let x_tm = table.corrupt_rows(x0, eps, tms)?;
            let x_t = table.forward_chain(x0, &x_tm, tms, ts, rng)?;
            let eps_t = table.implied_noise(x0, &x_t, ts)?;
            let x_tk = table.corrupt_rows(x0, &eps_t, tks)?;
            Ok((x_t, x_tm, x_tk))
        }
        Coupling::ForwardChain => {
            let x_t = table.corrupt_rows(x0, eps, ts)?;
            let xi = standard_normal(x0.dim(), rng);
            let x_tm = table.posterior_with_noise(x0, &x_t, tms, ts, &xi)?;
            let xi = standard_normal(x0.dim(), rng);
            let mut x_tk = x_tm.clone();
            let lower: Vec<usize> = (0..ts.len()).filter(|&i| tks[i] < tms[i]).collect();
            if !lower.is_empty() {
                let pick = |m: &Matrix| m.select(ndarray::Axis(0), &lower);
                let s: Vec<usize> = lower.iter().map(|&i| tks[i]).collect();
                let t: Vec<usize> = lower.iter().map(|&i| tms[i]).collect();
                let drawn = table.posterior_with_noise(&pick(x0), &pick(&x_tm), &s, &t, &pick(&xi))?;
                for (r, &i) in lower.iter().enumerate() {
                    x_tk.row_mut(i).assign(&drawn.row(r));
                }
            }
            Ok((x_t, x_tm, x_tk))
        }
    }
}

/// One-step samples: terminal noise (informative if `prior` is given)
/// through the generator at `t = T - 1`, converted to `x0`, plus
/// `sigma · N(0, I)` when the generator spec sets `sigma > 0`.
pub fn sample_one_step(
    generator: &Generator,
    weights: &crate::params::WeightSet,
    table: &ScheduleTable,
    prior: Option<&PriorStats>,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Matrix> {
    let x_t = match prior {
        Some(p) => sample_informative_prior(p, table, n, rng)?,
        None => standard_normal((n, generator.data_dim()), rng),
    };
    let ts = vec![table.terminal(); n];
    let pred = generator.generate_with(weights, &x_t, &ts, None, table)?;
    let x0 = to_x0(&pred, &x_t, table)?;
    let sigma = generator.spec().sigma;
    if sigma > 0.0 {
        Ok(x0 + &(standard_normal((n, generator.data_dim()), rng) * sigma))
    } else {
        Ok(x0)
    }
}

fn eval_seed(seed: u64, step: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ step.wrapping_add(0xD1B5_4A32_D192_ED03)
}

/// Training state; everything needed to continue a run bit-for-bit.
pub struct Trainer {
    pub config: TrainConfig,
    pub table: ScheduleTable,
    pub dataset: Dataset,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub ema: EmaState,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub prior: Option<PriorStats>,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub stage_history: Vec<StageRecord>,
    d_loss_tail: VecDeque<f64>,
    distance: Distance,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let table = build_schedule(&config.schedule.resolve())?;
        let dataset = config.dataset.load()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (generator, history) = match &config.pretrained {
            Some(path) => {
                let ck = Checkpoint::load(path)?;
                if ck.meta.generator_spec.data_shape != dataset.data_shape() {
                    return Err(Error::config("pretrained", "pretrained generator data shape differs from the dataset"));
                }
                let g = Generator::from_weights(ck.meta.generator_spec.clone(), ck.generator()?.clone())?;
                (g, ck.meta.stage_history.clone())
            }
            None => {
                let spec = config.generator.generator_spec(dataset.data_shape());
                (Generator::new(spec, &mut rng)?, Vec::new())
            }
        };
        let discriminator = match config.discriminator.backbone {
            DiscriminatorBackbone::HalfOfPretrainedGenerator if config.pretrained.is_none() => {
                return Err(Error::config(
                    "discriminator",
                    "a half-of-pretrained-generator backbone needs `pretrained`",
                ))
            }
            _ => Discriminator::from_spec(&config.discriminator, &generator, &mut rng)?,
        };
        let distance = match config.distance {
            DistanceKind::Mse => Distance::Mse,
            DistanceKind::LatentPerceptual => Distance::LatentPerceptual(FeatureExtractor::from_generator(&generator)),
        };
        let prior = if config.informative_prior {
            warn_if_low_terminal_snr(&table);
            let data = dataset.sample(crate::prior_init::DEFAULT_STATS_SAMPLES, &mut rng);
            Some(estimate_stats_matrix(&data, None)?)
        } else {
            None
        };
        let ema = EmaState::new(&generator.weights, config.ema_decay)?;
        let opt_g = Adam::new(AdamConfig::new(config.lr_g, config.betas_g), &generator.weights);
        let opt_d = Adam::new(AdamConfig::new(config.lr_d, config.betas_d), &discriminator.weights);
        Ok(Self {
            config,
            table,
            dataset,
            generator,
            discriminator,
            ema,
            opt_g,
            opt_d,
            prior,
            rng,
            step: 0,
            stage_history: history,
            d_loss_tail: VecDeque::new(),
            distance,
        })
    }

    /// Restore a state saved by [`Trainer::checkpoint`].
    pub fn resume(ck: &Checkpoint) -> Result<Self> {
        let config = ck
            .meta
            .config
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no training config".into()))?;
        let mut t = Self::new(config)?;
        ck.generator()?.check_aligned(&t.generator.weights, "resume generator")?;
        t.generator.weights = ck.generator()?.clone();
        t.discriminator.weights = ck.section(checkpoint::DISCRIMINATOR)?.clone();
        t.ema.shadow = ck.section(checkpoint::EMA)?.clone();
        t.opt_g.m = ck.section(checkpoint::ADAM_G_M)?.clone();
        t.opt_g.v = ck.section(checkpoint::ADAM_G_V)?.clone();
        t.opt_d.m = ck.section(checkpoint::ADAM_D_M)?.clone();
        t.opt_d.v = ck.section(checkpoint::ADAM_D_V)?.clone();
        t.opt_g.step = ck.meta.adam_g_step;
        t.opt_d.step = ck.meta.adam_d_step;
        t.prior = ck.meta.prior.clone();
        t.rng = ck
            .meta
            .rng
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no RNG state".into()))?;
        t.step = ck.meta.step;
        t.stage_history = ck.meta.stage_history.clone();
        t.d_loss_tail = ck.meta.d_loss_tail.iter().copied().collect();
        if ck.meta.schedule_hash != t.table.hash_hex() {
            return Err(Error::ScheduleMismatch("checkpoint schedule differs from its config".into()));
        }
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut meta = CheckpointMeta::new(
            self.generator.spec().clone(),
            self.table.config().clone(),
            self.table.hash_hex(),
        );
        meta.step = self.step;
        meta.discriminator_spec = Some(self.config.discriminator.clone());
        meta.config = Some(self.config.clone());
        meta.ema_decay = Some(self.ema.decay);
        meta.rng = Some(self.rng.clone());
        meta.adam_g_step = self.opt_g.step;
        meta.adam_d_step = self.opt_d.step;
        meta.prior = self.prior.clone();
        meta.d_loss_tail = self.d_loss_tail.iter().copied().collect();
        let mut history = self.stage_history.clone();
        history.push(StageRecord {
            stage: "train".into(),
            prediction: self.generator.kind(),
            schedule_hash: self.table.hash_hex(),
            iterations: self.step,
        });
        meta.stage_history = history;
        let mut ck = Checkpoint::new(meta, self.generator.weights.clone());
        for (name, set) in [
            (checkpoint::DISCRIMINATOR, &self.discriminator.weights),
            (checkpoint::EMA, &self.ema.shadow),
            (checkpoint::ADAM_G_M, &self.opt_g.m),
            (checkpoint::ADAM_G_V, &self.opt_g.v),
            (checkpoint::ADAM_D_M, &self.opt_d.m),
            (checkpoint::ADAM_D_V, &self.opt_d.v),
        ] {
            ck.sections.insert(name.into(), set.clone());
        }
        ck
    }

    pub fn distance(&self) -> &Distance {
        &self.distance
    }

    /// Draw the batch and noisy inputs for the current iteration.
    pub fn draw_inputs(&mut self) -> Result<Inputs> {
        let b = self.config.batch_size;
        let t_max = self.table.num_steps();
        let x0 = self.dataset.sample(b, &mut self.rng);
        let ts: Vec<usize> = (0..b).map(|_| self.rng.gen_range(1..t_max)).collect();
        let tms: Vec<usize> = ts.iter().map(|&t| skip(t, self.config.skip.m)).collect();
        let k = self.config.adversarial_skip();
        let tks: Vec<usize> = ts.iter().map(|&t| skip(t, k)).collect();
        let eps = standard_normal(x0.dim(), &mut self.rng);
        let (x_t, x_tm, x_tk) = couple(&self.table, self.config.coupling, &x0, &eps, &ts, &tms, &tks, &mut self.rng)?;
        let noise_real = standard_normal(x0.dim(), &mut self.rng);
        let noise_fake = standard_normal(x0.dim(), &mut self.rng);
        Ok(Inputs {
            x0,
            ts,
            tms,
            tks,
            x_t,
            x_tm,
            x_tk,
            noise_real,
            noise_fake,
        })
    }

    fn x0_no_grad(&self, x_t: &Matrix, ts: &[usize]) -> Result<Matrix> {
        let pred = self.generator.generate(x_t, ts, None, &self.table)?;
        to_x0(&pred, x_t, &self.table)
    }

    /// Discriminator half-step; returns the D loss. Never touches generator weights.
    pub fn d_step(&mut self, inputs: &Inputs, teacher: &Matrix) -> Result<f64> {
        let student = self.x0_no_grad(&inputs.x_t, &inputs.ts)?;
        let batch = self.adv_batch(inputs, teacher);
        let (real, d_ts) = adv_real(self.config.adv_formulation, &batch)?;
        let g = Graph::new();
        let dp = g.bind(&self.discriminator.weights);
        let real = g.constant(real);
        let s = g.constant(student);
        let fake = adv_fake(&g, self.config.adv_formulation, s, &batch)?;
        let loss = coop_adv_d_loss(&g, &self.discriminator, &dp, real, fake, &d_ts, None, self.config.adv_objective)?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(self.diverged(format!("non-finite discriminator loss {value}")));
        }
        let grads = g.backward(loss).for_bound(&dp);
        self.opt_d.step(&mut self.discriminator.weights, &grads);
        Ok(value)
    }

    fn adv_batch<'a>(&'a self, inputs: &'a Inputs, teacher: &'a Matrix) -> AdvBatch<'a> {
        AdvBatch {
            x0: &inputs.x0,
            teacher,
            ts: &inputs.ts,
            noise_real: &inputs.noise_real,
            noise_fake: &inputs.noise_fake,
            table: &self.table,
        }
    }

    /// Generator half-step. Never touches discriminator weights.
    pub fn g_step(&mut self, inputs: &Inputs, teacher: &Matrix, target: &Matrix, anneal: f64) -> Result<StepMetrics> {
        let cfg = &self.config;
        let batch = self.adv_batch(inputs, teacher);
        let (_, d_ts) = adv_real(cfg.adv_formulation, &batch)?;
        let g = Graph::new();
        let gp = g.bind(&self.generator.weights);
        let dp = g.bind_frozen(&self.discriminator.weights);
        let student = self.generator.predict_x0(&g, &gp, &inputs.x_t, &inputs.ts, None, &self.table)?;
        let fake = adv_fake(&g, cfg.adv_formulation, student, &batch)?;
        let g_adv = coop_adv_g_loss(&g, &self.discriminator, &dp, fake, &d_ts, None)?;
        let mut total = g.scale(g_adv, cfg.adv_weight);
        let mut g_rec = 0.0;
        let mut g_con = 0.0;
        if cfg.use_reconstruction {
            let lam: Vec<f64> = inputs.ts.iter().map(|&t| lambda_rec(&self.table, t)).collect();
            let rec = reconstruction_loss(&g, student, &inputs.x0, &lam, &self.distance, None)?;
            g_rec = g.scalar(rec);
            if anneal > 0.0 {
                let r = g.scale(rec, anneal);
                total = g.add(total, r);
            }
        }
        if cfg.use_consistency {
            let lam: Vec<f64> = inputs
                .ts
                .iter()
                .zip(&inputs.tms)
                .map(|(&t, &tm)| lambda_con(&self.table, t, tm))
                .collect();
            let tgt = g.constant(target.clone());
            let con = consistency_loss(&g, student, tgt, &lam, &self.distance, None)?;
            g_con = g.scalar(con);
            if anneal > 0.0 {
                let c = g.scale(con, anneal);
                total = g.add(total, c);
            }
        }
        let value = g.scalar(total);
        let g_adv_v = g.scalar(g_adv);
        if !value.is_finite() {
            return Err(self.diverged(format!(
                "non-finite generator loss (adv {g_adv_v}, rec {g_rec}, con {g_con})"
            )));
        }
        let mut grads = g.backward(total).for_bound(&gp);
        let grad_norm_g = match self.config.grad_clip_g {
            Some(c) => clip_grad_norm(&mut grads, c),
            None => crate::optim::global_norm(&grads),
        };
        if !grad_norm_g.is_finite() {
            return Err(self.diverged("non-finite generator gradient".into()));
        }
        self.opt_g.step(&mut self.generator.weights, &grads);
        self.ema.update(&self.generator.weights)?;
        Ok(StepMetrics {
            step: self.step,
            d_loss: f64::NAN,
            g_adv: g_adv_v,
            g_rec,
            g_con,
            anneal,
            grad_norm_g,
        })
    }

    fn diverged(&self, reason: String) -> Error {
        if let Some(dir) = &self.config.output_dir {
            let path = dir.join(format!("diverged-step{}.safetensors", self.step));
            match self.checkpoint().save(&path) {
                Ok(()) => log::error!("diagnostic snapshot written to {}", path.display()),
                Err(e) => log::error!("could not write diagnostic snapshot: {e}"),
            }
        }
        Error::Diverged { step: self.step, reason }
    }

    /// Stop-gradient teacher generations and consistency targets.
    pub fn teacher_outputs(&self, inputs: &Inputs) -> Result<(Matrix, Matrix)> {
        let teacher = self.x0_no_grad(&inputs.x_tk, &inputs.tks)?;
        let target = if inputs.tks == inputs.tms && inputs.x_tk == inputs.x_tm {
            teacher.clone()
        } else {
            self.x0_no_grad(&inputs.x_tm, &inputs.tms)?
        };
        Ok((teacher, target))
    }

    /// One full iteration: D first, then G, then EMA.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let n = self.step;
        let anneal = anneal_multiplier(n, self.config.iterations, &self.config.anneal)? * self.config.anneal.base_weight;
        let inputs = self.draw_inputs()?;
        let (teacher, target) = self.teacher_outputs(&inputs)?;
        let d_loss = self.d_step(&inputs, &teacher)?;
        let mut m = self.g_step(&inputs, &teacher, &target, anneal)?;
        m.d_loss = d_loss;
        self.d_loss_tail.push_back(d_loss);
        while self.d_loss_tail.len() > self.config.eval.d_loss_window {
            self.d_loss_tail.pop_front();
        }
        self.step += 1;
        Ok(m)
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.iterations
    }

    pub fn sample(&self, n: usize, use_ema: bool, rng: &mut impl Rng) -> Result<Matrix> {
        let w = if use_ema { &self.ema.shadow } else { &self.generator.weights };
        sample_one_step(&self.generator, w, &self.table, self.prior.as_ref(), n, rng)
    }

    pub fn d_loss_summary(&self) -> Option<StabilitySummary> {
        let w = self.config.eval.d_loss_window;
        let tail: Vec<f64> = self.d_loss_tail.iter().copied().collect();
        stability_trace(&tail, w, COLLAPSE_THRESHOLD).ok()
    }

    /// Evaluate one-step samples against fresh data; deterministic in `(seed, step)`.
    pub fn evaluate(&self) -> Result<EvalReport> {
        let ec = &self.config.eval;
        let mut rng = ChaCha8Rng::seed_from_u64(eval_seed(self.config.seed, self.step));
        let samples = self.sample(ec.samples, ec.use_ema, &mut rng)?;
        let reference = self.dataset.sample(ec.samples, &mut rng);
        let centers = self.dataset.centers();
        let radius = ec.radius_sigmas * self.dataset.mode_std().unwrap_or(0.0);
        let settings = EvalSettings {
            centers: centers.as_ref().filter(|_| radius > 0.0),
            radius,
            min_mass: ec.min_mass,
            bandwidths: &ec.bandwidths,
            projections: 16,
            seed: self.config.seed,
        };
        EvalReport::compute(self.step, &samples, &reference, &settings, self.d_loss_summary().as_ref())
    }

    fn eval_due(&self) -> bool {
        let every = self.config.eval.every;
        self.is_done() || (every > 0 && self.step % every == 0)
    }

    /// Run until `config.iterations`, appending to `log` one CSV line per step.
    pub fn run_with_log(&mut self, log: &mut dyn Write, mut on_eval: impl FnMut(&Trainer, &EvalReport) -> Result<()>) -> Result<Option<EvalReport>> {
        let mut last = None;
        while !self.is_done() {
            let m = self.train_step()?;
            let eval = if self.eval_due() { Some(self.evaluate()?) } else { None };
            writeln!(log, "{}", m.csv(eval.as_ref())).map_err(|e| Error::io("metrics log", e))?;
            if let Some(r) = eval {
                on_eval(self, &r)?;
                last = Some(r);
            }
            let every = self.config.checkpoint_every;
            if every > 0 && self.step % every == 0 && !self.is_done() {
                if let Some(dir) = &self.config.output_dir {
                    self.checkpoint().save(&dir.join(format!("step{:08}.safetensors", self.step)))?;
                }
            }
        }
        Ok(last)
    }

    /// Full run with artifacts in `output_dir`: `metrics.csv`, periodic
    /// checkpoints, `final.safetensors`, `report.json` and a sample plot.
    pub fn run(&mut self) -> Result<RunArtifacts> {
        let dir = self
            .config
            .output_dir
            .clone()
            .ok_or_else(|| Error::config("output_dir", "required for a full run"))?;
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let metrics = dir.join("metrics.csv");
        let fresh = self.step == 0 || !metrics.exists();
        let mut file = if fresh {
            let mut f = File::create(&metrics).map_err(|e| Error::io(&metrics, e))?;
            writeln!(f, "{METRICS_HEADER}").map_err(|e| Error::io(&metrics, e))?;
            f
        } else {
            OpenOptions::new().append(true).open(&metrics).map_err(|e| Error::io(&metrics, e))?
        };
        let mut reports = Vec::new();
        let last = self.run_with_log(&mut file, |_, r| {
            reports.push(r.clone());
            Ok(())
        })?;
        let final_ck = dir.join("final.safetensors");
        self.checkpoint().save(&final_ck)?;
        let report_path = dir.join("report.json");
        let json = serde_json::to_string_pretty(&reports).expect("reports serialise");
        std::fs::write(&report_path, json).map_err(|e| Error::io(&report_path, e))?;
        let mut rng = ChaCha8Rng::seed_from_u64(eval_seed(self.config.seed, self.step));
        let samples = self.sample(self.config.eval.samples.min(1024), self.config.eval.use_ema, &mut rng)?;
        let plot = crate::report::write_samples(&dir, "samples", &samples, &self.dataset)?;
        Ok(RunArtifacts {
            metrics,
            checkpoint: final_ck,
            report: report_path,
            samples: plot,
            final_eval: last,
        })
    }
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub report: PathBuf,
    pub samples: PathBuf,
    pub final_eval: Option<EvalReport>,
}

/// Settings for plain denoiser pretraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            batch_size: 128,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Train a standard denoiser with `E‖G(x_t, t) - target‖²`, where the
/// target matches `spec.prediction`; `t` is uniform over `[0, T)`.
/// Returns the model and its final-iteration loss.
pub fn pretrain_denoiser(
    spec: GeneratorSpec,
    table: &ScheduleTable,
    dataset: &Dataset,
    cfg: &PretrainConfig,
) -> Result<(Generator, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut gen = Generator::new(spec, &mut rng)?;
    let mut opt = Adam::new(AdamConfig::new(cfg.lr, (0.9, 0.999)), &gen.weights);
    let mut last = f64::NAN;
    for step in 0..cfg.iterations {
        let x0 = dataset.sample(cfg.batch_size, &mut rng);
        let ts: Vec<usize> = (0..cfg.batch_size).map(|_| rng.gen_range(0..table.num_steps())).collect();
        let eps = standard_normal(x0.dim(), &mut rng);
        let x_t = table.corrupt_rows(&x0, &eps, &ts)?;
        let target = match gen.kind() {
            PredictionKind::Eps => eps,
            PredictionKind::X0 => x0,
            PredictionKind::V => v_from(&x0, &eps, &ts, table),
        };
        let g = Graph::new();
        let p = g.bind(&gen.weights);
        let xv = g.constant(x_t);
        let out = gen.forward(&g, &p, xv, &ts, None)?;
        let tgt = g.constant(target);
        let d = g.sub(out, tgt);
        let sq = g.square(d);
        let loss = g.mean(sq);
        last = g.scalar(loss);
        if !last.is_finite() {
            return Err(Error::Diverged {
                step,
                reason: "non-finite pretraining loss".into(),
            });
        }
        let grads = g.backward(loss).for_bound(&p);
        opt.step(&mut gen.weights, &grads);
    }
    Ok((gen, last))
}

/// Checkpoint for a pretrained denoiser.
pub fn pretrained_checkpoint(gen: &Generator, table: &ScheduleTable, iterations: u64) -> Checkpoint {
    let mut meta = CheckpointMeta::new(gen.spec().clone(), table.config().clone(), table.hash_hex());
    meta.step = iterations;
    meta.stage_history.push(StageRecord {
        stage: "pretrain".into(),
        prediction: gen.kind(),
        schedule_hash: table.hash_hex(),
        iterations,
    });
    Checkpoint::new(meta, gen.weights.clone())
}

/// Append-only reader for a metrics CSV produced by [`Trainer::run`].
pub fn read_metrics(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().skip(1).map(str::to_string).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedulers::ScheduleConfig;

    #[test]
    fn coupling_modes_respect_levels() {
        let table = build_schedule(&ScheduleConfig::sd()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0 = standard_normal((6, 3), &mut rng);
        let eps = standard_normal((6, 3), &mut rng);
        let ts = vec![300, 500, 999, 26, 1, 250];
        let tms: Vec<usize> = ts.iter().map(|&t| skip(t, 25)).collect();
        let tks: Vec<usize> = ts.iter().map(|&t| skip(t, 250)).collect();
        for mode in [Coupling::Mixed, Coupling::SharedNoise, Coupling::ForwardChain] {
            let (x_t, x_tm, x_tk) = couple(&table, mode, &x0, &eps, &ts, &tms, &tks, &mut rng).unwrap();
            assert!(x_t.iter().chain(x_tm.iter()).chain(x_tk.iter()).all(|v| v.is_finite()));
        }
        let (x_t, _, x_tk) = couple(&table, Coupling::Mixed, &x0, &eps, &ts, &tms, &tks, &mut rng).unwrap();
        let e_t = table.implied_noise(&x0, &x_t, &ts).unwrap();
        let expect = table.corrupt_rows(&x0, &e_t, &tks).unwrap();
        assert!((&x_tk - &expect).iter().all(|d| d.abs() < 1e-12));
    }
}
