use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use onestep::ablation::{comparison_table, run_matrix};
use onestep::adaptation::{adapt, AdaptConfig, AdaptStage, Stage2Pairing};
use onestep::checkpoint::{Checkpoint, StageRecord, EMA};
use onestep::config::{AblationMatrix, TrainConfig};
use onestep::networks::Generator;
use onestep::parameterizations::PredictionKind;
use onestep::schedulers::{build_schedule, ScheduleSpec};
use onestep::trainer::{pretrain_denoiser, pretrained_checkpoint, sample_one_step, PretrainConfig, Trainer};
use onestep::weight_algebra::{combine, CoefficientCheck};

#[derive(Parser)]
#[command(name = "onestep", version, about = "Train and evaluate one-step diffusion-GAN generators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Prediction {
    Eps,
    X0,
    V,
}

impl From<Prediction> for PredictionKind {
    fn from(p: Prediction) -> Self {
        match p {
            Prediction::Eps => PredictionKind::Eps,
            Prediction::X0 => PredictionKind::X0,
            Prediction::V => PredictionKind::V,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a generator from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Draw one-step samples from a checkpoint as CSV on stdout.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        ema: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run every variant of an ablation matrix and print a comparison table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write `base + alpha (up - base) + beta (tuned - base)` as a new checkpoint.
    Merge {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        up: PathBuf,
        #[arg(long)]
        tuned: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        /// Accept coefficients outside (0, 1].
        #[arg(long)]
        allow_any_coefficients: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt a pretrained teacher to v-prediction (stage 1) or zero terminal SNR (stage 2).
    Adapt {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        teacher: PathBuf,
        /// Stage-1 output, required for stage 2.
        #[arg(long)]
        student: Option<PathBuf>,
        /// Training config supplying the dataset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        iterations: u64,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Feed the teacher its own schedule's corruption in stage 2.
        #[arg(long)]
        literal_pairing: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain a plain denoiser on the config's dataset and schedule.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = Prediction::Eps)]
        prediction: Prediction,
        #[arg(long, default_value_t = 3000)]
        iterations: u64,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a schedule table as CSV.
    Schedule {
        /// Preset name: sd, ddpm or cosine.
        #[arg(long, default_value = "sd")]
        preset: String,
        #[arg(long)]
        zero_terminal_snr: bool,
    },
}

fn load_train_config(path: &PathBuf) -> anyhow::Result<TrainConfig> {
    TrainConfig::load(path).with_context(|| format!("reading {}", path.display()))
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train { config, resume, output } => {
            let mut cfg = load_train_config(&config)?;
            if let Some(o) = output {
                cfg.output_dir = Some(o);
            }
            if cfg.output_dir.is_none() {
                bail!("set output_dir in the config or pass --output");
            }
            let mut trainer = match resume {
                Some(path) => {
                    let mut ck = Checkpoint::load(&path)?;
                    if let Some(stored) = &mut ck.meta.config {
                        stored.output_dir = cfg.output_dir.clone();
                    }
                    Trainer::resume(&ck)?
                }
                None => Trainer::new(cfg)?,
            };
            let art = trainer.run()?;
            println!("checkpoint: {}", art.checkpoint.display());
            println!("metrics:    {}", art.metrics.display());
            println!("samples:    {}", art.samples.display());
            if let Some(r) = art.final_eval {
                println!("{}", serde_json::to_string_pretty(&r)?);
            }
        }
        Command::Sample { ckpt, n, ema, seed } => {
            let ck = Checkpoint::load(&ckpt)?;
            let gen = Generator::from_weights(ck.meta.generator_spec.clone(), ck.generator()?.clone())?;
            let table = build_schedule(&ck.meta.schedule)?;
            let weights = if ema { ck.section(EMA)? } else { ck.generator()? };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let samples = sample_one_step(&gen, weights, &table, ck.meta.prior.as_ref(), n, &mut rng)?;
            let stdout = std::io::stdout();
            let mut out = stdout.lock();
            for row in samples.rows() {
                let cells: Vec<String> = row.iter().map(|x| x.to_string()).collect();
                writeln!(out, "{}", cells.join(","))?;
            }
        }
        Command::Ablate { config, matrix, output } => {
            let cfg = load_train_config(&config)?;
            let m = AblationMatrix::load(&matrix)?;
            let results = run_matrix(&cfg, &m, output.as_deref())?;
            let table = comparison_table(&results);
            print!("{table}");
            if let Some(dir) = output {
                std::fs::write(dir.join("ablation.md"), &table)?;
                std::fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(&results)?)?;
            }
        }
        Command::Merge {
            base,
            up,
            tuned,
            alpha,
            beta,
            allow_any_coefficients,
            out,
        } => {
            let (b, u, t) = (Checkpoint::load(&base)?, Checkpoint::load(&up)?, Checkpoint::load(&tuned)?);
            let check = if allow_any_coefficients {
                CoefficientCheck::Override
            } else {
                CoefficientCheck::Strict
            };
            let merged = combine(b.generator()?, u.generator()?, t.generator()?, alpha, beta, check)?;
            let mut meta = t.meta.clone();
            meta.stage_history.push(StageRecord {
                stage: format!("merge(alpha={alpha}, beta={beta})"),
                prediction: meta.generator_spec.prediction,
                schedule_hash: meta.schedule_hash.clone(),
                iterations: 0,
            });
            Checkpoint::new(meta, merged).save(&out)?;
            println!("wrote {}", out.display());
        }
        Command::Adapt {
            stage,
            teacher,
            student,
            config,
            iterations,
            lr,
            seed,
            literal_pairing,
            out,
        } => {
            let tck = Checkpoint::load(&teacher)?;
            let tgen = Generator::from_weights(tck.meta.generator_spec.clone(), tck.generator()?.clone())?;
            let ttable = build_schedule(&tck.meta.schedule)?;
            let dataset = match config {
                Some(p) => load_train_config(&p)?.dataset,
                None => Default::default(),
            }
            .load()?;
            let stage = if stage == 1 { AdaptStage::One } else { AdaptStage::Two };
            let student = match student {
                Some(p) => {
                    let s = Checkpoint::load(&p)?;
                    Some(Generator::from_weights(s.meta.generator_spec.clone(), s.generator()?.clone())?)
                }
                None => None,
            };
            let cfg = AdaptConfig {
                stage,
                iterations,
                lr,
                seed,
                pairing: if literal_pairing {
                    Stage2Pairing::Literal
                } else {
                    Stage2Pairing::SharedInput
                },
                ..AdaptConfig::default()
            };
            let outcome = adapt(&tgen, &ttable, student, &dataset, &cfg)?;
            let mut ck = pretrained_checkpoint(&outcome.student, &outcome.student_table, iterations);
            let mut history = tck.meta.stage_history.clone();
            history.push(StageRecord {
                stage: format!("adapt_stage{}", if stage == AdaptStage::One { 1 } else { 2 }),
                prediction: outcome.student.kind(),
                schedule_hash: outcome.student_table.hash_hex(),
                iterations,
            });
            ck.meta.stage_history = history;
            ck.save(&out)?;
            println!(
                "held-out loss {:.6} -> {:.6} ({:.1}x); wrote {}",
                outcome.initial_loss,
                outcome.final_loss,
                outcome.initial_loss / outcome.final_loss,
                out.display()
            );
        }
        Command::Pretrain {
            config,
            prediction,
            iterations,
            lr,
            out,
        } => {
            let cfg = load_train_config(&config)?;
            let dataset = cfg.dataset.load()?;
            let table = build_schedule(&cfg.schedule.resolve())?;
            let mut spec = cfg.generator.generator_spec(dataset.data_shape());
            spec.prediction = prediction.into();
            spec.zero_init_head = false;
            let pcfg = PretrainConfig {
                iterations,
                lr,
                seed: cfg.seed,
                batch_size: cfg.batch_size,
            };
            let (gen, loss) = pretrain_denoiser(spec, &table, &dataset, &pcfg)?;
            pretrained_checkpoint(&gen, &table, iterations).save(&out)?;
            println!("final loss {loss:.6}; wrote {}", out.display());
        }
        Command::Schedule {
            preset,
            zero_terminal_snr,
        } => {
            let spec: ScheduleSpec = toml::from_str(&format!("preset = \"{preset}\""))
                .with_context(|| format!("unknown preset '{preset}'"))?;
            let table = build_schedule(&spec.resolve().with_zero_terminal_snr(zero_terminal_snr))?;
            table.write_csv(std::io::stdout().lock())?;
        }
    }
    Ok(())
}
