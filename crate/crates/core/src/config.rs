//! TOML training configuration and ablation matrices.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::annealing::AnnealConfig;
use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::losses::{AdvFormulation, AdvObjective, DistanceKind};
use crate::networks::{Architecture, DiscriminatorSpec, GeneratorSpec};
use crate::parameterizations::PredictionKind;
use crate::schedulers::{ScheduleSpec, SkipMap};

/// How the three noisy inputs `x_t`, `x_{t_m}`, `x_{t_k}` are drawn from one `x0`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    /// `x_{t_m}` by direct corruption, `x_t` chained forward from it; the
    /// adversarial teacher input reuses the noise implied by `x_t`.
    #[default]
    Mixed,
    /// All three levels corrupted with the same `ε`.
    SharedNoise,
    /// `x_t` by direct corruption; lower levels drawn from the posterior
    /// `q(x_s | x_t, x0)`, so every pair is a forward-chain pair.
    ForwardChain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub architecture: Architecture,
    #[serde(default = "default_time_dim")]
    pub time_embed_dim: usize,
    #[serde(default)]
    pub prediction: PredictionKind,
    #[serde(default = "default_true")]
    pub zero_init_head: bool,
    /// Output noise of the one-step sampler; 0 samples `G` deterministically.
    #[serde(default)]
    pub sigma: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::default(),
            time_embed_dim: default_time_dim(),
            prediction: PredictionKind::default(),
            zero_init_head: true,
            sigma: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn generator_spec(&self, data_shape: Vec<usize>) -> GeneratorSpec {
        let mut spec = GeneratorSpec::new(data_shape, self.architecture.clone());
        spec.time_embed_dim = self.time_embed_dim;
        spec.prediction = self.prediction;
        spec.zero_init_head = self.zero_init_head;
        spec.sigma = self.sigma;
        spec
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Evaluate every this many iterations; 0 evaluates only at the end.
    #[serde(default)]
    pub every: u64,
    #[serde(default = "default_eval_samples")]
    pub samples: usize,
    /// Sample with EMA weights.
    #[serde(default)]
    pub use_ema: bool,
    #[serde(default = "default_bandwidths")]
    pub bandwidths: Vec<f64>,
    /// Coverage radius in units of the dataset's mode std.
    #[serde(default = "default_radius_sigmas")]
    pub radius_sigmas: f64,
    #[serde(default = "default_min_mass")]
    pub min_mass: f64,
    /// Window for the discriminator-loss summary.
    #[serde(default = "default_window")]
    pub d_loss_window: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            every: 0,
            samples: default_eval_samples(),
            use_ema: false,
            bandwidths: default_bandwidths(),
            radius_sigmas: default_radius_sigmas(),
            min_mass: default_min_mass(),
            d_loss_window: default_window(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub skip: SkipMap,
    #[serde(default)]
    pub anneal: AnnealConfig,
    #[serde(default)]
    pub adv_formulation: AdvFormulation,
    #[serde(default)]
    pub adv_objective: AdvObjective,
    #[serde(default = "default_one")]
    pub adv_weight: f64,
    #[serde(default = "default_lr")]
    pub lr_g: f64,
    #[serde(default = "default_lr")]
    pub lr_d: f64,
    #[serde(default = "default_betas_g")]
    pub betas_g: (f64, f64),
    #[serde(default = "default_betas_d")]
    pub betas_d: (f64, f64),
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Total iterations `N`.
    #[serde(default = "default_iterations")]
    pub iterations: u64,
    #[serde(default = "default_ema")]
    pub ema_decay: f64,
    /// Global-norm clip applied to the generator gradient only; `None` disables it.
    #[serde(default = "default_clip")]
    pub grad_clip_g: Option<f64>,
    #[serde(default)]
    pub distance: DistanceKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub coupling: Coupling,
    /// Use distinct skips for the adversarial and consistency pairs; when
    /// false the adversarial teacher also uses `m`.
    #[serde(default = "default_true")]
    pub decoupled: bool,
    #[serde(default = "default_true")]
    pub use_consistency: bool,
    #[serde(default = "default_true")]
    pub use_reconstruction: bool,
    /// Sample terminal inputs from the moment-matched prior.
    #[serde(default)]
    pub informative_prior: bool,
    #[serde(default)]
    pub generator: ModelConfig,
    #[serde(default)]
    pub discriminator: DiscriminatorSpec,
    /// Pretrained generator checkpoint, needed for the latent perceptual
    /// distance, a half-generator discriminator, or fine-tuning.
    #[serde(default)]
    pub pretrained: Option<PathBuf>,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Write a checkpoint every this many iterations; 0 only writes the final one.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_time_dim() -> usize {
    16
}
fn default_true() -> bool {
    true
}
fn default_one() -> f64 {
    1.0
}
fn default_lr() -> f64 {
    2e-4
}
fn default_betas_g() -> (f64, f64) {
    (0.9, 0.999)
}
fn default_betas_d() -> (f64, f64) {
    (0.0, 0.999)
}
fn default_batch() -> usize {
    128
}
fn default_iterations() -> u64 {
    20_000
}
fn default_ema() -> f64 {
    0.9999
}
fn default_clip() -> Option<f64> {
    Some(1.0)
}
fn default_eval_samples() -> usize {
    2000
}
fn default_bandwidths() -> Vec<f64> {
    vec![0.1, 0.5, 1.0, 2.0]
}
fn default_radius_sigmas() -> f64 {
    3.0
}
fn default_min_mass() -> f64 {
    0.02
}
fn default_window() -> usize {
    500
}

impl Default for TrainConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config {
            field: "config",
            reason: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Effective adversarial skip after the decoupling switch.
    pub fn adversarial_skip(&self) -> usize {
        if self.decoupled {
            self.skip.k
        } else {
            self.skip.m
        }
    }

    pub fn validate(&self) -> Result<()> {
        let schedule = self.schedule.resolve();
        schedule.validate()?;
        self.skip.validate(schedule.num_steps)?;
        self.anneal.validate(self.iterations)?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        for (field, lr) in [("lr_g", self.lr_g), ("lr_d", self.lr_d)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::config(field, format!("must be positive, got {lr}")));
            }
        }
        for (field, (b1, b2)) in [("betas_g", self.betas_g), ("betas_d", self.betas_d)] {
            if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
                return Err(Error::config(field, "betas must lie in [0, 1)"));
            }
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::config("ema_decay", "must lie in [0, 1]"));
        }
        if let Some(c) = self.grad_clip_g {
            if !(c > 0.0) {
                return Err(Error::config("grad_clip_g", "must be positive"));
            }
        }
        if !(self.adv_weight >= 0.0 && self.adv_weight.is_finite()) {
            return Err(Error::config("adv_weight", "must be finite and >= 0"));
        }
        if self.distance == DistanceKind::LatentPerceptual && self.pretrained.is_none() {
            return Err(Error::config(
                "distance",
                "latent_perceptual needs a pretrained generator checkpoint",
            ));
        }
        if self.eval.samples < 2 {
            return Err(Error::config("eval.samples", "must be >= 2"));
        }
        Ok(())
    }

    /// Apply `key = value` overrides, where keys may be dotted paths
    /// (`anneal.enabled`).
    pub fn with_overrides(&self, overrides: &toml::Table) -> Result<Self> {
        let mut root = toml::Value::try_from(self).expect("config serialises");
        for (key, value) in overrides {
            set_path(&mut root, key, value.clone())?;
        }
        root.try_into().map_err(|e: toml::de::Error| Error::Config {
            field: "overrides",
            reason: e.to_string(),
        })
    }
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cur.as_table_mut().ok_or_else(|| Error::Config {
            field: "overrides",
            reason: format!("'{key}' does not name a table path"),
        })?;
        if i + 1 == parts.len() {
            match (table.get_mut(*part), value) {
                (Some(toml::Value::Table(existing)), toml::Value::Table(new)) => {
                    for (k, v) in new {
                        existing.insert(k, v);
                    }
                }
                (_, value) => {
                    table.insert(part.to_string(), value);
                }
            }
            return Ok(());
        }
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Ok(())
}

/// One named configuration in an ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    #[serde(default, flatten)]
    pub overrides: toml::Table,
}

/// Ablation matrix file: explicit variants, plus optional axes whose
/// Cartesian product is appended.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationMatrix {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub variants: Vec<Variant>,
    #[serde(default)]
    pub axes: toml::Table,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl AblationMatrix {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config {
            field: "matrix",
            reason: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// All variants, explicit first, then the axis product.
    pub fn expand(&self) -> Result<Vec<Variant>> {
        let mut out = self.variants.clone();
        let mut product: Vec<Variant> = vec![Variant {
            name: String::new(),
            overrides: toml::Table::new(),
        }];
        if self.axes.is_empty() {
            return Ok(out);
        }
        for (key, values) in &self.axes {
            let values = values.as_array().ok_or_else(|| Error::Config {
                field: "axes",
                reason: format!("axis '{key}' must be an array"),
            })?;
            let mut next = Vec::new();
            for base in &product {
                for v in values {
                    let mut o = base.overrides.clone();
                    o.insert(key.clone(), v.clone());
                    let label = format!("{key}={}", display_value(v));
                    let name = if base.name.is_empty() {
                        label
                    } else {
                        format!("{} {label}", base.name)
                    };
                    next.push(Variant { name, overrides: o });
                }
            }
            product = next;
        }
        out.extend(product);
        Ok(out)
    }
}

fn display_value(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}
