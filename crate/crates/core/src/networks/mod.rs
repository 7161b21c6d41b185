//! Trainable networks: the denoising generator, the time-conditioned
//! discriminator, the frozen half-network feature extractor, and EMA.

mod discriminator;
mod ema;
mod features;
pub(crate) mod layers;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Graph, Matrix, Var};
use crate::error::{Error, Result};
use crate::parameterizations::{convert_var, Prediction, PredictionKind};
use crate::params::WeightSet;
use crate::schedulers::ScheduleTable;

pub use discriminator::{DiscriminatorBackbone, Discriminator, DiscriminatorSpec};
pub use ema::EmaState;
pub use features::FeatureExtractor;
pub use layers::{time_features, Architecture, BlockInfo};

use layers::Backbone;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Conditioning {
    #[default]
    None,
    /// One-hot class labels.
    Class { num_classes: usize },
    /// A fixed-size embedding vector per sample.
    TextEmbedding { dim: usize },
}

impl Conditioning {
    pub fn dim(&self) -> usize {
        match self {
            Conditioning::None => 0,
            Conditioning::Class { num_classes } => *num_classes,
            Conditioning::TextEmbedding { dim } => *dim,
        }
    }

    pub(crate) fn check(&self, cond: Option<&Matrix>, rows: usize) -> Result<()> {
        match (self, cond) {
            (Conditioning::None, None) => Ok(()),
            (Conditioning::None, Some(_)) => Err(Error::Conditioning(
                "network is unconditional but conditioning was supplied".into(),
            )),
            (_, None) => Err(Error::Conditioning(format!(
                "network expects {} conditioning columns, none supplied",
                self.dim()
            ))),
            (_, Some(c)) if c.dim() != (rows, self.dim()) => Err(Error::Conditioning(format!(
                "conditioning has shape {:?}, expected ({rows}, {})",
                c.dim(),
                self.dim()
            ))),
            _ => Ok(()),
        }
    }
}

/// One-hot encode class labels.
pub fn one_hot(labels: &[usize], num_classes: usize) -> Matrix {
    let mut out = Matrix::zeros((labels.len(), num_classes));
    for (i, &l) in labels.iter().enumerate() {
        out[[i, l]] = 1.0;
    }
    out
}

fn default_time_dim() -> usize {
    16
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub data_shape: Vec<usize>,
    #[serde(default)]
    pub architecture: Architecture,
    #[serde(default = "default_time_dim")]
    pub time_embed_dim: usize,
    #[serde(default)]
    pub conditioning: Conditioning,
    #[serde(default)]
    pub prediction: PredictionKind,
    #[serde(default = "default_true")]
    pub zero_init_head: bool,
    /// Standard deviation of `p(x0 | x_t) = N(G(x_t, t), sigma² I)`.
    #[serde(default)]
    pub sigma: f64,
}

impl GeneratorSpec {
    pub fn new(data_shape: Vec<usize>, architecture: Architecture) -> Self {
        Self {
            data_shape,
            architecture,
            time_embed_dim: default_time_dim(),
            conditioning: Conditioning::None,
            prediction: PredictionKind::X0,
            zero_init_head: true,
            sigma: 0.0,
        }
    }

    pub fn data_dim(&self) -> usize {
        self.data_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_shape.is_empty() || self.data_dim() == 0 {
            return Err(Error::config("data_shape", "must be non-empty"));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::config("time_embed_dim", "must be an even number >= 2"));
        }
        if self.sigma < 0.0 {
            return Err(Error::config("sigma", "must be >= 0"));
        }
        match &self.architecture {
            Architecture::ResMlp { width, .. } if *width == 0 => {
                Err(Error::config("architecture", "width must be positive"))
            }
            Architecture::Unet { widths } if widths.is_empty() || widths.contains(&0) => {
                Err(Error::config("architecture", "widths must be non-empty and positive"))
            }
            _ => Ok(()),
        }
    }
}

/// The denoising generator `G(x_t, t, c)`.
#[derive(Clone, Debug)]
pub struct Generator {
    spec: GeneratorSpec,
    pub weights: WeightSet,
    backbone: Backbone,
}

impl Generator {
    pub fn new(spec: GeneratorSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut weights = WeightSet::new();
        let backbone = Backbone::build(
            &mut weights,
            "",
            &spec.architecture,
            spec.data_dim() + spec.conditioning.dim(),
            spec.data_dim(),
            spec.time_embed_dim,
            true,
            spec.zero_init_head,
            rng,
        );
        Ok(Self {
            spec,
            weights,
            backbone,
        })
    }

    /// Rebuild with the given weights; names and shapes must match the spec.
    pub fn from_weights(spec: GeneratorSpec, weights: WeightSet) -> Result<Self> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut g = Self::new(spec, &mut rng)?;
        g.weights.check_aligned(&weights, "generator weights")?;
        for (name, m) in weights.iter() {
            g.weights.get_mut(name).expect("aligned").assign(m);
        }
        Ok(g)
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn kind(&self) -> PredictionKind {
        self.spec.prediction
    }

    /// Reinterpret the same network as predicting `kind`.
    pub fn with_kind(mut self, kind: PredictionKind) -> Self {
        self.spec.prediction = kind;
        self
    }

    pub fn data_dim(&self) -> usize {
        self.spec.data_dim()
    }

    pub fn blocks(&self) -> Vec<BlockInfo> {
        self.backbone.block_info(&self.weights)
    }

    pub fn half_block_count(&self) -> usize {
        self.backbone.half_blocks
    }

    fn input(&self, g: &Graph, x_t: Var, cond: Option<&Matrix>) -> Result<Var> {
        let (rows, cols) = g.shape(x_t);
        if cols != self.data_dim() {
            return Err(Error::Shape {
                context: "generator input",
                expected: vec![rows, self.data_dim()],
                actual: vec![rows, cols],
            });
        }
        self.spec.conditioning.check(cond, rows)?;
        Ok(match cond {
            Some(c) => {
                let c = g.constant(c.clone());
                g.concat(&[x_t, c])
            }
            None => x_t,
        })
    }

    /// Raw network output (of the configured prediction kind).
    pub fn forward(
        &self,
        g: &Graph,
        p: &Bound,
        x_t: Var,
        ts: &[usize],
        cond: Option<&Matrix>,
    ) -> Result<Var> {
        let rows = g.shape(x_t).0;
        if ts.len() != rows {
            return Err(Error::Shape {
                context: "generator timesteps",
                expected: vec![rows],
                actual: vec![ts.len()],
            });
        }
        let input = self.input(g, x_t, cond)?;
        let tfeat = time_features(ts, self.spec.time_embed_dim);
        let (_, out) = self.backbone.forward(g, p, input, &tfeat);
        Ok(out.expect("generator backbone is full"))
    }

    /// Forward pass converted to a clean-sample estimate on the graph.
    pub fn predict_x0(
        &self,
        g: &Graph,
        p: &Bound,
        x_t: &Matrix,
        ts: &[usize],
        cond: Option<&Matrix>,
        table: &ScheduleTable,
    ) -> Result<Var> {
        let xv = g.constant(x_t.clone());
        let raw = self.forward(g, p, xv, ts, cond)?;
        convert_var(g, raw, x_t, ts, self.kind(), PredictionKind::X0, table)
    }

    /// Forward pass converted to `kind` on the graph.
    #[allow(clippy::too_many_arguments)]
    pub fn predict_as(
        &self,
        g: &Graph,
        p: &Bound,
        x_t: &Matrix,
        ts: &[usize],
        cond: Option<&Matrix>,
        table: &ScheduleTable,
        kind: PredictionKind,
    ) -> Result<Var> {
        let xv = g.constant(x_t.clone());
        let raw = self.forward(g, p, xv, ts, cond)?;
        convert_var(g, raw, x_t, ts, self.kind(), kind, table)
    }

    /// Evaluate the generator without recording gradients.
    pub fn generate(
        &self,
        x_t: &Matrix,
        ts: &[usize],
        cond: Option<&Matrix>,
        table: &ScheduleTable,
    ) -> Result<Prediction> {
        self.generate_with(&self.weights, x_t, ts, cond, table)
    }

    /// As [`Generator::generate`] but with substitute weights (e.g. EMA).
    pub fn generate_with(
        &self,
        weights: &WeightSet,
        x_t: &Matrix,
        ts: &[usize],
        cond: Option<&Matrix>,
        table: &ScheduleTable,
    ) -> Result<Prediction> {
        for &t in ts {
            table.check_t(t)?;
        }
        let g = Graph::new();
        let p = g.bind_frozen(weights);
        let xv = g.constant(x_t.clone());
        let out = self.forward(&g, &p, xv, ts, cond)?;
        Ok(Prediction {
            value: g.value(out),
            kind: self.kind(),
            t: ts.to_vec(),
            schedule_id: table.id(),
        })
    }

    pub(crate) fn backbone(&self) -> &Backbone {
        &self.backbone
    }
}
