use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{time_features, Architecture, Backbone, Linear};
use super::{Conditioning, Generator};
use crate::autodiff::{Bound, Graph, Matrix, Var};
use crate::error::{Error, Result};
use crate::params::WeightSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DiscriminatorBackbone {
    /// Randomly initialised half network of the given architecture.
    Fresh { architecture: Architecture },
    /// The first half of a pretrained generator, copied.
    HalfOfPretrainedGenerator,
}

impl Default for DiscriminatorBackbone {
    fn default() -> Self {
        DiscriminatorBackbone::Fresh {
            architecture: Architecture::ResMlp {
                width: 64,
                blocks: 4,
            },
        }
    }
}

fn default_head() -> usize {
    64
}

fn default_time_dim() -> usize {
    16
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorSpec {
    #[serde(default)]
    pub backbone: DiscriminatorBackbone,
    #[serde(default = "default_head")]
    pub head_width: usize,
    #[serde(default = "default_time_dim")]
    pub time_embed_dim: usize,
    #[serde(default = "default_true")]
    pub zero_init_head: bool,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        Self {
            backbone: DiscriminatorBackbone::default(),
            head_width: default_head(),
            time_embed_dim: default_time_dim(),
            zero_init_head: true,
        }
    }
}

/// Time-conditioned discriminator `D(x, t, c)`: half backbone, then
/// pooled features through a two-layer head to one logit per row.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub weights: WeightSet,
    backbone: Backbone,
    head1: Linear,
    head2: Linear,
    data_dim: usize,
    conditioning: Conditioning,
    time_embed_dim: usize,
    reused_params: usize,
}

impl Discriminator {
    /// Fresh discriminator for `data_dim`-dimensional samples.
    pub fn new(
        spec: &DiscriminatorSpec,
        data_dim: usize,
        conditioning: Conditioning,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let DiscriminatorBackbone::Fresh { architecture } = &spec.backbone else {
            return Err(Error::config(
                "backbone",
                "a half-of-pretrained-generator backbone needs a generator; use from_generator",
            ));
        };
        Ok(Self::build(
            spec,
            architecture,
            data_dim,
            conditioning,
            spec.time_embed_dim,
            rng,
        ))
    }

    fn build(
        spec: &DiscriminatorSpec,
        architecture: &Architecture,
        data_dim: usize,
        conditioning: Conditioning,
        time_embed_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut weights = WeightSet::new();
        let backbone = Backbone::build(
            &mut weights,
            "backbone.",
            architecture,
            data_dim + conditioning.dim(),
            0,
            time_embed_dim,
            false,
            false,
            rng,
        );
        let head1 = Linear::new(
            &mut weights,
            "head.0",
            backbone.feature_dim,
            spec.head_width,
            false,
            rng,
        );
        let head2 = Linear::new(&mut weights, "head.1", spec.head_width, 1, spec.zero_init_head, rng);
        Self {
            weights,
            backbone,
            head1,
            head2,
            data_dim,
            conditioning,
            time_embed_dim,
            reused_params: 0,
        }
    }

    /// Build from any spec; `generator` is required for the pretrained backbone.
    pub fn from_spec(
        spec: &DiscriminatorSpec,
        generator: &Generator,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        match spec.backbone {
            DiscriminatorBackbone::Fresh { .. } => Self::new(
                spec,
                generator.data_dim(),
                generator.spec().conditioning.clone(),
                rng,
            ),
            DiscriminatorBackbone::HalfOfPretrainedGenerator => Self::from_generator(spec, generator, rng),
        }
    }

    /// Copy the first half of `generator` (input, time embedding and every
    /// block up to the bottleneck) as the backbone; only the head is new.
    pub fn from_generator(
        spec: &DiscriminatorSpec,
        generator: &Generator,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let gspec = generator.spec();
        let mut d = Self::build(
            spec,
            &gspec.architecture,
            gspec.data_dim(),
            gspec.conditioning.clone(),
            gspec.time_embed_dim,
            rng,
        );
        let mut reused = 0;
        for (name, m) in generator.weights.iter() {
            if let Some(slot) = d.weights.get_mut(&format!("backbone.{name}")) {
                slot.assign(m);
                reused += m.len();
            }
        }
        d.reused_params = reused;
        Ok(d)
    }

    /// Number of parameters copied from a pretrained generator.
    pub fn reused_param_count(&self) -> usize {
        self.reused_params
    }

    pub fn data_dim(&self) -> usize {
        self.data_dim
    }

    /// Logits, shape (B, 1).
    pub fn logits(
        &self,
        g: &Graph,
        p: &Bound,
        x: Var,
        ts: &[usize],
        cond: Option<&Matrix>,
    ) -> Result<Var> {
        let (rows, cols) = g.shape(x);
        if cols != self.data_dim || ts.len() != rows {
            return Err(Error::Shape {
                context: "discriminator input",
                expected: vec![ts.len(), self.data_dim],
                actual: vec![rows, cols],
            });
        }
        if !g.value_ref(x).iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "discriminator input".into(),
            });
        }
        self.conditioning.check(cond, rows)?;
        let input = match cond {
            Some(c) => {
                let c = g.constant(c.clone());
                g.concat(&[x, c])
            }
            None => x,
        };
        let tfeat = time_features(ts, self.time_embed_dim);
        let (features, _) = self.backbone.forward(g, p, input, &tfeat);
        let h = g.silu(features);
        let h = self.head1.apply(g, p, h);
        let h = g.silu(h);
        Ok(self.head2.apply(g, p, h))
    }

    /// One logit per row, without gradients.
    pub fn discriminate(&self, x: &Matrix, ts: &[usize], cond: Option<&Matrix>) -> Result<Vec<f64>> {
        let g = Graph::new();
        let p = g.bind_frozen(&self.weights);
        let xv = g.constant(x.clone());
        let out = self.logits(&g, &p, xv, ts, cond)?;
        Ok(g.value(out).column(0).to_vec())
    }
}
