//! Checkpoints: named f64 tensors in a safetensors file with a JSON
//! metadata record.

use std::collections::HashMap;
use std::path::Path;

use indexmap::IndexMap;
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::networks::{DiscriminatorSpec, GeneratorSpec};
use crate::parameterizations::PredictionKind;
use crate::params::WeightSet;
use crate::prior_init::PriorStats;
use crate::schedulers::ScheduleConfig;

const META_KEY: &str = "onestep";
const ORDER_KEY: &str = "tensor_order";
const FORMAT: u32 = 1;

pub const GENERATOR: &str = "generator";
pub const DISCRIMINATOR: &str = "discriminator";
pub const EMA: &str = "ema";
pub const ADAM_G_M: &str = "adam_g.m";
pub const ADAM_G_V: &str = "adam_g.v";
pub const ADAM_D_M: &str = "adam_d.m";
pub const ADAM_D_V: &str = "adam_d.v";

/// One entry in a model's training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// `pretrain`, `adapt_stage1`, `adapt_stage2`, `train`, `merge`, ...
    pub stage: String,
    pub prediction: PredictionKind,
    pub schedule_hash: String,
    pub iterations: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: u32,
    pub step: u64,
    pub generator_spec: GeneratorSpec,
    pub discriminator_spec: Option<DiscriminatorSpec>,
    pub config: Option<TrainConfig>,
    pub schedule: ScheduleConfig,
    pub schedule_hash: String,
    pub ema_decay: Option<f64>,
    pub stage_history: Vec<StageRecord>,
    pub rng: Option<ChaCha8Rng>,
    pub adam_g_step: u64,
    pub adam_d_step: u64,
    pub prior: Option<PriorStats>,
    /// Recent discriminator losses, for windowed summaries after resume.
    pub d_loss_tail: Vec<f64>,
    pub architecture_hash: String,
}

impl CheckpointMeta {
    pub fn new(generator_spec: GeneratorSpec, schedule: ScheduleConfig, schedule_hash: String) -> Self {
        Self {
            format: FORMAT,
            step: 0,
            generator_spec,
            discriminator_spec: None,
            config: None,
            schedule,
            schedule_hash,
            ema_decay: None,
            stage_history: Vec::new(),
            rng: None,
            adam_g_step: 0,
            adam_d_step: 0,
            prior: None,
            d_loss_tail: Vec::new(),
            architecture_hash: String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub sections: IndexMap<String, WeightSet>,
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta, generator: WeightSet) -> Self {
        let mut c = Self {
            meta,
            sections: IndexMap::new(),
        };
        c.meta.architecture_hash = generator.architecture_hash();
        c.sections.insert(GENERATOR.into(), generator);
        c
    }

    pub fn generator(&self) -> Result<&WeightSet> {
        self.section(GENERATOR)
    }

    pub fn section(&self, name: &str) -> Result<&WeightSet> {
        self.sections
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint has no '{name}' section")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buffers: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        for (section, set) in &self.sections {
            if section.contains('/') {
                return Err(Error::Checkpoint(format!("section name '{section}' contains '/'")));
            }
            for (name, m) in set.iter() {
                let bytes: Vec<u8> = m.iter().flat_map(|x| x.to_le_bytes()).collect();
                buffers.push((format!("{section}/{name}"), vec![m.nrows(), m.ncols()], bytes));
            }
        }
        let views: Vec<(String, TensorView)> = buffers
            .iter()
            .map(|(k, shape, bytes)| {
                TensorView::new(Dtype::F64, shape.clone(), bytes)
                    .map(|v| (k.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<_>>()?;
        let meta = serde_json::to_string(&self.meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let order: Vec<&str> = buffers.iter().map(|(k, _, _)| k.as_str()).collect();
        let order = serde_json::to_string(&order).expect("names serialise");
        let info = Some(HashMap::from([
            (META_KEY.to_string(), meta),
            (ORDER_KEY.to_string(), order),
        ]));
        safetensors::serialize(views, &info).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |e: String| Error::Checkpoint(e);
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| bad(e.to_string()))?;
        let record = |key: &str| {
            header
                .metadata()
                .as_ref()
                .and_then(|m| m.get(key))
                .ok_or_else(|| bad(format!("missing '{key}' metadata record")))
        };
        let meta_json = record(META_KEY)?;
        let order: Vec<String> = serde_json::from_str(record(ORDER_KEY)?).map_err(|e| bad(e.to_string()))?;
        let meta: CheckpointMeta = serde_json::from_str(meta_json).map_err(|e| bad(e.to_string()))?;
        if meta.format != FORMAT {
            return Err(bad(format!("unsupported checkpoint format {}", meta.format)));
        }
        let st = SafeTensors::deserialize(bytes).map_err(|e| bad(e.to_string()))?;
        // safetensors reorders tensors on disk; restore insertion order.
        if order.len() != st.len() {
            return Err(bad("tensor order record does not match the file".into()));
        }
        let mut sections: IndexMap<String, WeightSet> = IndexMap::new();
        for key in order {
            let view = st.tensor(&key).map_err(|e| bad(e.to_string()))?;
            let (section, name) = key
                .split_once('/')
                .ok_or_else(|| bad(format!("tensor '{key}' has no section")))?;
            if view.dtype() != Dtype::F64 || view.shape().len() != 2 {
                return Err(bad(format!("tensor '{key}' is not a 2-D f64 tensor")));
            }
            let values: Vec<f64> = view
                .data()
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let m = Matrix::from_shape_vec((view.shape()[0], view.shape()[1]), values)
                .map_err(|e| bad(e.to_string()))?;
            sections.entry(section.to_string()).or_default().insert(name, m);
        }
        let c = Self { meta, sections };
        let g = c.generator()?;
        if !c.meta.architecture_hash.is_empty() && g.architecture_hash() != c.meta.architecture_hash {
            return Err(bad("generator tensors do not match the recorded architecture".into()));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
