use super::layers::{time_features, Backbone};
use super::{Conditioning, Generator};
use crate::autodiff::{Graph, Matrix, Var};
use crate::error::{Error, Result};
use crate::params::WeightSet;

/// Bottleneck activations of a pretrained generator's first half,
/// evaluated at the fixed timestep `t = 0`.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    weights: WeightSet,
    backbone: Backbone,
    data_dim: usize,
    conditioning: Conditioning,
    time_embed_dim: usize,
    frozen: bool,
}

impl FeatureExtractor {
    /// Frozen copy of the first half of `generator`.
    pub fn from_generator(generator: &Generator) -> Self {
        let spec = generator.spec();
        let mut weights = WeightSet::new();
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let backbone = Backbone::build(
            &mut weights,
            "",
            &spec.architecture,
            spec.data_dim() + spec.conditioning.dim(),
            0,
            spec.time_embed_dim,
            false,
            false,
            &mut rng,
        );
        for (name, slot) in weights.iter_mut() {
            slot.assign(generator.weights.get(name).expect("half layout is a prefix of the full one"));
        }
        debug_assert_eq!(generator.backbone().feature_dim, backbone.feature_dim);
        Self {
            weights,
            backbone,
            data_dim: spec.data_dim(),
            conditioning: spec.conditioning.clone(),
            time_embed_dim: spec.time_embed_dim,
            frozen: true,
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.feature_dim
    }

    pub fn weights(&self) -> &WeightSet {
        &self.weights
    }

    pub(crate) fn ensure_frozen(&self) -> Result<()> {
        if !self.frozen {
            return Err(Error::Contract(
                "feature extractor must be frozen before use in a loss".into(),
            ));
        }
        Ok(())
    }

    /// Features on the graph; gradient flows to `z` but never to the
    /// extractor's weights.
    pub fn extract(&self, g: &Graph, z: Var, cond: Option<&Matrix>) -> Result<Var> {
        self.ensure_frozen()?;
        let (rows, cols) = g.shape(z);
        if cols != self.data_dim {
            return Err(Error::Shape {
                context: "feature extractor input",
                expected: vec![rows, self.data_dim],
                actual: vec![rows, cols],
            });
        }
        self.conditioning.check(cond, rows)?;
        let input = match cond {
            Some(c) => {
                let c = g.constant(c.clone());
                g.concat(&[z, c])
            }
            None => z,
        };
        let p = g.bind_frozen(&self.weights);
        let tfeat = time_features(&vec![0; rows], self.time_embed_dim);
        let (features, _) = self.backbone.forward(g, &p, input, &tfeat);
        Ok(features)
    }

    pub fn extract_features(&self, z: &Matrix, cond: Option<&Matrix>) -> Result<Matrix> {
        let g = Graph::new();
        let zv = g.constant(z.clone());
        let f = self.extract(&g, zv, cond)?;
        Ok(g.value(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{Architecture, GeneratorSpec};
    use crate::schedulers::standard_normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn extractor() -> FeatureExtractor {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut spec = GeneratorSpec::new(vec![6], Architecture::Unet { widths: vec![12, 8] });
        spec.zero_init_head = false;
        FeatureExtractor::from_generator(&Generator::new(spec, &mut rng).unwrap())
    }

    #[test]
    fn deterministic_and_shaped() {
        let f = extractor();
        let z = standard_normal((3, 6), &mut ChaCha8Rng::seed_from_u64(0));
        let a = f.extract_features(&z, None).unwrap();
        let b = f.extract_features(&z, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), (3, 8));
    }

    #[test]
    fn large_perturbations_change_features() {
        let f = extractor();
        let z = standard_normal((1, 6), &mut ChaCha8Rng::seed_from_u64(0));
        let shifted = &z + 5.0;
        let a = f.extract_features(&z, None).unwrap();
        let b = f.extract_features(&shifted, None).unwrap();
        assert!((&a - &b).iter().map(|d| d * d).sum::<f64>() > 1e-3);
    }

    #[test]
    fn unfrozen_extractor_is_rejected() {
        let mut f = extractor();
        f.set_frozen(false);
        let z = Matrix::zeros((1, 6));
        assert!(matches!(f.extract_features(&z, None), Err(Error::Contract(_))));
    }
}
