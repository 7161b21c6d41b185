use crate::error::{Error, Result};
use crate::params::WeightSet;

/// Exponential moving average of generator weights.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    pub shadow: WeightSet,
    pub decay: f64,
}

impl EmaState {
    pub fn new(live: &WeightSet, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::config("ema_decay", format!("must lie in [0, 1], got {decay}")));
        }
        Ok(Self {
            shadow: live.clone(),
            decay,
        })
    }

    /// `shadow <- decay * shadow + (1 - decay) * live`.
    pub fn update(&mut self, live: &WeightSet) -> Result<()> {
        self.shadow.check_aligned(live, "ema update")?;
        let d = self.decay;
        for (name, s) in self.shadow.iter_mut() {
            let l = live.get(name).expect("aligned");
            s.zip_mut_with(l, |s, &l| *s = d * *s + (1.0 - d) * l);
        }
        Ok(())
    }
}
