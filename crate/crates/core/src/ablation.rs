//! Ablation matrix driver.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{AblationMatrix, TrainConfig};
use crate::error::{Error, Result};
use crate::evaluation::EvalReport;
use crate::report::markdown_table;
use crate::trainer::Trainer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub eval: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub name: String,
    pub runs: Vec<SeedResult>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl VariantResult {
    fn collect(&self, f: impl Fn(&EvalReport) -> Option<f64>) -> Vec<f64> {
        self.runs.iter().filter_map(|r| f(&r.eval)).collect()
    }

    pub fn median_coverage(&self) -> Option<f64> {
        let v = self.collect(|e| e.mode_coverage);
        (!v.is_empty()).then(|| median(v))
    }

    pub fn mean_mmd(&self) -> f64 {
        mean(&self.collect(|e| Some(e.mmd)))
    }

    pub fn mean_w2(&self) -> f64 {
        mean(&self.collect(|e| Some(e.w2_1d_projections)))
    }

    pub fn mean_d_loss(&self) -> Option<f64> {
        let v = self.collect(|e| e.d_loss_mean);
        (!v.is_empty()).then(|| mean(&v))
    }

    pub fn mean_quality(&self) -> Option<f64> {
        let v = self.collect(|e| e.high_quality_fraction);
        (!v.is_empty()).then(|| mean(&v))
    }
}

/// Train every variant for every seed and collect the final evaluations.
/// Per-run artifacts go under `out/<variant>/seed<k>` when `out` is given.
pub fn run_matrix(base: &TrainConfig, matrix: &AblationMatrix, out: Option<&Path>) -> Result<Vec<VariantResult>> {
    let mut results = Vec::new();
    for variant in matrix.expand()? {
        let mut runs = Vec::new();
        for &seed in &matrix.seeds {
            let mut cfg = base.with_overrides(&variant.overrides)?;
            cfg.seed = seed;
            let eval = match out {
                Some(dir) => {
                    let slug: String = variant
                        .name
                        .chars()
                        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
                        .collect();
                    cfg.output_dir = Some(dir.join(slug).join(format!("seed{seed}")));
                    let mut t = Trainer::new(cfg)?;
                    t.run()?.final_eval
                }
                None => {
                    cfg.output_dir = None;
                    let mut t = Trainer::new(cfg)?;
                    t.run_with_log(&mut std::io::sink(), |_, _| Ok(()))?
                }
            };
            let eval = eval.ok_or_else(|| Error::Precondition("run produced no evaluation".into()))?;
            log::info!("{} seed {seed}: mmd {:.4}", variant.name, eval.mmd);
            runs.push(SeedResult { seed, eval });
        }
        results.push(VariantResult {
            name: variant.name.clone(),
            runs,
        });
    }
    Ok(results)
}

/// Comparison table with one row per variant.
pub fn comparison_table(results: &[VariantResult]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
    let rows: Vec<Vec<String>> = results
        .iter()
        .map(|r| {
            vec![
                r.name.clone(),
                r.runs.len().to_string(),
                opt(r.median_coverage()),
                opt(r.mean_quality()),
                format!("{:.4}", r.mean_mmd()),
                format!("{:.4}", r.mean_w2()),
                opt(r.mean_d_loss()),
            ]
        })
        .collect();
    markdown_table(
        &["Variant", "Seeds", "Mode coverage (median)", "High quality", "MMD²", "Sliced W2", "D loss (window)"],
        &rows,
    )
}
