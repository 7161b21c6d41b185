use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Graph, Matrix, Var};
use crate::params::WeightSet;

/// Dense layer `y = x·W + b` with `W` stored as (in, out).
#[derive(Clone, Debug)]
pub(crate) struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn new(
        weights: &mut WeightSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        zero: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut init = |rows, cols| {
            if zero {
                Matrix::zeros((rows, cols))
            } else {
                Matrix::from_shape_simple_fn((rows, cols), || rng.gen_range(-bound..bound))
            }
        };
        let w = weights.insert(format!("{name}.w"), init(fan_in, fan_out));
        let b = weights.insert(format!("{name}.b"), init(1, fan_out));
        Self { w, b }
    }

    pub fn apply(&self, g: &Graph, p: &Bound, x: Var) -> Var {
        g.linear(x, p.var(self.w), p.var(self.b))
    }

    pub fn params(&self) -> [usize; 2] {
        [self.w, self.b]
    }
}

/// Sinusoidal features of integer timesteps, shape (B, dim).
pub fn time_features(ts: &[usize], dim: usize) -> Matrix {
    let half = dim / 2;
    let mut out = Matrix::zeros((ts.len(), dim));
    for (i, &t) in ts.iter().enumerate() {
        for k in 0..half {
            let freq = (-(10_000f64).ln() * k as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            out[[i, k]] = arg.sin();
            out[[i, half + k]] = arg.cos();
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Architecture {
    /// Residual MLP: input projection, `blocks` time-conditioned residual
    /// blocks of constant `width`, linear head.
    ResMlp { width: usize, blocks: usize },
    /// U-shaped MLP: dense down path through `widths`, a bottleneck, and an
    /// up path with skip connections.
    Unet { widths: Vec<usize> },
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture::ResMlp {
            width: 64,
            blocks: 3,
        }
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    l1: Linear,
    l2: Linear,
    lt: Linear,
}

#[derive(Clone, Debug)]
enum Layout {
    ResMlp {
        input: Linear,
        temb: Linear,
        blocks: Vec<ResBlock>,
        head: Option<Linear>,
    },
    Unet {
        input: Linear,
        temb: Linear,
        down: Vec<(Linear, Linear)>,
        mid: (Linear, Linear),
        up: Vec<Linear>,
        head: Option<Linear>,
    },
}

/// A named group of parameters, used for structural checks.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockInfo {
    pub name: String,
    pub params: Vec<String>,
    pub param_count: usize,
}

/// Layer layout over a weight set; either the full network or only its
/// first half (through the bottleneck / middle residual block).
#[derive(Clone, Debug)]
pub(crate) struct Backbone {
    layout: Layout,
    pub feature_dim: usize,
    blocks: Vec<(String, Vec<usize>)>,
    pub half_blocks: usize,
}

fn half_count(n: usize) -> usize {
    n.div_ceil(2)
}

impl Backbone {
    /// `in_dim` includes conditioning columns; `full = false` stops after the
    /// first half and allocates no head.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        weights: &mut WeightSet,
        prefix: &str,
        arch: &Architecture,
        in_dim: usize,
        out_dim: usize,
        time_dim: usize,
        full: bool,
        zero_head: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let mut blocks = Vec::new();
        let (layout, feature_dim, half_blocks) = match arch {
            Architecture::ResMlp { width, blocks: n } => {
                let w = *width;
                let input = Linear::new(weights, &format!("{prefix}input"), in_dim, w, false, rng);
                let temb = Linear::new(weights, &format!("{prefix}temb"), time_dim, w, false, rng);
                let mut first: Vec<usize> = input.params().to_vec();
                first.extend(temb.params());
                blocks.push(("input".to_string(), first));
                let keep = if full { *n } else { half_count(*n) };
                let mut res = Vec::new();
                for i in 0..keep {
                    let l1 = Linear::new(weights, &format!("{prefix}blocks.{i}.l1"), w, w, false, rng);
                    let lt = Linear::new(weights, &format!("{prefix}blocks.{i}.lt"), w, w, false, rng);
                    let l2 = Linear::new(weights, &format!("{prefix}blocks.{i}.l2"), w, w, false, rng);
                    let mut ids = l1.params().to_vec();
                    ids.extend(lt.params());
                    ids.extend(l2.params());
                    blocks.push((format!("blocks.{i}"), ids));
                    res.push(ResBlock { l1, l2, lt });
                }
                let head = full.then(|| {
                    let h = Linear::new(weights, &format!("{prefix}head"), w, out_dim, zero_head, rng);
                    blocks.push(("head".to_string(), h.params().to_vec()));
                    h
                });
                (
                    Layout::ResMlp {
                        input,
                        temb,
                        blocks: res,
                        head,
                    },
                    w,
                    1 + half_count(*n),
                )
            }
            Architecture::Unet { widths } => {
                let w0 = widths[0];
                let input = Linear::new(weights, &format!("{prefix}input"), in_dim, w0, false, rng);
                let temb = Linear::new(weights, &format!("{prefix}temb"), time_dim, w0, false, rng);
                let mut first: Vec<usize> = input.params().to_vec();
                first.extend(temb.params());
                blocks.push(("input".to_string(), first));
                let mut down = Vec::new();
                for i in 1..widths.len() {
                    let lin = Linear::new(
                        weights,
                        &format!("{prefix}down.{i}"),
                        widths[i - 1],
                        widths[i],
                        false,
                        rng,
                    );
                    let tp = Linear::new(weights, &format!("{prefix}down.{i}.t"), w0, widths[i], false, rng);
                    let mut ids = lin.params().to_vec();
                    ids.extend(tp.params());
                    blocks.push((format!("down.{i}"), ids));
                    down.push((lin, tp));
                }
                let wl = *widths.last().expect("unet needs at least one width");
                let mid_lin = Linear::new(weights, &format!("{prefix}mid"), wl, wl, false, rng);
                let mid_t = Linear::new(weights, &format!("{prefix}mid.t"), w0, wl, false, rng);
                let mut ids = mid_lin.params().to_vec();
                ids.extend(mid_t.params());
                blocks.push(("mid".to_string(), ids));
                let mut up = Vec::new();
                let mut head = None;
                if full {
                    for j in (1..widths.len()).rev() {
                        let l = Linear::new(
                            weights,
                            &format!("{prefix}up.{j}"),
                            2 * widths[j],
                            widths[j - 1],
                            false,
                            rng,
                        );
                        blocks.push((format!("up.{j}"), l.params().to_vec()));
                        up.push(l);
                    }
                    let h = Linear::new(weights, &format!("{prefix}head"), 2 * w0, out_dim, zero_head, rng);
                    blocks.push(("head".to_string(), h.params().to_vec()));
                    head = Some(h);
                }
                (
                    Layout::Unet {
                        input,
                        temb,
                        down,
                        mid: (mid_lin, mid_t),
                        up,
                        head,
                    },
                    wl,
                    widths.len() + 1,
                )
            }
        };
        Self {
            layout,
            feature_dim,
            blocks,
            half_blocks,
        }
    }

    pub fn block_info(&self, weights: &WeightSet) -> Vec<BlockInfo> {
        self.blocks
            .iter()
            .map(|(name, ids)| BlockInfo {
                name: name.clone(),
                params: ids.iter().map(|&i| weights.name_at(i).to_string()).collect(),
                param_count: ids.iter().map(|&i| weights.at(i).len()).sum(),
            })
            .collect()
    }

    /// Runs the network; returns `(features, output)` where `output` is
    /// `None` for a half backbone.
    pub fn forward(&self, g: &Graph, p: &Bound, input: Var, tfeat: &Matrix) -> (Var, Option<Var>) {
        let te_in = g.constant(tfeat.clone());
        match &self.layout {
            Layout::ResMlp {
                input: inp,
                temb,
                blocks,
                head,
            } => {
                let te_lin = temb.apply(g, p, te_in);
                let te = g.silu(te_lin);
                let mut h = inp.apply(g, p, input);
                let mut features = h;
                for (i, b) in blocks.iter().enumerate() {
                    let u = g.silu(h);
                    let u = b.l1.apply(g, p, u);
                    let tt = b.lt.apply(g, p, te);
                    let u = g.add(u, tt);
                    let u = g.silu(u);
                    let u = b.l2.apply(g, p, u);
                    h = g.add(h, u);
                    if i + 1 == self.half_blocks - 1 {
                        features = h;
                    }
                }
                if blocks.is_empty() {
                    features = h;
                }
                let out = head.as_ref().map(|hd| {
                    let a = g.silu(h);
                    hd.apply(g, p, a)
                });
                (features, out)
            }
            Layout::Unet {
                input: inp,
                temb,
                down,
                mid,
                up,
                head,
            } => {
                let te_lin = temb.apply(g, p, te_in);
                let te = g.silu(te_lin);
                let h0 = inp.apply(g, p, input);
                let mut h = g.silu(h0);
                let mut skips = vec![h];
                for (lin, tp) in down {
                    let a = lin.apply(g, p, h);
                    let b = tp.apply(g, p, te);
                    let s = g.add(a, b);
                    h = g.silu(s);
                    skips.push(h);
                }
                let a = mid.0.apply(g, p, h);
                let b = mid.1.apply(g, p, te);
                let s = g.add(a, b);
                h = g.silu(s);
                let features = h;
                let out = head.as_ref().map(|hd| {
                    let mut h = h;
                    for l in up {
                        let skip = skips.pop().expect("skip stack");
                        let c = g.concat(&[h, skip]);
                        let z = l.apply(g, p, c);
                        h = g.silu(z);
                    }
                    let c = g.concat(&[h, skips[0]]);
                    hd.apply(g, p, c)
                });
                (features, out)
            }
        }
    }
}
