//! Tape-based reverse-mode differentiation over row-major `f64` matrices.
//!
//! Every tensor in the framework is a 2-D matrix whose rows are batch
//! elements. A [`Graph`] records operations as they are applied; calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and
//! returns a [`Gradients`] table. Nodes created with [`Graph::constant`] or
//! [`Graph::detach`] never receive gradient, which is how stop-gradient
//! branches and frozen networks are expressed.

use std::cell::{Ref, RefCell};

use ndarray::{Array2, Axis, Zip};

use crate::params::WeightSet;

pub type Matrix = Array2<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Linear { x: usize, w: usize, b: usize },
    MatMul(usize, usize),
    Silu(usize),
    Tanh(usize),
    LogSigmoid { x: usize, clamp: f64 },
    Square(usize),
    Concat(Vec<usize>),
    Slice { x: usize, start: usize },
    Sum(usize),
    Mean(usize),
    RowSum(usize),
    ColMean(usize),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// A recording of one forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Parameters of a [`WeightSet`] placed on a graph, in weight-set order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, index: usize) -> Var {
        self.vars[index]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn reduce_to(grad: &Matrix, shape: (usize, usize)) -> Matrix {
    let mut g = grad.clone();
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that receives gradient.
    pub fn variable(&self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Stop-gradient: a fresh constant holding the current value of `v`.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        self.constant(value)
    }

    pub fn bind(&self, weights: &WeightSet) -> Bound {
        Bound {
            vars: weights.iter().map(|(_, m)| self.variable(m.clone())).collect(),
        }
    }

    pub fn bind_frozen(&self, weights: &WeightSet) -> Bound {
        Bound {
            vars: weights.iter().map(|(_, m)| self.constant(m.clone())).collect(),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> Matrix {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn value_ref(&self, v: Var) -> Ref<'_, Matrix> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.dim()
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let nodes = self.nodes.borrow();
        let m = &nodes[v.0].value;
        debug_assert_eq!(m.dim(), (1, 1), "scalar() on a non-scalar node");
        m[[0, 0]]
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = { &*self.value_ref(a) + &*self.value_ref(b) };
        self.push(value, Op::Add(a.0, b.0), self.rg(&[a.0, b.0]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let value = { &*self.value_ref(a) - &*self.value_ref(b) };
        self.push(value, Op::Sub(a.0, b.0), self.rg(&[a.0, b.0]))
    }

    /// Elementwise product; either operand may be a row or column vector.
    pub fn mul(&self, a: Var, b: Var) -> Var {
        let value = { &*self.value_ref(a) * &*self.value_ref(b) };
        self.push(value, Op::Mul(a.0, b.0), self.rg(&[a.0, b.0]))
    }

    /// Multiply rows by per-row constants (`col` is B×1).
    pub fn mul_col(&self, a: Var, col: Matrix) -> Var {
        let c = self.constant(col);
        self.mul(a, c)
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let value = { &*self.value_ref(a) * s };
        self.push(value, Op::Scale(a.0, s), self.rg(&[a.0]))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `x · w + b` with `w` shaped (in, out) and `b` shaped (1, out).
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Var {
        let value = {
            let xv = self.value_ref(x);
            let wv = self.value_ref(w);
            let bv = self.value_ref(b);
            xv.dot(&*wv) + &*bv
        };
        self.push(
            value,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.0,
            },
            self.rg(&[x.0, w.0, b.0]),
        )
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = { self.value_ref(a).dot(&*self.value_ref(b)) };
        self.push(value, Op::MatMul(a.0, b.0), self.rg(&[a.0, b.0]))
    }

    pub fn silu(&self, a: Var) -> Var {
        let value = self.value_ref(a).mapv(|x| x * sigmoid(x));
        self.push(value, Op::Silu(a.0), self.rg(&[a.0]))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let value = self.value_ref(a).mapv(f64::tanh);
        self.push(value, Op::Tanh(a.0), self.rg(&[a.0]))
    }

    /// `log σ(clamp(x, -c, c))`; gradient is zero outside the clamp.
    pub fn log_sigmoid(&self, a: Var, clamp: f64) -> Var {
        let value = self
            .value_ref(a)
            .mapv(|x| log_sigmoid(x.clamp(-clamp, clamp)));
        self.push(value, Op::LogSigmoid { x: a.0, clamp }, self.rg(&[a.0]))
    }

    pub fn square(&self, a: Var) -> Var {
        let value = self.value_ref(a).mapv(|x| x * x);
        self.push(value, Op::Square(a.0), self.rg(&[a.0]))
    }

    /// Concatenate along columns; all parts must share the row count.
    pub fn concat(&self, parts: &[Var]) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|p| nodes[p.0].value.view()).collect();
            ndarray::concatenate(Axis(1), &views).expect("concat: row counts differ")
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        self.push(value, Op::Concat(ids), rg)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Var {
        let value = self
            .value_ref(a)
            .slice(ndarray::s![.., start..end])
            .to_owned();
        self.push(value, Op::Slice { x: a.0, start }, self.rg(&[a.0]))
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.value_ref(a).sum();
        self.push(Matrix::from_elem((1, 1), s), Op::Sum(a.0), self.rg(&[a.0]))
    }

    pub fn mean(&self, a: Var) -> Var {
        let m = {
            let v = self.value_ref(a);
            v.sum() / v.len() as f64
        };
        self.push(Matrix::from_elem((1, 1), m), Op::Mean(a.0), self.rg(&[a.0]))
    }

    /// Per-row sum, B×1.
    pub fn row_sum(&self, a: Var) -> Var {
        let value = self.value_ref(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(value, Op::RowSum(a.0), self.rg(&[a.0]))
    }

    /// Per-row mean, B×1.
    pub fn row_mean(&self, a: Var) -> Var {
        let cols = self.shape(a).1 as f64;
        let s = self.row_sum(a);
        self.scale(s, 1.0 / cols)
    }

    /// Mean over rows, 1×C.
    pub fn col_mean(&self, a: Var) -> Var {
        let value = self
            .value_ref(a)
            .mean_axis(Axis(0))
            .expect("col_mean on empty matrix")
            .insert_axis(Axis(0));
        self.push(value, Op::ColMean(a.0), self.rg(&[a.0]))
    }

    /// Reverse pass from a 1×1 node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Matrix>> = (0..nodes.len()).map(|_| None).collect();
        assert_eq!(nodes[loss.0].value.dim(), (1, 1), "backward from a non-scalar");
        if !nodes[loss.0].requires_grad {
            return Gradients {
                grads,
                shapes: nodes.iter().map(|n| n.value.dim()).collect(),
            };
        }
        grads[loss.0] = Some(Matrix::ones((1, 1)));

        let accumulate = |grads: &mut Vec<Option<Matrix>>, idx: usize, g: Matrix| {
            if !nodes[idx].requires_grad {
                return;
            }
            match &mut grads[idx] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        };

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(gy);
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, reduce_to(&gy, nodes[*a].value.dim()));
                    accumulate(&mut grads, *b, reduce_to(&gy, nodes[*b].value.dim()));
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, reduce_to(&gy, nodes[*a].value.dim()));
                    let gb = reduce_to(&gy, nodes[*b].value.dim());
                    accumulate(&mut grads, *b, -gb);
                }
                Op::Mul(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    if nodes[*a].requires_grad {
                        accumulate(&mut grads, *a, reduce_to(&(&gy * bv), av.dim()));
                    }
                    if nodes[*b].requires_grad {
                        accumulate(&mut grads, *b, reduce_to(&(&gy * av), bv.dim()));
                    }
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, &gy * *s),
                Op::Linear { x, w, b } => {
                    if nodes[*x].requires_grad {
                        accumulate(&mut grads, *x, gy.dot(&nodes[*w].value.t()));
                    }
                    if nodes[*w].requires_grad {
                        accumulate(&mut grads, *w, nodes[*x].value.t().dot(&gy));
                    }
                    if nodes[*b].requires_grad {
                        accumulate(&mut grads, *b, gy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                }
                Op::MatMul(a, b) => {
                    if nodes[*a].requires_grad {
                        accumulate(&mut grads, *a, gy.dot(&nodes[*b].value.t()));
                    }
                    if nodes[*b].requires_grad {
                        accumulate(&mut grads, *b, nodes[*a].value.t().dot(&gy));
                    }
                }
                Op::Silu(a) => {
                    let mut g = gy;
                    Zip::from(&mut g).and(&nodes[*a].value).for_each(|g, &x| {
                        let s = sigmoid(x);
                        *g *= s * (1.0 + x * (1.0 - s));
                    });
                    accumulate(&mut grads, *a, g);
                }
                Op::Tanh(a) => {
                    let mut g = gy;
                    Zip::from(&mut g).and(&node.value).for_each(|g, &y| {
                        *g *= 1.0 - y * y;
                    });
                    accumulate(&mut grads, *a, g);
                }
                Op::LogSigmoid { x, clamp } => {
                    let mut g = gy;
                    Zip::from(&mut g).and(&nodes[*x].value).for_each(|g, &v| {
                        if v.abs() > *clamp {
                            *g = 0.0;
                        } else {
                            *g *= sigmoid(-v);
                        }
                    });
                    accumulate(&mut grads, *x, g);
                }
                Op::Square(a) => {
                    let g = &gy * &nodes[*a].value * 2.0;
                    accumulate(&mut grads, *a, g);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let width = nodes[p].value.ncols();
                        if nodes[p].requires_grad {
                            let g = gy.slice(ndarray::s![.., offset..offset + width]).to_owned();
                            accumulate(&mut grads, p, g);
                        }
                        offset += width;
                    }
                }
                Op::Slice { x, start } => {
                    let mut g = Matrix::zeros(nodes[*x].value.dim());
                    let width = gy.ncols();
                    g.slice_mut(ndarray::s![.., *start..*start + width]).assign(&gy);
                    accumulate(&mut grads, *x, g);
                }
                Op::Sum(a) => {
                    let g = Matrix::from_elem(nodes[*a].value.dim(), gy[[0, 0]]);
                    accumulate(&mut grads, *a, g);
                }
                Op::Mean(a) => {
                    let n = nodes[*a].value.len() as f64;
                    let g = Matrix::from_elem(nodes[*a].value.dim(), gy[[0, 0]] / n);
                    accumulate(&mut grads, *a, g);
                }
                Op::RowSum(a) => {
                    let dim = nodes[*a].value.dim();
                    let g = gy
                        .broadcast(dim)
                        .expect("row_sum gradient broadcast")
                        .to_owned();
                    accumulate(&mut grads, *a, g);
                }
                Op::ColMean(a) => {
                    let dim = nodes[*a].value.dim();
                    let g = gy
                        .broadcast(dim)
                        .expect("col_mean gradient broadcast")
                        .to_owned()
                        / dim.0 as f64;
                    accumulate(&mut grads, *a, g);
                }
            }
        }

        Gradients {
            grads,
            shapes: nodes.iter().map(|n| n.value.dim()).collect(),
        }
    }
}

/// Gradient table produced by [`Graph::backward`]. Only leaves keep their
/// gradient; interior gradients are consumed during the pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros when no gradient reached it.
    pub fn get_or_zero(&self, v: Var) -> Matrix {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(self.shapes[v.0]))
    }

    pub fn for_bound(&self, bound: &Bound) -> Vec<Matrix> {
        bound.vars().iter().map(|&v| self.get_or_zero(v)).collect()
    }
}
