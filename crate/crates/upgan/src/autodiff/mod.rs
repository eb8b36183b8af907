//! Minimal dense reverse-mode differentiation kernel.
//!
//! Every model in this crate is expressed through a small set of primitives
//! (affine maps, elementwise nonlinearities, softmax, concatenation, dot
//! products) recorded eagerly on a [`Tape`]. The tape owns forward values;
//! [`Tape::backward`] replays the records in reverse and scatters gradients
//! into a [`ParameterStore`], which also carries the Adam state.
//!
//! The kernel works in `f64` throughout. Checkpoints serialize values as
//! 32-bit floats (see [`archive`]).
//!
//! A parameter store must not be mutated while a tape built on it is still
//! in use: leaves copy values at creation time and backward scatters by
//! name, so shapes have to stay put.

mod archive;
mod gradcheck;
mod store;

pub use archive::{archive_to_bytes, read_archive, write_archive, ARCHIVE_MAGIC, ARCHIVE_VERSION};
pub use gradcheck::grad_check;
pub use store::{project_min_norm, AdamConfig, Param, ParameterStore, Tensor};

use std::collections::HashMap;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("non-finite gradient in {name:?} at index {index}")]
    NonFiniteGradient { name: String, index: usize },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint archive (bad magic)")]
    BadMagic,
    #[error("unsupported archive version {0}")]
    BadVersion(u32),
    #[error("malformed archive entry: {0}")]
    BadEntry(String),
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    fn len(self) -> usize {
        match self {
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum LeafKey {
    Whole(String),
    Row(String, usize),
}

#[derive(Debug)]
enum Op {
    Const,
    LeafWhole { name: String },
    LeafRow { name: String, row: usize },
    /// Gathered rows of a rank-2 parameter; gradients scatter back per row.
    LeafRows { name: String, rows: Vec<usize> },
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    AddN(Vec<Var>),
    MulElem(Var, Var),
    MulScalarVec { s: Var, v: Var },
    MatVec { w: Var, x: Var },
    Affine { w: Var, x: Var, b: Var },
    Concat(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    LeakyRelu(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    MeanStack(Vec<Var>),
    Dot(Var, Var),
    Pick(Var, usize),
    StackScalars(Vec<Var>),
    SumVec(Var),
    L2Norm(Var),
    BceLogitsMean { logits: Var, targets: Vec<f64> },
    /// `lambda * sum of squared values` over named parameters. Forward reads
    /// the store; backward adds `2*lambda*value` straight into the store
    /// gradients.
    L2Penalty { names: Vec<String>, lambda: f64 },
}

struct Node {
    shape: Shape,
    value: Vec<f64>,
    op: Op,
}

/// Eager record of primitive applications with reverse replay.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_cache: HashMap<LeafKey, Var>,
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid_scalar(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let node = &self.nodes[v.0];
        assert_eq!(node.shape, Shape::Vector(1), "expected a scalar node");
        node.value[0]
    }

    fn push(&mut self, shape: Shape, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.len(), value.len());
        self.nodes.push(Node { shape, value, op });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    fn vector_len(&self, v: Var, ctx: &str) -> usize {
        match self.shape(v) {
            Shape::Vector(n) => n,
            Shape::Matrix(_, _) => panic!("{ctx}: expected a vector operand"),
        }
    }

    // ----- leaves -----

    pub fn constant(&mut self, values: &[f64]) -> Var {
        self.push(Shape::Vector(values.len()), values.to_vec(), Op::Const)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.constant(&[x])
    }

    /// Whole named parameter as a leaf. Repeated calls on the same tape
    /// return the same node so gradients accumulate in one place.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Var {
        let key = LeafKey::Whole(name.to_string());
        if let Some(&v) = self.leaf_cache.get(&key) {
            return v;
        }
        let t = store.value(name);
        let shape = match t.dims() {
            [n] => Shape::Vector(*n),
            [r, c] => Shape::Matrix(*r, *c),
            _ => unreachable!(),
        };
        let v = self.push(shape, t.data().to_vec(), Op::LeafWhole { name: name.to_string() });
        self.leaf_cache.insert(key, v);
        v
    }

    /// One row of a rank-2 named parameter as a vector leaf.
    pub fn param_row(&mut self, store: &ParameterStore, name: &str, row: usize) -> Var {
        let key = LeafKey::Row(name.to_string(), row);
        if let Some(&v) = self.leaf_cache.get(&key) {
            return v;
        }
        let t = store.value(name);
        assert_eq!(t.dims().len(), 2, "param_row needs a rank-2 parameter, got {name:?}");
        let v = self.push(
            Shape::Vector(t.cols()),
            t.row(row).to_vec(),
            Op::LeafRow { name: name.to_string(), row },
        );
        self.leaf_cache.insert(key, v);
        v
    }

    /// Gathered rows of a rank-2 named parameter as a matrix leaf.
    pub fn param_rows(&mut self, store: &ParameterStore, name: &str, rows: &[usize]) -> Var {
        let t = store.value(name);
        assert_eq!(t.dims().len(), 2, "param_rows needs a rank-2 parameter, got {name:?}");
        let c = t.cols();
        let mut value = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            value.extend_from_slice(t.row(r));
        }
        self.push(
            Shape::Matrix(rows.len(), c),
            value,
            Op::LeafRows { name: name.to_string(), rows: rows.to_vec() },
        )
    }

    // ----- arithmetic -----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        self.push(self.shape(a), value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x - y)
            .collect();
        self.push(self.shape(a), value, Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.iter().map(|x| x * c).collect();
        self.push(self.shape(a), value, Op::Scale(a, c))
    }

    pub fn add_n(&mut self, terms: &[Var]) -> Var {
        assert!(!terms.is_empty(), "add_n: empty term list");
        let shape = self.shape(terms[0]);
        let mut value = vec![0.0; shape.len()];
        for &t in terms {
            assert_eq!(self.shape(t), shape, "add_n: shape mismatch");
            for (acc, x) in value.iter_mut().zip(&self.nodes[t.0].value) {
                *acc += x;
            }
        }
        self.push(shape, value, Op::AddN(terms.to_vec()))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul_elem: shape mismatch");
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        self.push(self.shape(a), value, Op::MulElem(a, b))
    }

    pub fn mul_scalar_vec(&mut self, s: Var, v: Var) -> Var {
        assert_eq!(self.shape(s), Shape::Vector(1), "mul_scalar_vec: s must be scalar");
        let c = self.nodes[s.0].value[0];
        let value = self.nodes[v.0].value.iter().map(|x| x * c).collect();
        self.push(self.shape(v), value, Op::MulScalarVec { s, v })
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Var {
        let (r, c) = match self.shape(w) {
            Shape::Matrix(r, c) => (r, c),
            _ => panic!("matvec: first operand must be a matrix"),
        };
        let n = self.vector_len(x, "matvec");
        assert_eq!(c, n, "matvec: inner dimensions differ ({c} vs {n})");
        let wv = &self.nodes[w.0].value;
        let xv = &self.nodes[x.0].value;
        let mut value = vec![0.0; r];
        for i in 0..r {
            let row = &wv[i * c..(i + 1) * c];
            value[i] = row.iter().zip(xv).map(|(a, b)| a * b).sum();
        }
        self.push(Shape::Vector(r), value, Op::MatVec { w, x })
    }

    /// `W x + b`.
    pub fn affine(&mut self, w: Var, x: Var, b: Var) -> Var {
        let (r, c) = match self.shape(w) {
            Shape::Matrix(r, c) => (r, c),
            _ => panic!("affine: first operand must be a matrix"),
        };
        assert_eq!(self.vector_len(x, "affine"), c, "affine: inner dimensions differ");
        assert_eq!(self.vector_len(b, "affine"), r, "affine: bias length differs");
        let wv = &self.nodes[w.0].value;
        let xv = &self.nodes[x.0].value;
        let bv = &self.nodes[b.0].value;
        let mut value = vec![0.0; r];
        for i in 0..r {
            let row = &wv[i * c..(i + 1) * c];
            value[i] = row.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>() + bv[i];
        }
        self.push(Shape::Vector(r), value, Op::Affine { w, x, b })
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let n = self.vector_len(a, "concat");
        let m = self.vector_len(b, "concat");
        let mut value = Vec::with_capacity(n + m);
        value.extend_from_slice(&self.nodes[a.0].value);
        value.extend_from_slice(&self.nodes[b.0].value);
        self.push(Shape::Vector(n + m), value, Op::Concat(a, b))
    }

    // ----- nonlinearities -----

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.iter().map(|x| x.tanh()).collect();
        self.push(self.shape(a), value, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.iter().map(|&x| sigmoid_scalar(x)).collect();
        self.push(self.shape(a), value, Op::Sigmoid(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| if x >= 0.0 { x } else { slope * x })
            .collect();
        self.push(self.shape(a), value, Op::LeakyRelu(a, slope))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let n = self.vector_len(a, "softmax");
        assert!(n > 0, "softmax over an empty vector");
        let xs = &self.nodes[a.0].value;
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let value = exps.iter().map(|e| e / sum).collect();
        self.push(Shape::Vector(n), value, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let n = self.vector_len(a, "log_softmax");
        assert!(n > 0, "log_softmax over an empty vector");
        let xs = &self.nodes[a.0].value;
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let value = xs.iter().map(|x| x - lse).collect();
        self.push(Shape::Vector(n), value, Op::LogSoftmax(a))
    }

    // ----- aggregation -----

    /// Elementwise mean of equally shaped vectors.
    pub fn mean_stack(&mut self, terms: &[Var]) -> Var {
        let sum = self.add_n(terms);
        let n = terms.len() as f64;
        let value = self.nodes[sum.0].value.iter().map(|x| x / n).collect();
        self.push(self.shape(sum), value, Op::MeanStack(vec![sum]))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let n = self.vector_len(a, "dot");
        assert_eq!(n, self.vector_len(b, "dot"), "dot: length mismatch");
        let value: f64 = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .sum();
        self.push(Shape::Vector(1), vec![value], Op::Dot(a, b))
    }

    pub fn pick(&mut self, a: Var, index: usize) -> Var {
        let n = self.vector_len(a, "pick");
        assert!(index < n, "pick: index {index} out of bounds ({n})");
        let value = self.nodes[a.0].value[index];
        self.push(Shape::Vector(1), vec![value], Op::Pick(a, index))
    }

    pub fn stack_scalars(&mut self, scalars: &[Var]) -> Var {
        assert!(!scalars.is_empty(), "stack_scalars: empty list");
        let mut value = Vec::with_capacity(scalars.len());
        for &s in scalars {
            assert_eq!(self.shape(s), Shape::Vector(1), "stack_scalars: non-scalar entry");
            value.push(self.nodes[s.0].value[0]);
        }
        self.push(Shape::Vector(scalars.len()), value, Op::StackScalars(scalars.to_vec()))
    }

    pub fn sum_vec(&mut self, a: Var) -> Var {
        self.vector_len(a, "sum_vec");
        let value = self.nodes[a.0].value.iter().sum();
        self.push(Shape::Vector(1), vec![value], Op::SumVec(a))
    }

    pub fn l2_norm(&mut self, a: Var) -> Var {
        self.vector_len(a, "l2_norm");
        let value = self.nodes[a.0].value.iter().map(|x| x * x).sum::<f64>().sqrt();
        self.push(Shape::Vector(1), vec![value], Op::L2Norm(a))
    }

    /// Mean binary cross entropy of `sigmoid(logits)` against fixed targets.
    pub fn bce_logits_mean(&mut self, logits: Var, targets: &[f64]) -> Var {
        let n = self.vector_len(logits, "bce_logits_mean");
        assert_eq!(n, targets.len(), "bce_logits_mean: target length mismatch");
        let value = self.nodes[logits.0]
            .value
            .iter()
            .zip(targets)
            .map(|(&s, &y)| stable_softplus(s) - y * s)
            .sum::<f64>()
            / n as f64;
        self.push(
            Shape::Vector(1),
            vec![value],
            Op::BceLogitsMean { logits, targets: targets.to_vec() },
        )
    }

    /// `lambda * sum(theta^2)` over the named parameters.
    pub fn l2_penalty(&mut self, store: &ParameterStore, names: &[String], lambda: f64) -> Var {
        let value = lambda
            * names
                .iter()
                .map(|n| store.value(n).data().iter().map(|x| x * x).sum::<f64>())
                .sum::<f64>();
        self.push(Shape::Vector(1), vec![value], Op::L2Penalty { names: names.to_vec(), lambda })
    }

    // ----- backward -----

    /// Propagates `d loss / d node` back through the tape and accumulates
    /// parameter gradients into the store. `loss` must be scalar.
    pub fn backward(&self, loss: Var, store: &mut ParameterStore) {
        assert_eq!(
            self.nodes[loss.0].shape,
            Shape::Vector(1),
            "backward: loss must be a scalar node"
        );
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Const => {}
                Op::LeafWhole { name } => {
                    let grad = &mut store.get_mut(name).grad;
                    for (acc, x) in grad.data_mut().iter_mut().zip(&g) {
                        *acc += x;
                    }
                }
                Op::LeafRow { name, row } => {
                    let grad = &mut store.get_mut(name).grad;
                    for (acc, x) in grad.row_mut(*row).iter_mut().zip(&g) {
                        *acc += x;
                    }
                }
                Op::LeafRows { name, rows } => {
                    let grad = &mut store.get_mut(name).grad;
                    let c = grad.cols();
                    for (i, &row) in rows.iter().enumerate() {
                        for (acc, x) in grad.row_mut(row).iter_mut().zip(&g[i * c..(i + 1) * c]) {
                            *acc += x;
                        }
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g, node.shape.len());
                    accumulate(&mut grads, *b, &g, node.shape.len());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g, node.shape.len());
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    accumulate(&mut grads, *b, &neg, node.shape.len());
                }
                Op::Scale(a, c) => {
                    let scaled: Vec<f64> = g.iter().map(|x| x * c).collect();
                    accumulate(&mut grads, *a, &scaled, node.shape.len());
                }
                Op::AddN(terms) => {
                    for &t in terms {
                        accumulate(&mut grads, t, &g, node.shape.len());
                    }
                }
                Op::MulElem(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let ga: Vec<f64> = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                    let gb: Vec<f64> = g.iter().zip(av).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads, *a, &ga, ga.len());
                    accumulate(&mut grads, *b, &gb, gb.len());
                }
                Op::MulScalarVec { s, v } => {
                    let sv = self.nodes[s.0].value[0];
                    let vv = &self.nodes[v.0].value;
                    let gs = [g.iter().zip(vv).map(|(x, y)| x * y).sum::<f64>()];
                    let gv: Vec<f64> = g.iter().map(|x| x * sv).collect();
                    accumulate(&mut grads, *s, &gs, 1);
                    accumulate(&mut grads, *v, &gv, gv.len());
                }
                Op::MatVec { w, x } | Op::Affine { w, x, b: _ } => {
                    let (r, c) = match self.nodes[w.0].shape {
                        Shape::Matrix(r, c) => (r, c),
                        _ => unreachable!(),
                    };
                    let wv = &self.nodes[w.0].value;
                    let xv = &self.nodes[x.0].value;
                    let mut gw = vec![0.0; r * c];
                    let mut gx = vec![0.0; c];
                    for i in 0..r {
                        let gi = g[i];
                        for j in 0..c {
                            gw[i * c + j] += gi * xv[j];
                            gx[j] += gi * wv[i * c + j];
                        }
                    }
                    accumulate(&mut grads, *w, &gw, r * c);
                    accumulate(&mut grads, *x, &gx, c);
                    if let Op::Affine { b, .. } = &node.op {
                        accumulate(&mut grads, *b, &g, r);
                    }
                }
                Op::Concat(a, b) => {
                    let n = self.nodes[a.0].shape.len();
                    accumulate(&mut grads, *a, &g[..n], n);
                    accumulate(&mut grads, *b, &g[n..], g.len() - n);
                }
                Op::Tanh(a) => {
                    let ga: Vec<f64> =
                        g.iter().zip(&node.value).map(|(x, y)| x * (1.0 - y * y)).collect();
                    accumulate(&mut grads, *a, &ga, ga.len());
                }
                Op::Sigmoid(a) => {
                    let ga: Vec<f64> =
                        g.iter().zip(&node.value).map(|(x, y)| x * y * (1.0 - y)).collect();
                    accumulate(&mut grads, *a, &ga, ga.len());
                }
                Op::LeakyRelu(a, slope) => {
                    let inputs = &self.nodes[a.0].value;
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(inputs)
                        .map(|(x, &inp)| if inp >= 0.0 { *x } else { x * slope })
                        .collect();
                    accumulate(&mut grads, *a, &ga, ga.len());
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let gy_dot: f64 = g.iter().zip(y).map(|(x, v)| x * v).sum();
                    let ga: Vec<f64> = g.iter().zip(y).map(|(x, v)| v * (x - gy_dot)).collect();
                    accumulate(&mut grads, *a, &ga, ga.len());
                }
                Op::LogSoftmax(a) => {
                    let gsum: f64 = g.iter().sum();
                    let ga: Vec<f64> =
                        g.iter().zip(&node.value).map(|(x, ls)| x - ls.exp() * gsum).collect();
                    accumulate(&mut grads, *a, &ga, ga.len());
                }
                Op::MeanStack(inner) => {
                    // inner holds the pre-division sum node; divide upstream
                    // gradient by the term count baked into the values.
                    let sum_node = inner[0];
                    let k = match &self.nodes[sum_node.0].op {
                        Op::AddN(terms) => terms.len() as f64,
                        _ => unreachable!("mean_stack wraps add_n"),
                    };
                    let ga: Vec<f64> = g.iter().map(|x| x / k).collect();
                    accumulate(&mut grads, sum_node, &ga, ga.len());
                }
                Op::Dot(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let ga: Vec<f64> = bv.iter().map(|x| x * g[0]).collect();
                    let gb: Vec<f64> = av.iter().map(|x| x * g[0]).collect();
                    accumulate(&mut grads, *a, &ga, ga.len());
                    accumulate(&mut grads, *b, &gb, gb.len());
                }
                Op::Pick(a, index) => {
                    let n = self.nodes[a.0].shape.len();
                    let mut ga = vec![0.0; n];
                    ga[*index] = g[0];
                    accumulate(&mut grads, *a, &ga, n);
                }
                Op::StackScalars(scalars) => {
                    for (i, &s) in scalars.iter().enumerate() {
                        accumulate(&mut grads, s, &[g[i]], 1);
                    }
                }
                Op::SumVec(a) => {
                    let n = self.nodes[a.0].shape.len();
                    let ga = vec![g[0]; n];
                    accumulate(&mut grads, *a, &ga, n);
                }
                Op::L2Norm(a) => {
                    let norm = node.value[0];
                    let av = &self.nodes[a.0].value;
                    let ga: Vec<f64> = if norm > 1e-12 {
                        av.iter().map(|x| g[0] * x / norm).collect()
                    } else {
                        vec![0.0; av.len()]
                    };
                    accumulate(&mut grads, *a, &ga, ga.len());
                }
                Op::BceLogitsMean { logits, targets } => {
                    let n = targets.len() as f64;
                    let sv = &self.nodes[logits.0].value;
                    let ga: Vec<f64> = sv
                        .iter()
                        .zip(targets)
                        .map(|(&s, &y)| g[0] * (sigmoid_scalar(s) - y) / n)
                        .collect();
                    accumulate(&mut grads, *logits, &ga, ga.len());
                }
                Op::L2Penalty { names, lambda } => {
                    for name in names {
                        let param = store.get_mut(name);
                        let Param { value, grad, .. } = param;
                        for (gslot, &x) in grad.data_mut().iter_mut().zip(value.data()) {
                            *gslot += g[0] * 2.0 * lambda * x;
                        }
                    }
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], target: Var, g: &[f64], len: usize) {
    let slot = grads[target.0].get_or_insert_with(|| vec![0.0; len]);
    for (acc, x) in slot.iter_mut().zip(g) {
        *acc += x;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, dims: Vec<usize>, data: Vec<f64>) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert(name, Tensor::from_vec(dims, data));
        s
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(&[0.0, 0.0]);
        let y = tape.softmax(x);
        assert_eq!(tape.value(y), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_sums_to_one_on_random_inputs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let n = rng.gen_range(1..12);
            let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-30.0..30.0)).collect();
            let mut tape = Tape::new();
            let x = tape.constant(&xs);
            let y = tape.softmax(x);
            let sum: f64 = tape.value(y).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(tape.value(y).iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn elementwise_mul_matches_definition() {
        let mut tape = Tape::new();
        let a = tape.constant(&[1.0, 2.0]);
        let b = tape.constant(&[3.0, 4.0]);
        let y = tape.mul_elem(a, b);
        assert_eq!(tape.value(y), &[3.0, 8.0]);
    }

    #[test]
    fn leaky_relu_scales_negative_side() {
        let mut tape = Tape::new();
        let x = tape.constant(&[-1.0, 2.0]);
        let y = tape.leaky_relu(x, 0.2);
        assert_eq!(tape.value(y), &[-0.2, 2.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero_weight() {
        // loss = sigmoid(w . x) with w = 0 gives dL/dw = 0.25 * x.
        let mut store = store_with("w", vec![1, 3], vec![0.0, 0.0, 0.0]);
        let mut tape = Tape::new();
        let w = tape.param_row(&store, "w", 0);
        let x = tape.constant(&[1.0, -2.0, 0.5]);
        let s = tape.dot(w, x);
        let loss = tape.sigmoid(s);
        tape.backward(loss, &mut store);
        let g = store.grad("w").data();
        assert!((g[0] - 0.25).abs() < 1e-12);
        assert!((g[1] + 0.5).abs() < 1e-12);
        assert!((g[2] - 0.125).abs() < 1e-12);
    }

    #[test]
    fn tanh_gradient_at_zero_is_one() {
        let mut store = store_with("w", vec![1, 1], vec![0.0]);
        let mut tape = Tape::new();
        let w = tape.param_row(&store, "w", 0);
        let loss = tape.tanh(w);
        tape.backward(loss, &mut store);
        assert!((store.grad("w").data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        // Five parameters through affine, tanh, softmax, concat and dot.
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::from_vec(vec![2, 2], vec![0.3, -0.6, 0.9, 0.1]));
        store.insert("b", Tensor::from_vec(vec![2], vec![0.05, -0.2]));
        store.insert("u", Tensor::from_vec(vec![1, 4], vec![0.7, -0.3, 0.2, 0.4]));
        let err = grad_check(&mut store, &["w", "b", "u"], 1e-5, |store, tape| {
            let w = tape.param(store, "w");
            let b = tape.param(store, "b");
            let u = tape.param_row(store, "u", 0);
            let x = tape.constant(&[0.4, -1.2]);
            let h = tape.affine(w, x, b);
            let t = tape.tanh(h);
            let s = tape.softmax(t);
            let cat = tape.concat(t, s);
            let d = tape.dot(cat, u);
            tape.sigmoid(d)
        });
        assert!(err < 1e-3, "max relative error {err}");
    }

    #[test]
    fn gathered_rows_scatter_gradients_back() {
        let mut store = store_with("e", vec![4, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let mut tape = Tape::new();
        let rows = tape.param_rows(&store, "e", &[2, 0]);
        let q = tape.constant(&[1.0, 1.0]);
        let scores = tape.matvec(rows, q);
        let loss = tape.sum_vec(scores);
        tape.backward(loss, &mut store);
        let g = store.grad("e").data();
        assert_eq!(g, &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn l2_penalty_gradient_is_two_lambda_theta() {
        let mut store = store_with("w", vec![2], vec![1.5, -2.0]);
        let mut tape = Tape::new();
        let loss = tape.l2_penalty(&store, &["w".to_string()], 0.1);
        assert!((tape.scalar_value(loss) - 0.1 * (2.25 + 4.0)).abs() < 1e-12);
        tape.backward(loss, &mut store);
        let g = store.grad("w").data();
        assert!((g[0] - 0.3).abs() < 1e-12);
        assert!((g[1] + 0.4).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_and_pick_gradients_check_out() {
        let mut store = store_with("w", vec![1, 3], vec![0.2, -0.4, 0.9]);
        let err = grad_check(&mut store, &["w"], 1e-5, |store, tape| {
            let w = tape.param_row(store, "w", 0);
            let ls = tape.log_softmax(w);
            tape.pick(ls, 1)
        });
        assert!(err < 1e-3, "max relative error {err}");
    }

    #[test]
    fn bce_logits_matches_manual_expansion() {
        let mut tape = Tape::new();
        let s = tape.constant(&[0.0, 2.0]);
        let loss = tape.bce_logits_mean(s, &[1.0, 0.25]);
        let expected = ((2.0f64.ln()) + ((1.0 + (2.0f64).exp()).ln() - 0.5)) / 2.0;
        assert!((tape.scalar_value(loss) - expected).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "shape mismatch")]
    fn shape_mismatch_is_a_contract_violation() {
        let mut tape = Tape::new();
        let a = tape.constant(&[1.0, 2.0]);
        let b = tape.constant(&[1.0, 2.0, 3.0]);
        tape.add(a, b);
    }
}
