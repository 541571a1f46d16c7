use std::cell::{Ref, RefCell};

use super::tensor::{matmul_a_bt, matmul_at_b, matmul_raw};
use super::{AdError, Tensor};

/// Lower clamp applied to predicted probabilities inside [`Var::bce_loss`].
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add,
    Mul,
    MatMul,
    Relu,
    Sigmoid,
    Sin,
    Cos,
    Mean,
    Concat { axis: usize, extents: Vec<usize> },
    Affine { scale: f64 },
    Reshape,
    Bce { labels: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::MatMul => "matmul",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Sin => "sin",
            Op::Cos => "cos",
            Op::Mean => "mean",
            Op::Concat { .. } => "concat",
            Op::Affine { .. } => "affine_scale_shift",
            Op::Reshape => "reshape",
            Op::Bce { .. } => "bce_loss",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    parents: Vec<usize>,
    value: Tensor,
}

/// Append-only record of a forward computation.
///
/// Parents always precede their children, so a single reverse sweep over the
/// node list is a valid topological order for the backward pass. A tape is
/// built fresh for every forward pass and dropped afterwards.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an input. Gradients can be requested for any leaf; constants
    /// are leaves whose gradient the caller simply ignores.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, Vec::new(), value)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.leaf(Tensor::scalar(value))
    }

    fn push(&self, op: Op, parents: Vec<usize>, value: Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        debug_assert!(parents.iter().all(|&p| p < id));
        nodes.push(Node { op, parents, value });
        Var { tape: self, id }
    }

    fn checked(&self, op: Op, parents: Vec<usize>, value: Tensor) -> Result<Var<'_>, AdError> {
        if !value.is_finite() {
            return Err(AdError::NonFinite { op: op.name() });
        }
        Ok(self.push(op, parents, value))
    }

    fn owns(&self, v: &Var<'_>) -> bool {
        std::ptr::eq(self, v.tape)
    }

    /// Concatenates along `axis`. One-dimensional inputs only support axis 0;
    /// matrices join rows (axis 0) or columns (axis 1).
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>, AdError> {
        let first = parts.first().ok_or(AdError::Empty { op: "concat" })?;
        for p in parts {
            if !self.owns(p) {
                return Err(AdError::ForeignNode);
            }
        }
        let nodes = self.nodes.borrow();
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| nodes[p.id].value.shape().to_vec()).collect();
        let rank = shapes[0].len();
        let mismatch = |s: &Vec<usize>| AdError::ShapeMismatch {
            op: "concat",
            lhs: shapes[0].clone(),
            rhs: s.clone(),
        };
        let (value, extents) = match (rank, axis) {
            (1, 0) => {
                let mut data = Vec::new();
                let mut extents = Vec::new();
                for (p, s) in parts.iter().zip(&shapes) {
                    if s.len() != 1 {
                        return Err(mismatch(s));
                    }
                    data.extend_from_slice(nodes[p.id].value.data());
                    extents.push(s[0]);
                }
                (Tensor::vector(data), extents)
            }
            (2, 0) => {
                let cols = shapes[0][1];
                let mut data = Vec::new();
                let mut extents = Vec::new();
                for (p, s) in parts.iter().zip(&shapes) {
                    if s.len() != 2 || s[1] != cols {
                        return Err(mismatch(s));
                    }
                    data.extend_from_slice(nodes[p.id].value.data());
                    extents.push(s[0]);
                }
                let rows = extents.iter().sum();
                (Tensor::matrix(rows, cols, data)?, extents)
            }
            (2, 1) => {
                let rows = shapes[0][0];
                let mut extents = Vec::new();
                for s in &shapes {
                    if s.len() != 2 || s[0] != rows {
                        return Err(mismatch(s));
                    }
                    extents.push(s[1]);
                }
                let cols: usize = extents.iter().sum();
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for (p, &w) in parts.iter().zip(&extents) {
                        let d = nodes[p.id].value.data();
                        data.extend_from_slice(&d[r * w..(r + 1) * w]);
                    }
                }
                (Tensor::matrix(rows, cols, data)?, extents)
            }
            _ => {
                return Err(AdError::ShapeMismatch {
                    op: "concat",
                    lhs: nodes[first.id].value.shape().to_vec(),
                    rhs: vec![axis],
                })
            }
        };
        drop(nodes);
        let parents = parts.iter().map(|p| p.id).collect();
        self.checked(Op::Concat { axis, extents }, parents, value)
    }

    /// Reverse sweep from a scalar root. The returned map covers every node
    /// on the tape up to and including `root`.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients, AdError> {
        if !self.owns(&root) {
            return Err(AdError::ForeignNode);
        }
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.id].value;
        if !root_value.is_scalar() {
            return Err(AdError::NotScalar {
                shape: root_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        grads[root.id] = Some(vec![1.0]);

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let contribs = local_backward(&nodes, node, &g);
            for (parent, delta) in node.parents.iter().zip(contribs) {
                match &mut grads[*parent] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                    slot @ None => *slot = Some(delta),
                }
            }
            grads[id] = Some(g);
        }

        let shapes = nodes[..=root.id].iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            tape: self as *const Tape as usize,
            grads,
            shapes,
        })
    }
}

fn broadcast_sum(g: &[f64]) -> Vec<f64> {
    vec![g.iter().sum()]
}

/// Gradient contributions to each parent of `node` given its upstream gradient.
fn local_backward(nodes: &[Node], node: &Node, g: &[f64]) -> Vec<Vec<f64>> {
    let val = |i: usize| &nodes[node.parents[i]].value;
    match &node.op {
        Op::Leaf => Vec::new(),
        Op::Add => {
            let (a, b) = (val(0), val(1));
            let ga = if a.len() == g.len() {
                g.to_vec()
            } else {
                broadcast_sum(g)
            };
            let gb = if b.len() == g.len() {
                g.to_vec()
            } else {
                broadcast_sum(g)
            };
            vec![ga, gb]
        }
        Op::Mul => {
            let (a, b) = (val(0), val(1));
            let n = g.len();
            let at = |t: &Tensor, i: usize| if t.len() == n { t.data()[i] } else { t.data()[0] };
            let ga_full: Vec<f64> = (0..n).map(|i| g[i] * at(b, i)).collect();
            let gb_full: Vec<f64> = (0..n).map(|i| g[i] * at(a, i)).collect();
            let ga = if a.len() == n { ga_full } else { broadcast_sum(&ga_full) };
            let gb = if b.len() == n { gb_full } else { broadcast_sum(&gb_full) };
            vec![ga, gb]
        }
        Op::MatMul => {
            let (a, b) = (val(0), val(1));
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            // dA = G B^T, dB = A^T G
            let ga = matmul_a_bt(g, b.data(), m, n, k);
            let gb = matmul_at_b(a.data(), g, m, k, n);
            vec![ga, gb]
        }
        Op::Relu => {
            let x = val(0);
            vec![g
                .iter()
                .zip(x.data())
                .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                .collect()]
        }
        Op::Sigmoid => vec![g
            .iter()
            .zip(node.value.data())
            .map(|(gi, s)| gi * s * (1.0 - s))
            .collect()],
        Op::Sin => vec![g.iter().zip(val(0).data()).map(|(gi, x)| gi * x.cos()).collect()],
        Op::Cos => vec![g.iter().zip(val(0).data()).map(|(gi, x)| -gi * x.sin()).collect()],
        Op::Mean => {
            let n = val(0).len();
            vec![vec![g[0] / n as f64; n]]
        }
        Op::Concat { axis, extents } => {
            let mut out: Vec<Vec<f64>> = Vec::with_capacity(extents.len());
            if *axis == 0 {
                let per_unit = if node.value.shape().len() == 2 {
                    node.value.cols()
                } else {
                    1
                };
                let mut off = 0;
                for &e in extents {
                    let len = e * per_unit;
                    out.push(g[off..off + len].to_vec());
                    off += len;
                }
            } else {
                let rows = node.value.rows();
                let cols = node.value.cols();
                let mut col_off = 0;
                for &w in extents {
                    let mut part = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        part.extend_from_slice(&g[r * cols + col_off..r * cols + col_off + w]);
                    }
                    out.push(part);
                    col_off += w;
                }
            }
            out
        }
        Op::Affine { scale } => vec![g.iter().map(|gi| gi * scale).collect()],
        Op::Reshape => vec![g.to_vec()],
        Op::Bce { labels } => {
            let p = val(0);
            let n = labels.len() as f64;
            vec![p
                .data()
                .iter()
                .zip(labels)
                .map(|(&pi, &y)| {
                    if pi <= PROB_EPS || pi >= 1.0 - PROB_EPS {
                        0.0
                    } else {
                        g[0] * (-y / pi + (1.0 - y) / (1.0 - pi)) / n
                    }
                })
                .collect()]
        }
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: usize,
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`; zeros when `var` does not
    /// influence the root.
    pub fn wrt(&self, var: Var<'_>) -> Result<Tensor, AdError> {
        if var.tape as *const Tape as usize != self.tape || var.id >= self.shapes.len() {
            return Err(AdError::ForeignNode);
        }
        let shape = self.shapes[var.id].clone();
        let data = match &self.grads[var.id] {
            Some(g) => g.clone(),
            None => vec![0.0; shape.iter().product()],
        };
        Tensor::new(shape, data)
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<(), AdError> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(AdError::ForeignNode)
        }
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Result<Var<'t>, AdError> {
        let value = self.value().map(f);
        self.tape.checked(op, vec![self.id], value)
    }

    fn elementwise(&self, other: Var<'t>, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>, AdError> {
        self.same_tape(&other)?;
        let value = {
            let a = self.value();
            let b = other.value();
            if a.shape() == b.shape() {
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::new(a.shape().to_vec(), data)?
            } else if b.len() == 1 {
                let y = b.data()[0];
                a.map(|x| f(x, y))
            } else if a.len() == 1 {
                let x = a.data()[0];
                b.map(|y| f(x, y))
            } else {
                return Err(AdError::ShapeMismatch {
                    op: op.name(),
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
        };
        self.tape.checked(op, vec![self.id, other.id], value)
    }

    /// Elementwise sum; either side may be a one-element tensor.
    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>, AdError> {
        self.elementwise(other, Op::Add, |x, y| x + y)
    }

    /// Elementwise product; either side may be a one-element tensor.
    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>, AdError> {
        self.elementwise(other, Op::Mul, |x, y| x * y)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>, AdError> {
        self.add(other.affine(-1.0, 0.0)?)
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>, AdError> {
        self.same_tape(&other)?;
        let value = {
            let a = self.value();
            let b = other.value();
            if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
                return Err(AdError::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            Tensor::matrix(m, n, matmul_raw(a.data(), b.data(), m, k, n))?
        };
        self.tape.checked(Op::MatMul, vec![self.id, other.id], value)
    }

    pub fn relu(&self) -> Result<Var<'t>, AdError> {
        self.unary(Op::Relu, |x| x.max(0.0))
    }

    pub fn sigmoid(&self) -> Result<Var<'t>, AdError> {
        self.unary(Op::Sigmoid, sigmoid)
    }

    pub fn sin(&self) -> Result<Var<'t>, AdError> {
        self.unary(Op::Sin, f64::sin)
    }

    pub fn cos(&self) -> Result<Var<'t>, AdError> {
        self.unary(Op::Cos, f64::cos)
    }

    /// `2 * sigmoid(2x) - 1`, composed from primitives.
    pub fn tanh(&self) -> Result<Var<'t>, AdError> {
        self.affine(2.0, 0.0)?.sigmoid()?.affine(2.0, -1.0)
    }

    /// Mean over all elements, as a scalar.
    pub fn mean(&self) -> Result<Var<'t>, AdError> {
        let value = {
            let v = self.value();
            if v.is_empty() {
                return Err(AdError::Empty { op: "mean" });
            }
            Tensor::scalar(v.sum() / v.len() as f64)
        };
        self.tape.checked(Op::Mean, vec![self.id], value)
    }

    /// Sum over all elements, as `mean * n`.
    pub fn sum(&self) -> Result<Var<'t>, AdError> {
        let n = self.value().len() as f64;
        self.mean()?.affine(n, 0.0)
    }

    /// `x * scale + shift`.
    pub fn affine(&self, scale: f64, shift: f64) -> Result<Var<'t>, AdError> {
        self.unary(Op::Affine { scale }, |x| x * scale + shift)
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var<'t>, AdError> {
        let value = self.value().clone().reshaped(shape)?;
        self.tape.checked(Op::Reshape, vec![self.id], value)
    }

    /// Mean binary cross-entropy of probabilities `self` against `labels`.
    ///
    /// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]`; clamped
    /// entries pass no gradient.
    pub fn bce_loss(&self, labels: &Tensor) -> Result<Var<'t>, AdError> {
        let value = {
            let p = self.value();
            if p.len() != labels.len() || p.is_empty() {
                return Err(AdError::ShapeMismatch {
                    op: "bce_loss",
                    lhs: p.shape().to_vec(),
                    rhs: labels.shape().to_vec(),
                });
            }
            if let Some(&bad) = labels.data().iter().find(|&&y| y != 0.0 && y != 1.0) {
                return Err(AdError::InvalidLabel(bad));
            }
            let total: f64 = p
                .data()
                .iter()
                .zip(labels.data())
                .map(|(&pi, &y)| bce_term(pi, y))
                .sum();
            Tensor::scalar(total / p.len() as f64)
        };
        self.tape.checked(
            Op::Bce {
                labels: labels.data().to_vec(),
            },
            vec![self.id],
            value,
        )
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-sample binary cross-entropy with the same clamping as [`Var::bce_loss`].
pub fn bce_term(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}
