use std::borrow::Cow;

use super::kernels;
use super::Tensor;
use crate::error::{BtiError, Result};
use crate::scalar::{dot_wide, sum_wide, Scalar};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Input,
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    Softmax { x: Var, key_mask: Option<Vec<bool>> },
    LayerNorm { x: Var, eps: f64 },
    MeanRows { x: Var, start: usize, end: usize },
    SliceRows { x: Var, start: usize, end: usize },
    SliceCols { x: Var, start: usize, end: usize },
    ConcatCols(Vec<Var>),
    Sum(Var),
    Dot(Var, Var),
    L2Norm(Var),
    DivScalar(Var, Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::MeanRows { .. } => "mean_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::Sum(..) => "sum",
            Op::Dot(..) => "dot",
            Op::L2Norm(..) => "l2_norm",
            Op::DivScalar(..) => "div_scalar",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Constant => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::Dot(a, b)
            | Op::DivScalar(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Gelu(a)
            | Op::Sum(a)
            | Op::L2Norm(a) => vec![*a],
            Op::Softmax { x, .. }
            | Op::LayerNorm { x, .. }
            | Op::MeanRows { x, .. }
            | Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. } => vec![*x],
            Op::ConcatCols(parts) => parts.clone(),
        }
    }
}

struct Node<'a, T: Scalar> {
    op: Op<T>,
    value: Cow<'a, Tensor<T>>,
    requires_grad: bool,
}

/// A recorded computation. Operations are evaluated eagerly as they are
/// added and every intermediate value is retained for the backward pass.
///
/// Constants may borrow their tensors (typically encoder weights) for the
/// lifetime `'a`; nothing on the graph is ever mutated in place.
pub struct Graph<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar output with respect to every node that requires one.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn shape_err<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> BtiError {
    BtiError::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn require_matrix<T: Scalar>(op: &'static str, a: &Tensor<T>) -> Result<(usize, usize)> {
    if a.shape().len() != 2 {
        return Err(BtiError::Shape {
            op,
            left: a.shape().to_vec(),
            right: vec![],
        });
    }
    Ok((a.shape()[0], a.shape()[1]))
}

fn compute_ref<'t, T: Scalar>(
    op: &Op<T>,
    arg: &dyn Fn(Var) -> &'t Tensor<T>,
) -> Result<Tensor<T>> {
    let name = op.name();
    match op {
        Op::Input | Op::Constant => unreachable!("leaves carry their own values"),
        Op::MatMul(a, b) => {
            let (a, b) = (arg(*a), arg(*b));
            let (n, k) = require_matrix(name, a)?;
            let (k2, m) = require_matrix(name, b)?;
            if k != k2 {
                return Err(shape_err(name, a, b));
            }
            Tensor::matrix(n, m, kernels::matmul(a.data(), b.data(), n, k, m))
        }
        Op::Transpose(a) => {
            let a = arg(*a);
            let (r, c) = require_matrix(name, a)?;
            Tensor::matrix(c, r, kernels::transpose(a.data(), r, c))
        }
        Op::Add(a, b) => arg(*a).zip_map(arg(*b), name, |x, y| x + y),
        Op::Sub(a, b) => arg(*a).zip_map(arg(*b), name, |x, y| x - y),
        Op::Mul(a, b) => arg(*a).zip_map(arg(*b), name, |x, y| x * y),
        Op::AddRow(a, b) | Op::MulRow(a, b) => {
            let (a, b) = (arg(*a), arg(*b));
            let (_, c) = require_matrix(name, a)?;
            if b.shape() != [c] {
                return Err(shape_err(name, a, b));
            }
            let bias = b.data();
            let add = matches!(op, Op::AddRow(..));
            let data = a
                .data()
                .chunks(c)
                .flat_map(|row| {
                    row.iter()
                        .zip(bias)
                        .map(move |(&x, &y)| if add { x + y } else { x * y })
                })
                .collect();
            Tensor::new(a.shape().to_vec(), data)
        }
        Op::Scale(a, c) => Ok(arg(*a).scale(*c)),
        Op::Relu(a) => Ok(arg(*a).map(|x| if x > T::zero() { x } else { T::zero() })),
        Op::Gelu(a) => Ok(arg(*a).map(|x| T::from_f64_lossy(kernels::gelu(x.to_f64_lossy())))),
        Op::Softmax { x, key_mask } => {
            let x = arg(*x);
            let (r, c) = require_matrix(name, x)?;
            if let Some(mask) = key_mask {
                if mask.len() != c {
                    return Err(BtiError::Shape {
                        op: name,
                        left: x.shape().to_vec(),
                        right: vec![mask.len()],
                    });
                }
            }
            Tensor::matrix(r, c, kernels::softmax_rows(x.data(), r, c, key_mask.as_deref()))
        }
        Op::LayerNorm { x, eps } => {
            let x = arg(*x);
            let (r, c) = require_matrix(name, x)?;
            Tensor::matrix(r, c, kernels::layer_norm_rows(x.data(), r, c, *eps))
        }
        Op::MeanRows { x, start, end } => {
            let x = arg(*x);
            let (r, c) = require_matrix(name, x)?;
            if start >= end || *end > r {
                return Err(BtiError::Shape {
                    op: name,
                    left: x.shape().to_vec(),
                    right: vec![*start, *end],
                });
            }
            let count = (end - start) as f64;
            let mut acc = vec![0f64; c];
            for i in *start..*end {
                for (s, v) in acc.iter_mut().zip(x.row(i)) {
                    *s += v.to_f64_lossy();
                }
            }
            Ok(Tensor::vector(
                acc.into_iter().map(|s| T::from_f64_lossy(s / count)).collect(),
            ))
        }
        Op::SliceRows { x, start, end } => arg(*x).slice_rows(*start, *end),
        Op::SliceCols { x, start, end } => {
            let x = arg(*x);
            let (r, c) = require_matrix(name, x)?;
            if start > end || *end > c {
                return Err(BtiError::Shape {
                    op: name,
                    left: x.shape().to_vec(),
                    right: vec![*start, *end],
                });
            }
            let data = (0..r)
                .flat_map(|i| x.row(i)[*start..*end].iter().copied())
                .collect();
            Tensor::matrix(r, end - start, data)
        }
        Op::ConcatCols(parts) => {
            let first = arg(parts[0]);
            let (r, _) = require_matrix(name, first)?;
            let mut total = 0;
            for p in parts {
                let t = arg(*p);
                let (pr, pc) = require_matrix(name, t)?;
                if pr != r {
                    return Err(shape_err(name, first, t));
                }
                total += pc;
            }
            let mut data = Vec::with_capacity(r * total);
            for i in 0..r {
                for p in parts {
                    data.extend_from_slice(arg(*p).row(i));
                }
            }
            Tensor::matrix(r, total, data)
        }
        Op::Sum(a) => Ok(Tensor::scalar(T::from_f64_lossy(sum_wide(arg(*a).data())))),
        Op::Dot(a, b) => {
            let (a, b) = (arg(*a), arg(*b));
            if a.shape() != b.shape() {
                return Err(shape_err(name, a, b));
            }
            Ok(Tensor::scalar(T::from_f64_lossy(dot_wide(a.data(), b.data()))))
        }
        Op::L2Norm(a) => {
            let a = arg(*a);
            Ok(Tensor::scalar(T::from_f64_lossy(dot_wide(a.data(), a.data()).sqrt())))
        }
        Op::DivScalar(a, s) => {
            let (a, s) = (arg(*a), arg(*s));
            if !s.is_scalar() {
                return Err(shape_err(name, a, s));
            }
            let d = s.item();
            Ok(a.map(|x| x / d))
        }
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes.get(var.0).is_some_and(|n| n.requires_grad)
    }

    /// Adds a leaf whose value is supplied on every replay.
    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_leaf(Op::Input, Cow::Owned(value), requires_grad)
    }

    /// Adds a borrowed, non-differentiable leaf.
    pub fn constant(&mut self, value: &'a Tensor<T>) -> Var {
        self.push_leaf(Op::Constant, Cow::Borrowed(value), false)
    }

    pub fn constant_owned(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(Op::Constant, Cow::Owned(value), false)
    }

    fn push_leaf(&mut self, op: Op<T>, value: Cow<'a, Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op<T>) -> Result<Var> {
        let nodes = &self.nodes;
        let value = compute_ref(&op, &|v: Var| &*nodes[v.0].value)?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value: Cow::Owned(value),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    /// Adds a length-`cols` vector to every row of a matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.push(Op::AddRow(a, row))
    }

    /// Multiplies every row of a matrix elementwise by a length-`cols` vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.push(Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.push(Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Gelu(a))
    }

    /// Row-wise softmax; columns whose `key_mask` entry is `false` get zero weight.
    pub fn softmax(&mut self, x: Var, key_mask: Option<Vec<bool>>) -> Result<Var> {
        self.push(Op::Softmax { x, key_mask })
    }

    /// Row-wise normalization to zero mean and unit variance, without affine terms.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.push(Op::LayerNorm { x, eps })
    }

    /// Mean over rows `start..end`, producing a vector.
    pub fn mean_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.push(Op::MeanRows { x, start, end })
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.push(Op::SliceRows { x, start, end })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.push(Op::SliceCols { x, start, end })
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Result<Var> {
        if parts.is_empty() {
            return Err(BtiError::Shape {
                op: "concat_cols",
                left: vec![],
                right: vec![],
            });
        }
        self.push(Op::ConcatCols(parts))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Dot(a, b))
    }

    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        self.push(Op::L2Norm(a))
    }

    /// Divides every element of `a` by the rank-0 tensor `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        self.push(Op::DivScalar(a, s))
    }

    /// `⟨a, b⟩ / (‖a‖·‖b‖)` composed from primitives.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.dot(a, b)?;
        let na = self.l2_norm(a)?;
        let nb = self.l2_norm(b)?;
        let denom = self.mul(na, nb)?;
        self.div_scalar(d, denom)
    }

    /// Re-evaluates the recorded graph with new values for its inputs, in the
    /// order the inputs were created, and returns the value of `output`.
    pub fn evaluate(&self, inputs: &[Tensor<T>], output: Var) -> Result<Tensor<T>> {
        let expected = self
            .nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Input))
            .count();
        if inputs.len() != expected {
            return Err(BtiError::InputCount {
                expected,
                got: inputs.len(),
            });
        }
        let mut values: Vec<Cow<'_, Tensor<T>>> = Vec::with_capacity(output.0 + 1);
        let mut next_input = inputs.iter();
        for node in &self.nodes[..=output.0] {
            let v = match node.op {
                Op::Input => Cow::Borrowed(next_input.next().expect("counted above")),
                Op::Constant => Cow::Borrowed(&*node.value),
                _ => {
                    let vals = &values;
                    Cow::Owned(compute_ref(&node.op, &|v: Var| &*vals[v.0])?)
                }
            };
            values.push(v);
        }
        Ok(values.pop().expect("output in range").into_owned())
    }

    /// Reverse sweep from a scalar `output`. Every node flagged
    /// `requires_grad` receives a gradient (zero when unreachable).
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out = self.nodes.get(output.0).ok_or(BtiError::NotOnGraph(output.0))?;
        if out.value.len() != 1 {
            return Err(BtiError::NonScalarOutput(out.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::full(out.value.shape(), T::one()));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            for (var, contribution) in self.local_grads(&node.op, &node.value, &g)? {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                            *a += *c;
                        }
                    }
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[idx] = Some(g);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    /// `∂output/∂wrt` for a scalar `output`.
    pub fn gradient(&self, output: Var, wrt: Var) -> Result<Tensor<T>> {
        if !self.requires_grad(wrt) {
            return Err(BtiError::NotOnGraph(wrt.0));
        }
        let mut grads = self.backward(output)?;
        Ok(grads.take(wrt).expect("requires_grad nodes are populated"))
    }

    fn local_grads(&self, op: &Op<T>, out: &Tensor<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| self.value(v);
        let gd = g.data();
        Ok(match op {
            Op::Input | Op::Constant => vec![],
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (n, k) = (av.shape()[0], av.shape()[1]);
                let m = bv.shape()[1];
                vec![
                    (*a, Tensor::matrix(n, k, kernels::matmul_bt(gd, bv.data(), n, m, k))?),
                    (*b, Tensor::matrix(k, m, kernels::matmul_at(av.data(), gd, n, k, m))?),
                ]
            }
            Op::Transpose(a) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                vec![(*a, Tensor::matrix(c, r, kernels::transpose(gd, r, c))?)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-T::one()))],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(val(*b), "mul", |x, y| x * y)?),
                (*b, g.zip_map(val(*a), "mul", |x, y| x * y)?),
            ],
            Op::AddRow(a, b) => {
                let c = out.cols();
                let mut acc = vec![0f64; c];
                for row in gd.chunks(c) {
                    for (s, v) in acc.iter_mut().zip(row) {
                        *s += v.to_f64_lossy();
                    }
                }
                vec![
                    (*a, g.clone()),
                    (*b, Tensor::vector(acc.into_iter().map(T::from_f64_lossy).collect())),
                ]
            }
            Op::MulRow(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let c = out.cols();
                let mut acc = vec![0f64; c];
                let mut da = Vec::with_capacity(gd.len());
                for (grow, arow) in gd.chunks(c).zip(av.data().chunks(c)) {
                    for j in 0..c {
                        acc[j] += grow[j].to_f64_lossy() * arow[j].to_f64_lossy();
                        da.push(grow[j] * bv.data()[j]);
                    }
                }
                vec![
                    (*a, Tensor::new(av.shape().to_vec(), da)?),
                    (*b, Tensor::vector(acc.into_iter().map(T::from_f64_lossy).collect())),
                ]
            }
            Op::Scale(a, c) => vec![(*a, g.scale(*c))],
            Op::Relu(a) => vec![(
                *a,
                g.zip_map(val(*a), "relu", |gv, x| if x > T::zero() { gv } else { T::zero() })?,
            )],
            Op::Gelu(a) => vec![(
                *a,
                g.zip_map(val(*a), "gelu", |gv, x| {
                    gv * T::from_f64_lossy(kernels::gelu_derivative(x.to_f64_lossy()))
                })?,
            )],
            Op::Softmax { x, .. } => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                vec![(*x, Tensor::matrix(r, c, kernels::softmax_rows_backward(out.data(), gd, r, c))?)]
            }
            Op::LayerNorm { x, eps } => {
                let xv = val(*x);
                let (r, c) = (xv.shape()[0], xv.shape()[1]);
                vec![(
                    *x,
                    Tensor::matrix(r, c, kernels::layer_norm_rows_backward(xv.data(), gd, r, c, *eps))?,
                )]
            }
            Op::MeanRows { x, start, end } => {
                let xv = val(*x);
                let mut dx = Tensor::zeros(xv.shape());
                let c = xv.cols();
                let inv = T::one() / T::from_usize(end - start).expect("row count fits");
                for i in *start..*end {
                    for (d, &g) in dx.data_mut()[i * c..(i + 1) * c].iter_mut().zip(gd) {
                        *d = g * inv;
                    }
                }
                vec![(*x, dx)]
            }
            Op::SliceRows { x, start, .. } => {
                let xv = val(*x);
                let mut dx = Tensor::zeros(xv.shape());
                let c = xv.cols();
                dx.data_mut()[start * c..start * c + gd.len()].copy_from_slice(gd);
                vec![(*x, dx)]
            }
            Op::SliceCols { x, start, end } => {
                let xv = val(*x);
                let mut dx = Tensor::zeros(xv.shape());
                let (c, w) = (xv.cols(), end - start);
                for i in 0..xv.rows() {
                    dx.data_mut()[i * c + start..i * c + end].copy_from_slice(&gd[i * w..(i + 1) * w]);
                }
                vec![(*x, dx)]
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for p in parts {
                    let pv = val(*p);
                    let w = pv.cols();
                    let data = (0..pv.rows())
                        .flat_map(|i| gd[i * total + offset..i * total + offset + w].iter().copied())
                        .collect();
                    res.push((*p, Tensor::new(pv.shape().to_vec(), data)?));
                    offset += w;
                }
                res
            }
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
            Op::Dot(a, b) => vec![(*a, val(*b).scale(g.item())), (*b, val(*a).scale(g.item()))],
            Op::L2Norm(a) => {
                let n = out.item();
                let av = val(*a);
                if n == T::zero() {
                    vec![(*a, Tensor::zeros(av.shape()))]
                } else {
                    vec![(*a, av.scale(g.item() / n))]
                }
            }
            Op::DivScalar(a, s) => {
                let (av, sv) = (val(*a), val(*s).item());
                let ds = -dot_wide(gd, av.data()) / (sv.to_f64_lossy() * sv.to_f64_lossy());
                vec![
                    (*a, g.scale(T::one() / sv)),
                    (*s, Tensor::new(val(*s).shape().to_vec(), vec![T::from_f64_lossy(ds)])?),
                ]
            }
        })
    }
}
