//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation eagerly: each call computes the
//! forward value immediately and appends a node. [`Graph::backward`] walks
//! the nodes in reverse insertion order, which is a valid topological order
//! because inputs always precede the nodes that use them.
//!
//! Leaf gradients accumulate across `backward` calls; intermediate
//! gradients are scratch buffers local to one call.
//!
//! Custom-gradient nodes ([`Graph::custom_grad`]) keep the forward value of
//! a wrapped unary node but replace its backward rule with a caller-supplied
//! transform of the upstream gradient.

mod fd;
mod ops;

pub use fd::{finite_difference_check, FdOptions, FdReport, ParamReport};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Maps the upstream gradient of a custom node to the gradient of its input.
pub type GradTransform = Box<dyn Fn(&Tensor) -> Tensor>;

pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`.
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `[r,c] + [c]` broadcast over rows.
    AddRow(Var, Var),
    /// `[r,c] * [c]`: right-multiplication by a diagonal matrix.
    MulRow(Var, Var),
    /// `[r,c] * [r]`: left-multiplication by a diagonal matrix.
    MulCol(Var, Var),
    /// Tensor times a one-element node.
    ScaleBy(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    Square(Var),
    Softmax(Var),
    Sigmoid(Var),
    Gelu(Var),
    Clamp(Var, f64, f64),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, rstd: Vec<f64> },
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Custom { input: Var, transform: GradTransform },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::MulCol(..) => "mul_col",
            Op::ScaleBy(..) => "scale_by",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Mse(..) => "mse",
            Op::Square(..) => "square",
            Op::Softmax(..) => "softmax",
            Op::Sigmoid(..) => "sigmoid",
            Op::Gelu(..) => "gelu",
            Op::Clamp(..) => "clamp",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Transpose(..) => "transpose",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::Custom { .. } => "custom",
        }
    }

    /// Single input of a unary op, if it is one.
    fn unary_input(&self) -> Option<Var> {
        match *self {
            Op::Scale(a, _)
            | Op::AddConst(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Square(a)
            | Op::Softmax(a)
            | Op::Sigmoid(a)
            | Op::Gelu(a)
            | Op::Clamp(a, _, _)
            | Op::Transpose(a)
            | Op::SliceCols(a, _)
            | Op::SliceRows(a, _) => Some(a),
            Op::Custom { input, .. } => Some(input),
            _ => None,
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Option<Tensor>,
}

#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    /// Smallest distance of any clamp input to a clamp bound seen so far.
    kink_distance: f64,
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), kink_distance: f64::INFINITY }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_kind(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.kind()
    }

    /// Smallest observed distance between a clamp input and a clamp bound.
    pub fn kink_distance(&self) -> f64 {
        self.kink_distance
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn note_kink(&mut self, d: f64) {
        if d < self.kink_distance {
            self.kink_distance = d;
        }
    }

    /// Wrap a unary node so that backward applies `transform` to the
    /// upstream gradient in place of the node's analytic rule.
    pub fn custom_grad(&mut self, node: Var, transform: GradTransform) -> Result<Var> {
        let input = self.nodes[node.0].op.unary_input().ok_or(Error::NotUnary)?;
        let value = self.nodes[node.0].value.clone();
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(value, Op::Custom { input, transform }, rg))
    }

    /// Back-propagate from a one-element root, accumulating into leaf grads.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let shape = self.nodes[root.0].value.shape().to_vec();
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::NonScalarRoot(shape));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(&shape, 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            ops::backward_node(self, i, &g, &mut grads)?;
        }
        Ok(())
    }
}

/// Add `g` into the scratch gradient for `v`, skipping constants.
pub(crate) fn accumulate(graph: &Graph, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    if !graph.nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
