//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node in creation order, so the
//! node list is already a topological order. [`Graph::backward`] walks it in
//! reverse, visiting each node exactly once; gradients of leaves that require
//! them accumulate across calls until [`Graph::zero_grad`].
//!
//! Model parameters live in a [`ParamStore`](crate::param::ParamStore) and are
//! copied into a graph with [`Graph::param`]. A graph owns all of its buffers,
//! so independent graphs can be built on different threads against a shared,
//! read-only store.

pub(crate) mod kernels;
mod ops;

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    PRelu(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Ln(Var),
    Exp(Var),
    Sum(Var),
    ReduceAxis {
        x: Var,
        axis: usize,
        scale: f64,
    },
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad_left: usize,
    },
    ConvTranspose1d {
        x: Var,
        w: Var,
        stride: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Stack(Vec<Var>),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Pad {
        x: Var,
        axis: usize,
        before: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        axis: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LogSoftmax(Var),
    Segment {
        x: Var,
        chunk: usize,
        hop: usize,
    },
    OverlapAdd {
        x: Var,
        hop: usize,
        coverage: Vec<f64>,
    },
    /// `c' = f * c + i * g`; `acts` caches `[i | f | g]` per row.
    LstmState {
        gates: Var,
        c: Var,
        acts: Vec<f64>,
    },
    /// `h' = o * tanh(c')`; `aux` caches `[o | tanh(c')]` per row.
    LstmOutput {
        gates: Var,
        state: Var,
        aux: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of a differentiable computation.
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: HashMap<usize, Vec<f64>>,
    bindings: Vec<(Var, ParamId)>,
    bound: HashMap<ParamId, Var>,
    grad_enabled: bool,
    check_finite: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: HashMap::new(),
            bindings: Vec::new(),
            bound: HashMap::new(),
            grad_enabled: true,
            check_finite: cfg!(debug_assertions),
        }
    }

    /// A graph whose parameters do not require gradients (inference).
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Enables or disables the NaN/Inf scan performed on every new node.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a parameter from `store`; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let requires_grad = self.grad_enabled && store.is_trainable(id);
        let v = self.push_leaf(store.value(id).clone(), requires_grad);
        self.bound.insert(id, v);
        self.bindings.push((v, id));
        v
    }

    pub(crate) fn bindings(&self) -> &[(Var, ParamId)] {
        &self.bindings
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.leaf_grads.get(&v.0).map(|g| {
            Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).expect("grad shape")
        })
    }

    pub(crate) fn grad_slice(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(&v.0).map(Vec::as_slice)
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, op_name: &'static str) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite(op_name));
        }
        let requires_grad = op_parents(&op).iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match self.leaf_grads.get_mut(&i) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        self.leaf_grads.insert(i, g);
                    }
                }
                continue;
            }
            ops::backward_node(&self.nodes, i, &g, &mut adj);
        }
        Ok(())
    }
}

pub(crate) fn op_parents(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::PRelu(a, b) => {
            vec![*a, *b]
        }
        Op::Neg(x)
        | Op::Scale(x, _)
        | Op::AddScalar(x)
        | Op::Relu(x)
        | Op::LeakyRelu(x, _)
        | Op::Sigmoid(x)
        | Op::Tanh(x)
        | Op::Ln(x)
        | Op::Exp(x)
        | Op::Sum(x)
        | Op::Reshape(x)
        | Op::Permute(x, _)
        | Op::LogSoftmax(x) => vec![*x],
        Op::ReduceAxis { x, .. }
        | Op::Narrow { x, .. }
        | Op::Pad { x, .. }
        | Op::Segment { x, .. }
        | Op::OverlapAdd { x, .. } => vec![*x],
        Op::LstmState { gates, c, .. } => vec![*gates, *c],
        Op::LstmOutput { gates, state, .. } => vec![*gates, *state],
        Op::MatMul { a, b, .. } => vec![*a, *b],
        Op::Conv1d { x, w, b, .. } => {
            let mut v = vec![*x, *w];
            v.extend(b);
            v
        }
        Op::ConvTranspose1d { x, w, .. } => vec![*x, *w],
        Op::Concat { inputs, .. } | Op::Stack(inputs) => inputs.clone(),
        Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
    }
}
