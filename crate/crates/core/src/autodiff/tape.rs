//! Recording tape and reverse-mode differentiation.

use std::cell::{Ref, RefCell};
use std::fmt;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::op::{self, Op};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Clone)]
pub struct Node<T> {
    pub op: Op,
    pub parents: Vec<NodeId>,
    pub value: Tensor<T>,
    pub requires_grad: bool,
}

/// Append-only record of a computation. Parents always precede children.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a specific tape.
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: NodeId,
}

impl<T> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({})", self.id.0)
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var { tape: self, id: NodeId(nodes.len() - 1) }
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Node { op: Op::Leaf { requires_grad: true }, parents: vec![], value, requires_grad: true })
    }

    /// A fixed input that receives no gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Node { op: Op::Leaf { requires_grad: false }, parents: vec![], value, requires_grad: false })
    }

    pub fn var(&self, id: NodeId) -> Result<Var<'_, T>> {
        if id.0 < self.len() {
            Ok(Var { tape: self, id })
        } else {
            Err(Error::State(format!("node {} is not on the tape", id.0)))
        }
    }

    pub fn node(&self, id: NodeId) -> Ref<'_, Node<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id.0])
    }

    pub fn value(&self, id: NodeId) -> Tensor<T> {
        self.nodes.borrow()[id.0].value.clone()
    }

    /// Records `op` applied to `inputs`.
    pub fn apply(&self, op: Op, inputs: &[Var<'_, T>]) -> Result<Var<'_, T>> {
        for v in inputs {
            if !std::ptr::eq(v.tape, self) {
                return Err(Error::State(format!("{} input belongs to a different tape", op.name())));
            }
        }
        let (value, requires_grad) = {
            let nodes = self.nodes.borrow();
            let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| &nodes[v.id.0].value).collect();
            let value = op::forward(&op, &vals)?;
            (value, inputs.iter().any(|v| nodes[v.id.0].requires_grad))
        };
        Ok(self.push(Node { op, parents: inputs.iter().map(|v| v.id).collect(), value, requires_grad }))
    }

    /// Reverse-mode pass from a scalar root, visiting nodes in reverse tape
    /// order.
    pub fn backward(&self, root: Var<'_, T>) -> Result<Gradients<T>> {
        if !std::ptr::eq(root.tape, self) {
            return Err(Error::State("root belongs to a different tape".into()));
        }
        self.backward_id(root.id)
    }

    pub fn backward_id(&self, root: NodeId) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes.is_empty() || root.0 >= nodes.len() {
            return Err(Error::State(format!("backward from node {} before it was recorded", root.0)));
        }
        let rv = &nodes[root.0].value;
        if rv.numel() != 1 {
            return Err(Error::Usage(format!("backward root must be a scalar, got dims {:?}", rv.dims())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(rv.dims().to_vec(), T::one()));
        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            if node.parents.is_empty() || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let inputs: Vec<&Tensor<T>> = node.parents.iter().map(|p| &nodes[p.0].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|p| nodes[p.0].requires_grad).collect();
            let pg = op::backward(&node.op, &inputs, &node.value, &g, &needs)?;
            for (p, gp) in node.parents.iter().zip(pg) {
                let Some(gp) = gp else { continue };
                match &mut grads[p.0] {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(gp.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(gp),
                }
            }
        }
        let mut out = Vec::with_capacity(nodes.len());
        for (i, node) in nodes.iter().enumerate() {
            let is_leaf = matches!(node.op, Op::Leaf { requires_grad: true });
            let g = grads.get_mut(i).and_then(Option::take);
            out.push(if is_leaf { Some(g.unwrap_or_else(|| Tensor::zeros(node.value.dims().to_vec()))) } else { None });
        }
        Ok(Gradients { grads: out })
    }

    /// Recomputes every recorded node from its parents and checks the result
    /// is bit-identical to the stored value.
    pub fn replay(&self) -> Result<()> {
        let nodes = self.nodes.borrow();
        for (i, node) in nodes.iter().enumerate() {
            if node.parents.is_empty() {
                continue;
            }
            let inputs: Vec<&Tensor<T>> = node.parents.iter().map(|p| &nodes[p.0].value).collect();
            let again = op::forward(&node.op, &inputs)?;
            if !again.bit_eq(&node.value) {
                return Err(Error::State(format!("replay of node {i} ({}) diverged", node.op.name())));
            }
        }
        Ok(())
    }
}

/// Leaf gradients produced by `Tape::backward`.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of a differentiable leaf. Leaves that did not influence the
    /// root get zeros.
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.get_id(v.id)
    }

    pub fn get_id(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(v.id.0).and_then(Option::take)
    }
}

impl<'t, T: Element> Var<'t, T> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.value(self.id)
    }

    pub fn dims(&self) -> Vec<usize> {
        self.tape.node(self.id).value.dims().to_vec()
    }

    pub fn rank(&self) -> usize {
        self.tape.node(self.id).value.rank()
    }

    fn un(self, op: Op) -> Result<Self> {
        self.tape.apply(op, &[self])
    }

    fn bin(self, op: Op, other: Self) -> Result<Self> {
        self.tape.apply(op, &[self, other])
    }

    pub fn add(self, o: Self) -> Result<Self> {
        self.bin(Op::Add, o)
    }

    pub fn sub(self, o: Self) -> Result<Self> {
        self.bin(Op::Sub, o)
    }

    pub fn mul(self, o: Self) -> Result<Self> {
        self.bin(Op::Mul, o)
    }

    pub fn div(self, o: Self) -> Result<Self> {
        self.bin(Op::Div, o)
    }

    pub fn neg(self) -> Result<Self> {
        self.un(Op::Neg)
    }

    pub fn exp(self) -> Result<Self> {
        self.un(Op::Exp)
    }

    pub fn ln(self) -> Result<Self> {
        self.un(Op::Log)
    }

    pub fn recip(self) -> Result<Self> {
        self.un(Op::Reciprocal)
    }

    pub fn sqrt(self) -> Result<Self> {
        self.un(Op::Sqrt)
    }

    pub fn gelu(self) -> Result<Self> {
        self.un(Op::Gelu)
    }

    pub fn scale(self, s: f64) -> Result<Self> {
        self.un(Op::Scale(s))
    }

    pub fn add_scalar(self, s: f64) -> Result<Self> {
        self.un(Op::AddScalar(s))
    }

    pub fn matmul(self, o: Self) -> Result<Self> {
        self.matmul_t(o, false, false)
    }

    pub fn matmul_t(self, o: Self, trans_a: bool, trans_b: bool) -> Result<Self> {
        self.bin(Op::MatMul { trans_a, trans_b }, o)
    }

    pub fn sum(self, axes: &[usize], keep_dims: bool) -> Result<Self> {
        self.un(Op::Sum { axes: axes.to_vec(), keep_dims })
    }

    pub fn sum_all(self) -> Result<Self> {
        let axes: Vec<usize> = (0..self.rank()).collect();
        self.sum(&axes, false)
    }

    pub fn mean(self, axes: &[usize], keep_dims: bool) -> Result<Self> {
        self.un(Op::Mean { axes: axes.to_vec(), keep_dims })
    }

    pub fn mean_all(self) -> Result<Self> {
        let axes: Vec<usize> = (0..self.rank()).collect();
        self.mean(&axes, false)
    }

    pub fn broadcast_to(self, dims: &[usize]) -> Result<Self> {
        self.un(Op::BroadcastTo { dims: dims.to_vec() })
    }

    pub fn permute(self, perm: &[usize]) -> Result<Self> {
        self.un(Op::Permute { perm: perm.to_vec() })
    }

    /// Swaps the last two axes.
    pub fn t(self) -> Result<Self> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::shape("transpose", format!("rank {r} input")));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    pub fn reshape(self, dims: &[usize]) -> Result<Self> {
        self.un(Op::Reshape { dims: dims.to_vec() })
    }

    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Self> {
        self.un(Op::Slice { axis, start, len })
    }

    pub fn pad(self, axis: usize, before: usize, after: usize, value: f64) -> Result<Self> {
        if before == 0 && after == 0 {
            return Ok(self);
        }
        self.un(Op::Pad { axis, before, after, value })
    }

    pub fn concat(parts: &[Self], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Usage("concat of no tensors".into()))?;
        first.tape.apply(Op::Concat { axis }, parts)
    }

    pub fn roll(self, axis: usize, shift: isize) -> Result<Self> {
        self.un(Op::Roll { axis, shift })
    }

    pub fn conv2d(
        self,
        weight: Self,
        bias: Option<Self>,
        stride: (usize, usize),
        padding: (usize, usize),
        groups: usize,
    ) -> Result<Self> {
        let op = Op::Conv2d { stride, padding, groups };
        match bias {
            Some(b) => self.tape.apply(op, &[self, weight, b]),
            None => self.tape.apply(op, &[self, weight]),
        }
    }

    pub fn avg_pool2d(self, kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        self.un(Op::AvgPool2d { kernel, stride, padding })
    }

    /// Normalizes over the last axis.
    pub fn layer_norm(self, gamma: Self, beta: Self, eps: f64) -> Result<Self> {
        self.tape.apply(Op::LayerNorm { eps }, &[self, gamma, beta])
    }

    pub fn softmax(self) -> Result<Self> {
        self.un(Op::Softmax)
    }

    pub fn log_softmax(self) -> Result<Self> {
        self.un(Op::LogSoftmax)
    }
}
