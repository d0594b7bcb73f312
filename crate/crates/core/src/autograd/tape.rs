//! Operation tape and the reverse sweep.

use std::collections::HashMap;

use crate::error::{Result, SagError};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::nn_ops::{self, ConvGeom, ResizePlan};
use super::ops::{self, ReduceKind};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Operation families, used for instrumentation counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Relu,
    Scale,
    Reshape,
    Sum,
    Mean,
    Max,
    Conv2d,
    BatchNorm,
    MaxPool,
    Resize,
    SpatialSoftmax,
    L2Normalize,
    CrossEntropy,
    Linear,
    GlobalAvgPool,
}

pub(crate) enum Op<T> {
    Leaf,
    Param(ParamId),
    Binary {
        kind: ops::BinaryKind,
        a: Var,
        b: Var,
        /// Index into `b` for every element of the output; `None` when shapes match.
        b_index: Option<Vec<usize>>,
    },
    Relu(Var),
    Scale(Var, T),
    Reshape(Var),
    Reduce {
        kind: ReduceKind,
        a: Var,
        /// Output slot for every input element.
        out_index: Vec<usize>,
        /// Winning input position per output slot (max only).
        argmax: Vec<usize>,
        count: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Resize {
        x: Var,
        plan: ResizePlan,
    },
    SpatialSoftmax(Var),
    L2Normalize {
        x: Var,
        norms: Vec<T>,
        eps: T,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    GlobalAvgPool(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of leaf values created with [`Tape::leaf`].
#[derive(Debug, Default)]
pub struct Gradients<T> {
    grads: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }
}

/// Records a forward computation as a DAG in topological order; nodes are
/// appended after their parents, so a reverse index sweep is a valid
/// reverse topological order.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    counts: HashMap<OpKind, usize>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            counts: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.counts.clear();
    }

    /// How many times an operation family was recorded since the last clear.
    pub fn count(&self, kind: OpKind) -> usize {
        self.counts.get(&kind).copied().unwrap_or(0)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an input value; `requires_grad` leaves receive gradients in
    /// the [`Gradients`] returned by backward.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf bound to a store parameter. Repeated calls for the same id
    /// return the same node, so every use accumulates into one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// Parameter value recorded as a constant: no gradient flows to the store.
    pub fn frozen_param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.constant(store.value(id).clone())
    }

    pub(crate) fn push(&mut self, kind: OpKind, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        *self.counts.entry(kind).or_insert(0) += 1;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar loss. Gradients of plain leaves are
    /// returned; the tape is cleared afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        self.sweep(loss, None)
    }

    /// Reverse sweep that also accumulates (`+=`) parameter gradients into
    /// `store`. Callers zero the store between steps.
    pub fn backward_into(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        self.sweep(loss, Some(store))
    }

    fn sweep(&mut self, loss: Var, mut store: Option<&mut ParamStore<T>>) -> Result<Gradients<T>> {
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(SagError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(&shape, T::one()));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    out.grads.insert(Var(idx), g);
                }
                Op::Param(id) => {
                    if let Some(store) = store.as_deref_mut() {
                        store.get_mut(*id).grad.add_assign(&g)?;
                    }
                }
                op => self.backward_op(op, &node.value, g, &mut grads)?,
            }
        }
        self.clear();
        Ok(out)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_op(
        &self,
        op: &Op<T>,
        out: &Tensor<T>,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let mut acc = |v: Var, t: Tensor<T>| -> Result<()> {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        match op {
            Op::Leaf | Op::Param(_) => unreachable!("leaves handled by the sweep"),
            Op::Binary { kind, a, b, b_index } => {
                let (ga, gb) = ops::binary_backward(
                    *kind,
                    self.value(*a),
                    self.value(*b),
                    b_index.as_deref(),
                    &g,
                    self.wants(*a),
                    self.wants(*b),
                );
                if let Some(ga) = ga {
                    acc(*a, ga)?;
                }
                if let Some(gb) = gb {
                    acc(*b, gb)?;
                }
            }
            Op::Relu(a) => acc(*a, ops::relu_backward(self.value(*a), &g))?,
            Op::Scale(a, k) => {
                let k = *k;
                acc(*a, g.map(|v| v * k))?
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                acc(*a, Tensor::from_parts(shape, g.into_data()))?
            }
            Op::Reduce {
                kind,
                a,
                out_index,
                argmax,
                count,
            } => {
                let ga = ops::reduce_backward(*kind, self.value(*a), out_index, argmax, *count, &g);
                acc(*a, ga)?
            }
            Op::Conv2d { x, w, b, geom } => {
                let (gx, gw, gb) = nn_ops::conv2d_backward(
                    geom,
                    self.value(*x),
                    self.value(*w),
                    &g,
                    self.wants(*x),
                );
                if let Some(gx) = gx {
                    acc(*x, gx)?;
                }
                if self.wants(*w) {
                    acc(*w, gw)?;
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        acc(*b, gb)?;
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (gx, ggamma, gbeta) =
                    nn_ops::batch_norm_backward(self.value(*gamma), xhat, inv_std, *train, &g);
                if self.wants(*x) {
                    acc(*x, gx)?;
                }
                if self.wants(*gamma) {
                    acc(*gamma, ggamma)?;
                }
                if self.wants(*beta) {
                    acc(*beta, gbeta)?;
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = Tensor::zeros(self.shape(*x));
                let d = gx.data_mut();
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    d[src] += gv;
                }
                acc(*x, gx)?
            }
            Op::Resize { x, plan } => acc(*x, nn_ops::resize_backward(plan, self.shape(*x), &g))?,
            Op::SpatialSoftmax(x) => acc(*x, nn_ops::softmax_backward(out, &g))?,
            Op::L2Normalize { x, norms, eps } => {
                acc(*x, nn_ops::l2_normalize_backward(out, norms, *eps, &g))?
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let scale = g.item();
                let k = self.shape(*logits)[1];
                let mut gl = probs.clone();
                for (n, &y) in labels.iter().enumerate() {
                    gl[n * k + y] -= T::one();
                }
                gl.iter_mut().for_each(|v| *v *= scale);
                acc(*logits, Tensor::from_parts(self.shape(*logits).to_vec(), gl))?
            }
            Op::Linear { x, w, b } => {
                let (gx, gw, gb) = nn_ops::linear_backward(self.value(*x), self.value(*w), &g);
                if self.wants(*x) {
                    acc(*x, gx)?;
                }
                if self.wants(*w) {
                    acc(*w, gw)?;
                }
                if self.wants(*b) {
                    acc(*b, gb)?;
                }
            }
            Op::GlobalAvgPool(x) => acc(*x, nn_ops::gap_backward(self.shape(*x), &g))?,
        }
        Ok(())
    }
}
