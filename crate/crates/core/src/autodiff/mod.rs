//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every forward operation appends a node holding its output value and the
//! information its backward rule needs. Nodes are only ever appended, so the
//! tape is always in topological order and backward is a single reverse sweep.

mod conv;
mod elementwise;
mod linear;
mod loss;
mod norm;
mod shape;

pub use conv::{conv1d, maxpool1d};
pub use elementwise::{add, mul, relu, scale, sigmoid, sub, sum, tanh};
pub use linear::dense;
pub use loss::{cross_entropy_loss, l1_penalty, l2_penalty, mse_loss};
pub use norm::{batchnorm, BatchNormState, Mode, BN_EPSILON, BN_MOMENTUM};
pub use shape::{concat_last, mask_last, reshape, slice_last, time_step};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub op: Op,
    pub requires_grad: bool,
}

/// Recorded operation plus whatever the backward rule needs.
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Reshape(Var),
    SliceLast { input: Var, start: usize, width: usize },
    ConcatLast { inputs: Vec<Var>, widths: Vec<usize> },
    MaskLast { input: Var, keep: Vec<bool> },
    TimeStep { input: Var, step: usize, len: usize, channels: usize },
    Conv1d(conv::ConvGeom, Var, Var, Var),
    MaxPool { input: Var, argmax: Vec<usize> },
    Dense { input: Var, weight: Var, bias: Var, rows: usize, m: usize, n: usize },
    BatchNorm(norm::BnSaved),
    Mse { pred: Var, target: Var },
    CrossEntropy { logits: Var, probs: Vec<f64>, labels: Vec<usize> },
    L1 { input: Var, coeff: f64 },
    L2 { input: Var, coeff: f64 },
}

/// Write access to input gradients during the backward sweep.
///
/// Slots for nodes that do not require gradients are never allocated.
pub(crate) struct GradSink<'a> {
    bufs: &'a mut [Option<Vec<f64>>],
    nodes: &'a [Node],
}

impl<'a> GradSink<'a> {
    pub fn slot(&mut self, v: Var) -> Option<&mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(self.bufs[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]).as_mut_slice())
    }

    /// Forward value of an input; the borrow is independent of the sink.
    pub fn value(&self, v: Var) -> &'a [f64] {
        &self.nodes[v.0].value
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
    no_grad: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape on which leaves never require gradients, for inference.
    pub fn inference() -> Self {
        Tape { no_grad: true, ..Self::default() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a tensor as a leaf; it requires gradients iff the tensor does.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let requires_grad = t.requires_grad() && !self.no_grad;
        self.push_raw(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.push_raw(shape, value, Op::Leaf, false)
    }

    pub fn constant_tensor(&mut self, t: &Tensor) -> Var {
        self.constant(t.shape().to_vec(), t.data().to_vec())
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        Tensor::new(node.shape.clone(), node.value.clone()).expect("tape nodes are well-formed")
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        let value = self.value(v);
        assert_eq!(value.len(), 1, "item() on non-scalar node");
        value[0]
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(shape, value, op, requires_grad)
    }

    fn push_raw(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { shape, value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Propagates d(loss)/d(node) back to every leaf that requires gradients.
    ///
    /// Leaf gradients accumulate across calls until [`Tape::zero_grads`].
    /// Leaves unreachable from `loss` receive an explicit zero gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.shape.clone()));
        }
        let mut bufs: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        if root.requires_grad {
            bufs[loss.0] = Some(vec![1.0]);
        }
        self.leaf_grads.resize_with(self.nodes.len(), || None);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                if node.requires_grad {
                    let g = bufs[i].take().unwrap_or_else(|| vec![0.0; node.value.len()]);
                    match &mut self.leaf_grads[i] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        slot => *slot = Some(g),
                    }
                }
                continue;
            }
            let Some(g) = bufs[i].take() else { continue };
            let mut sink = GradSink { bufs: &mut bufs, nodes: &self.nodes };
            backward_op(&node.op, &node.value, &g, &mut sink);
        }
        // Leaves recorded after the loss are unreachable by construction.
        for (node, slot) in self.nodes.iter().zip(self.leaf_grads.iter_mut()).skip(loss.0 + 1) {
            if matches!(node.op, Op::Leaf) && node.requires_grad && slot.is_none() {
                *slot = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(())
    }
}

fn backward_op(op: &Op, out: &[f64], g: &[f64], sink: &mut GradSink<'_>) {
    match op {
        Op::Leaf => {}
        Op::Add(..) | Op::Sub(..) | Op::Mul(..) | Op::Scale(..) | Op::Sum(_) => {
            elementwise::backward_arith(op, g, sink)
        }
        Op::Relu(_) | Op::Sigmoid(_) | Op::Tanh(_) => elementwise::backward_activation(op, out, g, sink),
        Op::Reshape(_)
        | Op::SliceLast { .. }
        | Op::ConcatLast { .. }
        | Op::MaskLast { .. }
        | Op::TimeStep { .. } => shape::backward(op, g, sink),
        Op::Conv1d(geom, x, w, b) => conv::conv1d_backward(geom, *x, *w, *b, g, sink),
        Op::MaxPool { input, argmax } => conv::maxpool_backward(*input, argmax, g, sink),
        Op::Dense { input, weight, bias, rows, m, n } => {
            linear::dense_backward(*input, *weight, *bias, *rows, *m, *n, g, sink)
        }
        Op::BatchNorm(saved) => norm::batchnorm_backward(saved, g, sink),
        Op::Mse { .. } | Op::CrossEntropy { .. } | Op::L1 { .. } | Op::L2 { .. } => {
            loss::backward(op, g, sink)
        }
    }
}

/// Central finite-difference gradient of a scalar function, used by tests to
/// check the backward rules.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Max relative error between two gradient vectors, with an absolute floor so
/// that near-zero entries do not blow up the ratio.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}
