use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::ops::{self, Op, Saved};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

struct Node<T> {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor<T>,
    saved: Saved<T>,
    requires_grad: bool,
}

/// Append-only record of a computation. Nodes are stored in creation order,
/// so every node's inputs precede it.
pub struct Tape<T: Scalar = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            saved: Saved::Nothing,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// A differentiable leaf: its gradient appears in the [`GradMap`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// A leaf without gradient tracking.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape == self.id && v.index < self.nodes.len() {
            Ok(v.index)
        } else {
            Err(Error::LeafNotOnTape { index: v.index })
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let i = self.check(v).expect("variable from another tape");
        &self.nodes[i].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.check(v).map(|i| self.nodes[i].requires_grad).unwrap_or(false)
    }

    /// Evaluate `op` and record it. Backward state is kept only when some
    /// input requires a gradient.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        if op == Op::Leaf {
            return Err(Error::shape(op.kind(), "leaves are created with Tape::leaf"));
        }
        let idx: Vec<usize> = inputs.iter().map(|&v| self.check(v)).collect::<Result<_>>()?;
        let requires_grad = idx.iter().any(|&i| self.nodes[i].requires_grad);
        let values: Vec<&Tensor<T>> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let (value, saved) = ops::forward(&op, &values, requires_grad)?;
        debug_assert!(
            !value.data().iter().any(|v| v.is_nan()) || !values.iter().all(|v| v.is_finite()),
            "{} produced NaN from finite inputs",
            op.kind()
        );
        self.nodes.push(Node {
            op,
            inputs: idx,
            value,
            saved,
            requires_grad,
        });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Div, &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.apply(Op::Scale(s), &[a])
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Op::Offset(c), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        self.apply(Op::Conv2d, &[x, weight, bias])
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::MaxPool2, &[x])
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Upsample2, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Relu, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Sigmoid, &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Softplus, &[x])
    }

    pub fn channel_softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::ChannelSoftmax, &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Log, &[x])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::GlobalAvgPool, &[x])
    }

    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        self.apply(Op::ChannelConcat, xs)
    }

    pub fn crop(&mut self, x: Var, y0: usize, x0: usize, height: usize, width: usize) -> Result<Var> {
        self.apply(
            Op::SpatialCrop {
                y0,
                x0,
                height,
                width,
            },
            &[x],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Sum, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Op::Reshape(shape.to_vec()), &[x])
    }

    /// Reverse sweep from a scalar `loss`. Every differentiable leaf gets an
    /// entry, zero-filled when the loss does not depend on it.
    pub fn backward(&self, loss: Var) -> Result<GradMap<T>> {
        let root = self.check(loss)?;
        let shape = self.nodes[root].value.shape();
        if !self.nodes[root].value.is_scalar() {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(root + 1, || None);
        grads[root] = Some(Tensor::full(shape, T::one()));
        let mut out = BTreeMap::new();
        for i in (0..=root).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                if node.op == Op::Leaf {
                    out.insert(i, Tensor::zeros(node.value.shape()));
                }
                continue;
            };
            if node.op == Op::Leaf {
                out.insert(i, g);
                continue;
            }
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|&j| self.nodes[j].requires_grad).collect();
            let input_grads = ops::backward(&node.op, &inputs, &node.value, &node.saved, &g, &needs);
            for (&j, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                match &mut grads[j] {
                    Some(acc) => acc.add_assign(&ig),
                    slot => *slot = Some(ig),
                }
            }
        }
        // Leaves recorded after the loss cannot influence it.
        for (i, node) in self.nodes.iter().enumerate().skip(root + 1) {
            if node.op == Op::Leaf && node.requires_grad {
                out.insert(i, Tensor::zeros(node.value.shape()));
            }
        }
        Ok(GradMap {
            tape: self.id,
            grads: out,
        })
    }

    /// Recompute every recorded node from its inputs and report whether all
    /// outputs are reproduced bit for bit.
    pub fn replay(&self) -> Result<bool> {
        for node in &self.nodes {
            if node.op == Op::Leaf {
                continue;
            }
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let (value, _) = ops::forward(&node.op, &inputs, false)?;
            let same = value.shape() == node.value.shape()
                && value
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits());
            if !same {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Gradients of a loss with respect to the differentiable leaves of a tape.
#[derive(Debug)]
pub struct GradMap<T: Scalar = f32> {
    tape: u64,
    grads: BTreeMap<usize, Tensor<T>>,
}

impl<T: Scalar> GradMap<T> {
    pub fn get(&self, leaf: Var) -> Result<&Tensor<T>> {
        if leaf.tape != self.tape {
            return Err(Error::LeafNotOnTape { index: leaf.index });
        }
        self.grads
            .get(&leaf.index)
            .ok_or(Error::LeafNotOnTape { index: leaf.index })
    }

    pub fn take(&mut self, leaf: Var) -> Result<Tensor<T>> {
        if leaf.tape != self.tape {
            return Err(Error::LeafNotOnTape { index: leaf.index });
        }
        self.grads
            .remove(&leaf.index)
            .ok_or(Error::LeafNotOnTape { index: leaf.index })
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
