use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(pub(crate) usize);

/// Train/eval switch for ops whose behavior differs (dropout, batchnorm).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Recorded primitive with the context its backward rule needs. Inputs are
/// raw node indices; saved buffers are `None` when no gradient will flow.
#[derive(Debug, Clone)]
pub(crate) enum Op<S> {
    Leaf,
    /// Backward already executed; the node's context has been released.
    Consumed,
    Affine {
        x: usize,
        w: usize,
        b: usize,
    },
    Matmul {
        x: usize,
        w: usize,
    },
    Relu {
        x: usize,
    },
    Sigmoid {
        x: usize,
    },
    Tanh {
        x: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        c: S,
    },
    Dropout {
        x: usize,
        mask: Vec<S>,
    },
    SliceCols {
        x: usize,
        from: usize,
    },
    ConcatCols {
        xs: Vec<usize>,
    },
    ConcatRows {
        xs: Vec<usize>,
    },
    Reshape {
        x: usize,
    },
    SumAll {
        x: usize,
    },
    Pad2d {
        x: usize,
        pad: usize,
    },
    Conv2d {
        x: usize,
        k: usize,
        b: usize,
        stride: usize,
        cols: Option<Vec<S>>,
    },
    BatchNormTrain {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    BatchNormEval {
        x: usize,
        gamma: usize,
        beta: usize,
        istd: Vec<S>,
        rmean: Vec<S>,
    },
    EmbeddingRows {
        table: usize,
        ids: Vec<usize>,
    },
    PairConcat {
        objects: usize,
        q: Option<usize>,
    },
    PairConcatMasked {
        objects: usize,
        q: Option<usize>,
        pairs: Vec<(usize, usize)>,
    },
    BlockSumRows {
        x: usize,
        group: usize,
    },
    CellsToObjects {
        x: usize,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        probs: Vec<S>,
        targets: Vec<usize>,
    },
    BceMean {
        logits: usize,
        probs: Vec<S>,
        targets: Vec<S>,
    },
}

/// Reverse-mode tape. Values are immutable once produced; `backward`
/// replays recorded ops in reverse, accumulating gradients for every
/// node reachable from the loss that requires them.
pub struct Tape<S> {
    pub(crate) values: Vec<Tensor<S>>,
    pub(crate) grads: Vec<Option<Vec<S>>>,
    pub(crate) requires: Vec<bool>,
    pub(crate) ops: Vec<Op<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            grads: Vec::new(),
            requires: Vec::new(),
            ops: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Register an input tensor. `requires_grad` marks it as a gradient
    /// target for `backward`.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> ValueId {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Non-differentiable input (coordinates, targets rendered as tensors).
    pub fn constant(&mut self, value: Tensor<S>) -> ValueId {
        self.push(value, false, Op::Leaf)
    }

    pub(crate) fn push(&mut self, value: Tensor<S>, requires: bool, op: Op<S>) -> ValueId {
        let id = self.values.len();
        self.values.push(value);
        self.grads.push(None);
        self.requires.push(requires);
        self.ops.push(op);
        ValueId(id)
    }

    pub fn value(&self, id: ValueId) -> &Tensor<S> {
        &self.values[id.0]
    }

    pub fn requires_grad(&self, id: ValueId) -> bool {
        self.requires[id.0]
    }

    /// Gradient of the last `backward` target w.r.t. this node, if one was
    /// accumulated and the node is a leaf (interior gradients are released
    /// as backward retires them).
    pub fn grad(&self, id: ValueId) -> Option<Tensor<S>> {
        self.grads[id.0]
            .as_ref()
            .map(|g| Tensor::from_raw(self.values[id.0].shape().to_vec(), g.clone()))
    }

    pub(crate) fn scalar_value(&self, id: ValueId) -> S {
        self.values[id.0].data()[0]
    }

    /// Run reverse-mode accumulation from a scalar loss. Interior value and
    /// gradient buffers are released as they are consumed; leaf values and
    /// leaf gradients survive.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return Err(Error::Dimension {
                op: "backward",
                lhs: self.values[loss.0].shape().to_vec(),
                rhs: vec![1],
            });
        }
        if !self.requires[loss.0] {
            // Nothing reachable requires gradients; valid no-op.
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![S::one()]);

        for i in (0..=loss.0).rev() {
            if matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            let Some(dy) = self.grads[i].take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.ops[i], Op::Consumed);
            crate::ops::backward_op(op, &dy, i, &self.values, &mut self.grads, &self.requires)?;
            // Interior activations are dead once their backward ran.
            self.values[i] = Tensor::from_raw(vec![0], Vec::new());
        }
        Ok(())
    }
}

/// Fetch (allocating on first touch) the gradient buffer for a node, or
/// `None` when the node does not require gradients.
pub(crate) fn grad_slot<'a, S: Scalar>(
    grads: &'a mut [Option<Vec<S>>],
    requires: &[bool],
    values: &[Tensor<S>],
    id: usize,
) -> Option<&'a mut [S]> {
    if !requires[id] {
        return None;
    }
    let numel = values[id].numel();
    Some(
        grads[id]
            .get_or_insert_with(|| vec![S::zero(); numel])
            .as_mut_slice(),
    )
}
