//! Reverse-mode automatic differentiation over a flat tape.
//!
//! A [`Graph`] owns every node: persistent parameter leaves registered up
//! front, then transient activation nodes appended by each forward pass.
//! Operations compute eagerly; [`Graph::backward`] walks the tape in reverse.
//! Gradients accumulate additively across backward calls until
//! [`Graph::zero_grads`]; [`Graph::reset`] drops activations but keeps
//! parameters (and their accumulated gradients) in place.

pub mod conv;
mod ops;
pub mod rnn;

use crate::error::{shape_err, CoreError, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node in a [`Graph`]. Only valid for the graph that made it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernels: Var,
        bias: Option<Var>,
        stride: usize,
    },
    DepthwiseConv {
        input: Var,
        kernels: Var,
        bias: Option<Var>,
        stride: usize,
    },
    PointwiseConv {
        input: Var,
        kernels: Var,
        bias: Option<Var>,
    },
    TemporalConv {
        input: Var,
        kernels: Var,
        bias: Option<Var>,
    },
    FullyConnected {
        input: Var,
        weights: Var,
        bias: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
        b_transposed: bool,
    },
    Relu {
        input: Var,
    },
    Tanh {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    Softmax {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    ScalarAffine {
        input: Var,
        w: Var,
        b: Var,
    },
    ChannelScale {
        input: Var,
        scale: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    Slice {
        input: Var,
        start: usize,
        len: usize,
    },
    Stack {
        parts: Vec<Var>,
    },
    FrameMean {
        input: Var,
        frames: usize,
    },
    WeightedFrameSum {
        weights: Var,
        frames: Var,
    },
    NonlocalRowSoftmax {
        scores: Var,
    },
    FramewiseMatmul {
        attn: Var,
        values: Var,
    },
    Reshape {
        input: Var,
    },
    Sum {
        input: Var,
    },
    L2Loss {
        input: Var,
        target: Tensor<T>,
    },
    BceWithLogit {
        logit: Var,
        label: f64,
    },
    CeWithLogits {
        logits: Var,
        label: usize,
    },
}

struct Meta<T> {
    op: Op<T>,
    requires_grad: bool,
}

/// Flat autodiff tape; see module docs.
pub struct Graph<T: Scalar> {
    metas: Vec<Meta<T>>,
    values: Vec<Tensor<T>>,
    grads: Vec<Option<Tensor<T>>>,
    persistent: usize,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            metas: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            persistent: 0,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.metas.len()
    }

    /// Handles of every persistent parameter, in registration order.
    pub fn params(&self) -> Vec<Var> {
        (0..self.persistent).map(Var).collect()
    }

    pub fn num_params(&self) -> usize {
        self.persistent
    }

    /// Register a persistent parameter leaf. All parameters must be added
    /// before the first transient node (or after a [`Graph::reset`]).
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        if self.metas.len() != self.persistent {
            return Err(CoreError::Config(
                "parameters must be registered before activation nodes".into(),
            ));
        }
        let var = self.push(value, Op::Leaf, true);
        self.persistent = self.metas.len();
        Ok(var)
    }

    /// Transient leaf that does not require gradients (inputs, constants).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Transient leaf with an explicit `requires_grad` flag (used by tests
    /// probing input gradients).
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.metas[v.0].requires_grad
    }

    /// Overwrite a leaf's value (parameter updates, finite-difference probes).
    pub fn set_value(&mut self, v: Var, value: Tensor<T>) -> Result<()> {
        if !matches!(self.metas[v.0].op, Op::Leaf) {
            return Err(CoreError::Config("set_value only applies to leaves".into()));
        }
        if value.shape() != self.values[v.0].shape() {
            return shape_err(format!(
                "set_value shape {:?} != existing {:?}",
                value.shape(),
                self.values[v.0].shape()
            ));
        }
        self.values[v.0] = value;
        Ok(())
    }

    /// Mutably borrow a leaf value together with its gradient (optimizers).
    pub fn value_and_grad_mut(&mut self, v: Var) -> (&mut Tensor<T>, Option<&Tensor<T>>) {
        (&mut self.values[v.0], self.grads[v.0].as_ref())
    }

    /// Clear all gradients (parameters included).
    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// Drop all transient nodes, keeping parameters and their gradients.
    pub fn reset(&mut self) {
        self.metas.truncate(self.persistent);
        self.values.truncate(self.persistent);
        self.grads.truncate(self.persistent);
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.metas.push(Meta { op, requires_grad });
        self.values.push(value);
        self.grads.push(None);
        Var(self.metas.len() - 1)
    }

    fn any_requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.metas[v.0].requires_grad)
    }

    /// Reverse pass from a scalar loss. Accumulates into existing gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return shape_err(format!(
                "backward wants a scalar loss, got shape {:?}",
                self.values[loss.0].shape()
            ));
        }
        if !self.metas[loss.0].requires_grad {
            return Ok(()); // nothing reachable requires gradients
        }
        {
            let g = self.grad_buf(loss.0);
            g[0] = g[0] + T::one();
        }
        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() || !self.metas[i].requires_grad {
                continue;
            }
            self.backprop_node(i);
        }
        Ok(())
    }

    fn grad_buf(&mut self, idx: usize) -> &mut [T] {
        if self.grads[idx].is_none() {
            let shape = self.values[idx].shape().to_vec();
            self.grads[idx] = Some(Tensor::zeros(shape));
        }
        self.grads[idx].as_mut().unwrap().data_mut()
    }
}
