//! Computation tape: an append-only list of op applications with enough
//! saved context to replay the chain rule in reverse.

use super::kernels::ConvDims;
use super::Tensor;
use crate::error::{Error, Result};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

/// Handle to a value recorded on a [`Tape`].
pub type TensorId = usize;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// A trainable tensor. Lives outside any tape; each forward pass re-registers
/// it as a leaf, and the optimizer reads gradients back by `id`.
#[derive(Debug, Clone)]
pub struct Param {
    pub id: u64,
    pub value: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        Param {
            id: NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed),
            value,
        }
    }

    pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f32) -> Self {
        Param::new(Tensor::randn(rng, shape, std))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Param::new(Tensor::zeros(shape))
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// Backward rule and saved context for one recorded op.
#[derive(Debug)]
pub(crate) enum BackOp {
    Leaf,
    Matmul {
        a: TensorId,
        b: TensorId,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        x: TensorId,
        m: usize,
        n: usize,
    },
    Reshape {
        x: TensorId,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Affine {
        x: TensorId,
        mul: f32,
    },
    Relu {
        x: TensorId,
    },
    Sigmoid {
        x: TensorId,
    },
    Concat {
        parts: Vec<(TensorId, usize)>,
        outer: usize,
        inner: usize,
    },
    Narrow {
        x: TensorId,
        outer: usize,
        inner: usize,
        full: usize,
        start: usize,
        len: usize,
    },
    Softmax {
        x: TensorId,
        axis: usize,
    },
    Conv2d {
        x: TensorId,
        w: TensorId,
        bias: Option<TensorId>,
        dims: ConvDims,
    },
    Upsample {
        x: TensorId,
        c: usize,
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
    },
    BilinearSample {
        f: TensorId,
        points: TensorId,
        c: usize,
        h: usize,
        w: usize,
        p: usize,
    },
    AddRowBias {
        x: TensorId,
        b: TensorId,
        rows: usize,
        cols: usize,
    },
    SpatialMean {
        x: TensorId,
        c: usize,
        hw: usize,
    },
    SpatialMax {
        x: TensorId,
        hw: usize,
        argmax: Vec<usize>,
    },
    ChannelMean {
        x: TensorId,
        c: usize,
        hw: usize,
    },
    ChannelMax {
        x: TensorId,
        hw: usize,
        argmax: Vec<usize>,
    },
    MulChannel {
        x: TensorId,
        s: TensorId,
        c: usize,
        hw: usize,
    },
    MulSpatial {
        x: TensorId,
        m: TensorId,
        c: usize,
        hw: usize,
    },
    SumAll {
        x: TensorId,
    },
    MeanAll {
        x: TensorId,
    },
    AffinityTopk {
        keys: TensorId,
        query: TensorId,
        ck: usize,
        m: usize,
        p: usize,
    },
    Dice {
        pred: TensorId,
        gt: Vec<f32>,
        sum_p: f64,
        sum_g: f64,
        sum_pg: f64,
    },
    WeightedBce {
        logits: TensorId,
        gt: Vec<f32>,
        w_fg: f64,
        w_bg: f64,
    },
    SoftmaxCeRows {
        logits: TensorId,
        targets: Vec<usize>,
        row_weights: Vec<f32>,
        weight_sum: f64,
    },
    BootstrappedCe {
        dist: TensorId,
        labels: Vec<usize>,
        selected: Vec<usize>,
        cols: usize,
    },
    SoftAggregate {
        probs: TensorId,
        objects: usize,
        pixels: usize,
    },
}

#[derive(Debug)]
pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    /// Scalar outputs keep the f64 value their kernel accumulated, so
    /// finite-difference probes are not limited by f32 rounding.
    pub scalar64: Option<f64>,
    pub grad: Option<Vec<f32>>,
    pub needs_grad: bool,
    pub op: BackOp,
}

/// Append-only record of a forward evaluation. Confined to one thread.
#[derive(Debug)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    grad_enabled: bool,
    param_nodes: HashMap<u64, TensorId>,
}

impl Tape {
    /// Tape that records backward rules for tracked inputs.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
            param_nodes: HashMap::new(),
        }
    }

    /// Tape that only evaluates forward; parameters enter untracked and no
    /// backward context is kept.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
            param_nodes: HashMap::new(),
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Untracked value.
    pub fn constant(&mut self, t: &Tensor) -> TensorId {
        self.push_unchecked(t.shape().to_vec(), t.data().to_vec(), None, false, BackOp::Leaf)
    }

    /// Tracked input (when the tape records), e.g. for gradient checks.
    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        let tracked = self.grad_enabled;
        self.push_unchecked(t.shape().to_vec(), t.data().to_vec(), None, tracked, BackOp::Leaf)
    }

    /// Registers a parameter, deduplicating by id so that gradients from
    /// every use accumulate on one node.
    pub fn param(&mut self, p: &Param) -> TensorId {
        if let Some(&id) = self.param_nodes.get(&p.id) {
            return id;
        }
        let id = self.leaf(&p.value);
        self.param_nodes.insert(p.id, id);
        id
    }

    /// Substitutes an existing node for a parameter, so later `param()` calls
    /// resolve to it. Lets a gradient check probe a model parameter.
    pub fn bind_param(&mut self, p: &Param, id: TensorId) -> Result<()> {
        if self.nodes[id].shape != p.value.shape() {
            return Err(Error::dimension(
                "bind_param",
                format!("{:?} vs {:?}", self.nodes[id].shape, p.value.shape()),
            ));
        }
        self.param_nodes.insert(p.id, id);
        Ok(())
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn data(&self, id: TensorId) -> &[f32] {
        &self.nodes[id].data
    }

    pub fn numel(&self, id: TensorId) -> usize {
        self.nodes[id].data.len()
    }

    /// Clones the value out of the tape.
    pub fn tensor(&self, id: TensorId) -> Tensor {
        Tensor::from_vec(&self.nodes[id].shape, self.nodes[id].data.clone())
            .expect("tape node is internally consistent")
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f32]> {
        self.nodes[id].grad.as_deref()
    }

    /// Gradient of a registered parameter after [`Tape::backward`].
    pub fn param_grad(&self, p: &Param) -> Option<&[f32]> {
        self.param_nodes.get(&p.id).and_then(|&id| self.grad(id))
    }

    pub(crate) fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<f32>,
        tracked: bool,
        op: BackOp,
    ) -> Result<TensorId> {
        self.push_shadowed(op_name, shape, data, None, tracked, op)
    }

    pub(crate) fn push_scalar(
        &mut self,
        op_name: &'static str,
        value: f64,
        tracked: bool,
        op: BackOp,
    ) -> Result<TensorId> {
        self.push_shadowed(op_name, vec![1], vec![value as f32], Some(value), tracked, op)
    }

    pub(crate) fn push_shadowed(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<f32>,
        scalar64: Option<f64>,
        tracked: bool,
        op: BackOp,
    ) -> Result<TensorId> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        Ok(self.push_unchecked(shape, data, scalar64, tracked, op))
    }

    fn push_unchecked(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f32>,
        scalar64: Option<f64>,
        tracked: bool,
        op: BackOp,
    ) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let needs_grad = self.grad_enabled && tracked;
        self.nodes.push(Node {
            shape,
            data,
            scalar64,
            grad: None,
            // context is dropped when nothing upstream needs gradients
            op: if needs_grad { op } else { BackOp::Leaf },
            needs_grad,
        });
        self.nodes.len() - 1
    }

    /// The f64 value of a scalar node, when its op kept one.
    pub fn scalar64(&self, id: TensorId) -> Option<f64> {
        self.nodes[id].scalar64
    }

    /// Scalar value at the best precision recorded.
    pub fn scalar_value(&self, id: TensorId) -> f64 {
        self.nodes[id]
            .scalar64
            .unwrap_or(self.nodes[id].data[0] as f64)
    }

    pub(crate) fn tracked(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// Reverse pass from a scalar output; gradients accumulate additively on
    /// every tracked node.
    pub fn backward(&mut self, output: TensorId) -> Result<()> {
        if self.nodes[output].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar output, got shape {:?}",
                self.nodes[output].shape
            )));
        }
        if !self.nodes[output].needs_grad {
            return Err(Error::Contract(
                "backward output does not depend on any tracked input".into(),
            ));
        }
        self.nodes[output].grad = Some(vec![1.0]);
        for i in (0..=output).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.needs_grad || node.grad.is_none() {
                continue;
            }
            super::ops::backward_step(before, node)?;
        }
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Adds a gradient contribution onto a node, skipping untracked inputs.
pub(crate) fn accumulate(nodes: &mut [Node], id: TensorId, contrib: &[f32]) {
    let node = &mut nodes[id];
    if !node.needs_grad {
        return;
    }
    let g = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
    debug_assert_eq!(g.len(), contrib.len());
    for (a, b) in g.iter_mut().zip(contrib) {
        *a += b;
    }
}
