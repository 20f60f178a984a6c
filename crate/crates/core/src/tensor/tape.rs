use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One recorded operation together with the activations its backward needs.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    MaxPool2x {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample2x {
        x: Var,
    },
    AvgPool {
        x: Var,
        factor: usize,
    },
    /// `batch_stats` is false in eval mode, where the statistics are constants.
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Concat {
        xs: Vec<Var>,
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
        x: Var,
        factor: f64,
    },
    ChannelScale {
        x: Var,
        a: Var,
    },
    ChannelGroupSum {
        x: Var,
        k: usize,
    },
    GlobalAvgPool {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Bce {
        p: Var,
        y: Var,
        eps: f64,
    },
    Mae {
        p: Var,
        y: Var,
    },
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2x { .. } => "maxpool2x",
            Op::Upsample2x { .. } => "upsample2x",
            Op::AvgPool { .. } => "avg_pool",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Concat { .. } => "concat_channels",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::ChannelScale { .. } => "channel_scale",
            Op::ChannelGroupSum { .. } => "channel_group_sum",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Sum { .. } => "sum",
            Op::Bce { .. } => "bce_loss",
            Op::Mae { .. } => "mae_loss",
        }
    }

    /// Input handles, in argument order.
    pub fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat { xs } => xs.clone(),
            Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::ChannelScale { x, a } => vec![*x, *a],
            Op::Bce { p, y, .. } | Op::Mae { p, y } => vec![*p, *y],
            Op::MaxPool2x { x, .. }
            | Op::Upsample2x { x }
            | Op::AvgPool { x, .. }
            | Op::Relu { x }
            | Op::Sigmoid { x }
            | Op::Scale { x, .. }
            | Op::ChannelGroupSum { x, .. }
            | Op::GlobalAvgPool { x }
            | Op::Sum { x } => vec![*x],
        }
    }
}

#[derive(Debug)]
pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
}

/// Append-only record of a forward pass.
///
/// Nodes are stored in creation order, which is a topological order because
/// an op can only reference handles that already exist.
#[derive(Debug, Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. The tensor's own `requires_grad` flag is overridden.
    pub fn leaf(&mut self, mut value: Tensor, requires_grad: bool) -> Var {
        value.requires_grad = requires_grad;
        value.grad = None;
        self.push(value, Op::Leaf)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: &Tensor) -> Var {
        self.leaf(value.clone(), true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Re-records the current value of `x` as a constant, cutting the graph.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.clone();
        self.constant(v)
    }

    pub fn value(&self, x: Var) -> &Tensor {
        &self.nodes[x.0].value
    }

    pub fn shape(&self, x: Var) -> &[usize] {
        self.nodes[x.0].value.shape()
    }

    pub fn requires_grad(&self, x: Var) -> bool {
        self.nodes[x.0].value.requires_grad
    }

    pub fn grad(&self, x: Var) -> Option<&[f64]> {
        self.nodes[x.0].value.grad.as_deref()
    }

    pub fn op(&self, x: Var) -> &Op {
        &self.nodes[x.0].op
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.grad = None;
        }
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Var {
        let id = Var(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires_grad(*v))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Leaf gradients accumulate across calls; intermediate gradients are
    /// released as soon as they have been propagated.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.nodes[loss.0].value.numel();
        if numel != 1 {
            return Err(TensorError::NotScalar { numel });
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        for node in &mut self.nodes[..=loss.0] {
            if !matches!(node.op, Op::Leaf) {
                node.value.grad = None;
            }
        }
        self.nodes[loss.0].value.grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(grad) = self.nodes[i].value.grad.take() else {
                continue;
            };
            for (input, contribution) in self.backward_op(i, &grad) {
                let node = &mut self.nodes[input.0];
                if !node.value.requires_grad {
                    continue;
                }
                match node.value.grad.as_mut() {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contribution) {
                            *a += c;
                        }
                    }
                    None => node.value.grad = Some(contribution),
                }
            }
        }
        Ok(())
    }
}
