//! Tape recording and the reverse sweep.
//!
//! Every differentiable operation appends one node holding its output value
//! and enough references to its inputs to compute vector-Jacobian products.
//! Inputs always precede outputs on the tape, so walking the node list
//! backwards is a reverse topological order and each node is visited once.

use crate::ops::{conv, elementwise, loss, spatial};
use crate::tensor::{Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this crate.
pub trait CustomBackward {
    fn name(&self) -> &str;

    /// Gradient w.r.t. each input, in input order. `None` marks an input the
    /// op does not differentiate.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &[f64],
    ) -> Vec<Option<Vec<f64>>>;
}

pub(crate) enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Abs(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, f64),
    Mse(Var, Var),
    BceProb {
        p: Var,
        target: Var,
    },
    MaxOverChannels {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample2x(Var),
    Sum(Var),
    WeightedSum {
        x: Var,
        weights: Tensor,
        broadcast_channels: bool,
    },
    SigmoidFocal {
        logits: Var,
        targets: Tensor,
        gamma: f64,
        alpha: f64,
    },
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn CustomBackward>,
    },
}

impl Op {
    pub(crate) fn name(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Abs(_) => "abs",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MulScalar(..) => "mul_scalar",
            Op::Mse(..) => "mse_elementwise",
            Op::BceProb { .. } => "bce_prob",
            Op::MaxOverChannels { .. } => "max_over_channels",
            Op::Upsample2x(_) => "upsample_nearest2x",
            Op::Sum(_) => "sum",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::SigmoidFocal { .. } => "sigmoid_focal",
            Op::Custom { rule, .. } => rule.name(),
        }
    }
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// A single-threaded record of executed operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// A trainable input: gradients will be accumulated for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, true, Op::Leaf)
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, false, Op::Leaf)
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

    /// Accumulated gradient after [`Tape::backward`], if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn grad_slice(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn op_name(&self, v: Var) -> &str {
        self.nodes[v.0].op.name()
    }

    fn push_raw(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        if cfg!(debug_assertions) && !value.is_finite() {
            let inputs_finite = inputs.iter().all(|v| self.nodes[v.0].value.is_finite());
            debug_assert!(
                !inputs_finite,
                "{} produced non-finite output from finite inputs",
                op.name()
            );
        }
        self.push_raw(value, requires_grad, op)
    }

    /// Records an externally computed operation with a custom backward rule.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Tensor,
        rule: Box<dyn CustomBackward>,
    ) -> Var {
        self.push(
            output,
            inputs,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
        )
    }

    /// Clears all accumulated gradients.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn accumulate(&mut self, v: Var, g: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        debug_assert_eq!(g.len(), node.value.numel(), "grad length for {}", node.op.name());
        match &mut node.grad {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            None => node.grad = Some(g),
        }
    }

    /// Reverse sweep from a single-element `loss`, seeding d(loss) = 1.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::Invalid {
                op: "backward",
                reason: format!(
                    "loss must hold one element, shape is {:?}",
                    self.shape(loss)
                ),
            });
        }
        self.accumulate(loss, vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.input_grads(i, &grad);
            self.nodes[i].grad = Some(grad);
            for (v, g) in contributions {
                self.accumulate(v, g);
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn input_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let grads = conv::backward(
                    val(input),
                    val(weight),
                    g,
                    stride,
                    padding,
                    self.wants(input),
                );
                if let Some(gi) = grads.input {
                    res.push((input, gi));
                }
                res.push((weight, grads.weight));
                res.push((bias, grads.bias));
            }
            &Op::Relu(x) => res.push((x, elementwise::relu_backward(val(x).data(), g))),
            &Op::Sigmoid(x) => res.push((x, elementwise::sigmoid_backward(out.data(), g))),
            &Op::Exp(x) => res.push((x, elementwise::mul_slices(out.data(), g))),
            &Op::Abs(x) => res.push((x, elementwise::abs_backward(val(x).data(), g))),
            &Op::Add(a, b) => {
                res.push((a, g.to_vec()));
                res.push((b, g.to_vec()));
            }
            &Op::Sub(a, b) => {
                res.push((a, g.to_vec()));
                if self.wants(b) {
                    res.push((b, g.iter().map(|v| -v).collect()));
                }
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    res.push((a, elementwise::mul_slices(val(b).data(), g)));
                }
                if self.wants(b) {
                    res.push((b, elementwise::mul_slices(val(a).data(), g)));
                }
            }
            &Op::MulScalar(x, s) => res.push((x, g.iter().map(|v| v * s).collect())),
            &Op::Mse(a, b) => {
                let (ga, gb) = elementwise::mse_backward(val(a).data(), val(b).data(), g);
                if self.wants(a) {
                    res.push((a, ga));
                }
                if self.wants(b) {
                    res.push((b, gb));
                }
            }
            &Op::BceProb { p, target } => {
                res.push((p, loss::bce_prob_backward(val(p).data(), val(target).data(), g)));
            }
            Op::MaxOverChannels { x, argmax } => {
                res.push((*x, spatial::max_channels_backward(val(*x).shape(), argmax, g)));
            }
            &Op::Upsample2x(x) => res.push((x, spatial::upsample2x_backward(val(x).shape(), g))),
            &Op::Sum(x) => res.push((x, vec![g[0]; val(x).numel()])),
            Op::WeightedSum {
                x,
                weights,
                broadcast_channels,
            } => {
                res.push((
                    *x,
                    loss::weighted_sum_backward(val(*x).shape(), weights, *broadcast_channels, g[0]),
                ));
            }
            Op::SigmoidFocal {
                logits,
                targets,
                gamma,
                alpha,
            } => {
                res.push((
                    *logits,
                    loss::sigmoid_focal_backward(val(*logits).data(), targets.data(), *gamma, *alpha, g[0]),
                ));
            }
            Op::Custom { inputs, rule } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                for (v, gi) in inputs.iter().zip(rule.backward(&ins, out, g)) {
                    if let Some(gi) = gi {
                        res.push((*v, gi));
                    }
                }
            }
        }
        res
    }
}
