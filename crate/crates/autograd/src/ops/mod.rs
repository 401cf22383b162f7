//! Differentiable operations recorded on a [`Tape`].

pub(crate) mod conv;
pub(crate) mod elementwise;
pub(crate) mod loss;
pub(crate) mod spatial;

pub use loss::BCE_EPS;

use crate::tape::{Op, Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};

fn axis_name(rank: usize, axis: usize) -> &'static str {
    match (rank, axis) {
        (4, 0) => "N",
        (4, 1) => "C",
        (4, 2) => "H",
        (4, 3) => "W",
        (_, 0) => "dim0",
        (_, 1) => "dim1",
        (_, 2) => "dim2",
        _ => "dim",
    }
}

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() {
        return Err(TensorError::Rank {
            op,
            expected: a.len(),
            found: b.len(),
        });
    }
    match a.iter().zip(b).position(|(x, y)| x != y) {
        None => Ok(()),
        Some(i) => Err(TensorError::Dimension {
            op,
            axis: axis_name(a.len(), i),
            expected: a[i],
            found: b[i],
        }),
    }
}

impl Tape {
    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(x).map(f);
        self.push(out, &[x], op)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same(name, ta.shape(), tb.shape())?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, &[a, b], op))
    }

    /// Cross-correlation of `[N,Cin,H,W]` input with `[Cout,Cin,k,k]` weights.
    /// Output size per axis is `⌊(H + 2·padding − k)/stride⌋ + 1`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (ti, tw, tb) = (self.value(input), self.value(weight), self.value(bias));
        let g = conv::geometry(ti, tw, tb, stride, padding)?;
        let out = conv::forward(ti, tw, tb, &g);
        Ok(self.push(
            out,
            &[input, weight, bias],
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, elementwise::sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn mul_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::MulScalar(x, s))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise `(a − b)²`.
    pub fn mse_elementwise(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mse_elementwise", a, b, |x, y| (x - y) * (x - y), Op::Mse(a, b))
    }

    /// Elementwise `−(t·ln p + (1−t)·ln(1−p))` with `p` clamped to
    /// `[ε, 1−ε]`, `ε = 1e-7`. The target never receives gradient.
    pub fn bce_prob(&mut self, p: Var, target: Var) -> Result<Var> {
        let (tp, tt) = (self.value(p), self.value(target));
        check_same("bce_prob", tp.shape(), tt.shape())?;
        let out = Tensor::new(tp.shape().to_vec(), loss::bce_prob(tp.data(), tt.data()))?;
        Ok(self.push(out, &[p], Op::BceProb { p, target }))
    }

    /// `[N,C,H,W] → [N,1,H,W]` maximum across channels. Backward routes the
    /// gradient to the argmax channel, lowest index on ties.
    pub fn max_over_channels(&mut self, x: Var) -> Result<Var> {
        self.value(x).dims4("max_over_channels")?;
        let (out, argmax) = spatial::max_channels(self.value(x));
        Ok(self.push(out, &[x], Op::MaxOverChannels { x, argmax }))
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        self.value(x).dims4("upsample_nearest2x")?;
        let out = spatial::upsample2x(self.value(x));
        Ok(self.push(out, &[x], Op::Upsample2x(x)))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, &[x], Op::Sum(x))
    }

    /// `Σ w·x` against a constant weight tensor of the same shape.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        check_same("weighted_sum", self.shape(x), weights.shape())?;
        let out = Tensor::scalar(loss::weighted_sum(self.value(x), &weights, false));
        Ok(self.push(
            out,
            &[x],
            Op::WeightedSum {
                x,
                weights,
                broadcast_channels: false,
            },
        ))
    }

    /// `Σ_{n,c,h,w} m[n,0,h,w]·x[n,c,h,w]` for a constant per-site map `m`.
    pub fn site_weighted_sum(&mut self, x: Var, site_weights: Tensor) -> Result<Var> {
        const OP: &str = "site_weighted_sum";
        let [n, _, h, w] = self.value(x).dims4(OP)?;
        check_same(OP, &[n, 1, h, w], site_weights.shape())?;
        let out = Tensor::scalar(loss::weighted_sum(self.value(x), &site_weights, true));
        Ok(self.push(
            out,
            &[x],
            Op::WeightedSum {
                x,
                weights: site_weights,
                broadcast_channels: true,
            },
        ))
    }

    /// Summed sigmoid focal loss of `logits` against constant `targets` in `[0,1]`.
    pub fn sigmoid_focal_sum(
        &mut self,
        logits: Var,
        targets: Tensor,
        gamma: f64,
        alpha: f64,
    ) -> Result<Var> {
        check_same("sigmoid_focal_sum", self.shape(logits), targets.shape())?;
        let out = Tensor::scalar(loss::sigmoid_focal(
            self.value(logits).data(),
            targets.data(),
            gamma,
            alpha,
        ));
        Ok(self.push(
            out,
            &[logits],
            Op::SigmoidFocal {
                logits,
                targets,
                gamma,
                alpha,
            },
        ))
    }
}
