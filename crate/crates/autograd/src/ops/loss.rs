//! Loss kernels: probability-space BCE, sigmoid focal loss, weighted sums.

use super::elementwise::{log_sigmoid, sigmoid};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[BCE_EPS, 1 − BCE_EPS]` before taking logs.
pub const BCE_EPS: f64 = 1e-7;

fn clamp_prob(p: f64) -> f64 {
    p.clamp(BCE_EPS, 1.0 - BCE_EPS)
}

pub(crate) fn bce_prob(p: &[f64], t: &[f64]) -> Vec<f64> {
    p.iter()
        .zip(t)
        .map(|(&p, &t)| {
            let p = clamp_prob(p);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .collect()
}

/// Gradient is evaluated at the clamped probability and passed straight
/// through the clamp.
pub(crate) fn bce_prob_backward(p: &[f64], t: &[f64], g: &[f64]) -> Vec<f64> {
    p.iter()
        .zip(t)
        .zip(g)
        .map(|((&p, &t), &g)| {
            let p = clamp_prob(p);
            g * (p - t) / (p * (1.0 - p))
        })
        .collect()
}

/// Index into a `[N,1,H,W]` weight map for element `i` of a `[N,C,H,W]` tensor.
#[inline]
fn broadcast_index(i: usize, c: usize, plane: usize) -> usize {
    let b = i / (c * plane);
    b * plane + i % plane
}

pub(crate) fn weighted_sum(x: &Tensor, w: &Tensor, broadcast: bool) -> f64 {
    if broadcast {
        let s = x.shape();
        let (c, plane) = (s[1], s[2] * s[3]);
        let wd = w.data();
        x.data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * wd[broadcast_index(i, c, plane)])
            .sum()
    } else {
        x.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    }
}

pub(crate) fn weighted_sum_backward(shape: &[usize], w: &Tensor, broadcast: bool, g: f64) -> Vec<f64> {
    if broadcast {
        let (c, plane) = (shape[1], shape[2] * shape[3]);
        let n: usize = shape.iter().product();
        let wd = w.data();
        (0..n).map(|i| g * wd[broadcast_index(i, c, plane)]).collect()
    } else {
        w.data().iter().map(|v| g * v).collect()
    }
}

/// Elementwise sigmoid focal loss from logits with (possibly soft) targets.
pub(crate) fn sigmoid_focal_terms(x: f64, t: f64, gamma: f64, alpha: f64) -> (f64, f64) {
    let p = sigmoid(x);
    let q = 1.0 - p;
    let (lp, lq) = (log_sigmoid(x), log_sigmoid(-x));
    // positive part: −α (1−p)^γ ln p ; negative part: −(1−α) p^γ ln(1−p)
    let pos = -alpha * q.powf(gamma) * lp;
    let neg = -(1.0 - alpha) * p.powf(gamma) * lq;
    let dpos = alpha * q.powf(gamma) * (gamma * p * lp - q);
    let dneg = -(1.0 - alpha) * p.powf(gamma) * (gamma * q * lq - p);
    (t * pos + (1.0 - t) * neg, t * dpos + (1.0 - t) * dneg)
}

pub(crate) fn sigmoid_focal(x: &[f64], t: &[f64], gamma: f64, alpha: f64) -> f64 {
    x.iter()
        .zip(t)
        .map(|(&x, &t)| sigmoid_focal_terms(x, t, gamma, alpha).0)
        .sum()
}

pub(crate) fn sigmoid_focal_backward(x: &[f64], t: &[f64], gamma: f64, alpha: f64, g: f64) -> Vec<f64> {
    x.iter()
        .zip(t)
        .map(|(&x, &t)| g * sigmoid_focal_terms(x, t, gamma, alpha).1)
        .collect()
}
