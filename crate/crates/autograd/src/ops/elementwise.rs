//! Pointwise kernels and their vector-Jacobian products.

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)` without overflow.
pub(crate) fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub(crate) fn relu_backward(x: &[f64], g: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(g)
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect()
}

pub(crate) fn sigmoid_backward(y: &[f64], g: &[f64]) -> Vec<f64> {
    y.iter().zip(g).map(|(&y, &g)| g * y * (1.0 - y)).collect()
}

pub(crate) fn abs_backward(x: &[f64], g: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(g)
        .map(|(&x, &g)| {
            if x > 0.0 {
                g
            } else if x < 0.0 {
                -g
            } else {
                0.0
            }
        })
        .collect()
}

pub(crate) fn mul_slices(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(a, b)| a * b).collect()
}

pub(crate) fn mse_backward(a: &[f64], b: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let ga: Vec<f64> = a
        .iter()
        .zip(b)
        .zip(g)
        .map(|((a, b), g)| 2.0 * (a - b) * g)
        .collect();
    let gb = ga.iter().map(|v| -v).collect();
    (ga, gb)
}
