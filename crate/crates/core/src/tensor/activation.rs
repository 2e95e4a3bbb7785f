use super::Tensor;

/// Asymptote of the scaled hyperbolic tangent.
pub const TANH_AMPLITUDE: f64 = 1.7159;
/// Input gain of the scaled hyperbolic tangent.
pub const TANH_SLOPE: f64 = 2.0 / 3.0;

/// `1.7159 · tanh(2x/3)`.
#[inline]
pub fn tanh_scaled_scalar(x: f64) -> f64 {
    TANH_AMPLITUDE * (TANH_SLOPE * x).tanh()
}

pub fn tanh_scaled(x: &Tensor) -> Tensor {
    x.map(tanh_scaled_scalar)
}

/// Derivative of [`tanh_scaled_scalar`] expressed through its output `y`.
#[inline]
pub fn tanh_scaled_grad_from_output(y: f64) -> f64 {
    TANH_SLOPE * (TANH_AMPLITUDE - y * y / TANH_AMPLITUDE)
}

/// Numerically stable softmax (max subtracted before exponentiating).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn softmax_in_place(values: &mut [f64]) {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in values.iter_mut() {
        *v /= sum;
    }
}
