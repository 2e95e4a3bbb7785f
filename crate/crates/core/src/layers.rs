//! Layer dynamics: leaky-integrator feature units, recurrent context units,
//! the composite context layer, fully-connected layers, softmax heads and an
//! LSTM cell.
//!
//! Feature units integrate a convolutional drive with time constant `τ`:
//!
//! ```text
//! f̂ᵗ = (1 − 1/τ)·f̂ᵗ⁻¹ + (1/τ)·(Σₙ k⊛pᵗ + b) + (1/τ)·Σₐ z⊛cᵗ_prev-layer
//! fᵗ = 1.7159·tanh(2/3·f̂ᵗ)
//! ```
//!
//! Context units do the same from the pooled feature maps of their own
//! layer, plus a 3×3, pad-1 recurrent convolution over their activations at
//! the previous step:
//!
//! ```text
//! ĉᵗ = (1 − 1/τ)·ĉᵗ⁻¹ + (1/τ)·(Σₘ k̃⊛pᵗ + b̃) + (1/τ)·Σ_b z̃⊛cᵗ⁻¹
//! cᵗ = 1.7159·tanh(2/3·ĉᵗ)
//! ```
//!
//! Within one step a context layer runs feature units, then 2×2 max pooling,
//! then context units. All internal states start at zero.
//!
//! Each forward step has a matching `*_backward` function used by BPTT.

use crate::error::{Error, Result};
use crate::tensor::{
    conv2d_accumulate, conv2d_backward_input, conv2d_backward_kernels, maxpool2d,
    maxpool2d_backward, tanh_scaled_grad_from_output, tanh_scaled_scalar, ArgIndices, Tensor,
};

/// Padding of the recurrent context kernels.
pub const RECURRENT_PAD: usize = 1;
/// Extent of the recurrent context kernels.
pub const RECURRENT_KERNEL: usize = 3;

/// Parameters of feature units (borrowed from a model's parameter store).
#[derive(Clone, Copy, Debug)]
pub struct FeatureParams<'a> {
    pub tau: f64,
    /// `k`: pooling maps of the previous layer → feature maps.
    pub kernels: &'a Tensor,
    /// `z`: context maps of the previous layer → feature maps.
    pub context_kernels: Option<&'a Tensor>,
    pub bias: &'a Tensor,
    pub pad: usize,
}

/// Parameters of context units.
#[derive(Clone, Copy, Debug)]
pub struct ContextParams<'a> {
    pub tau: f64,
    /// `k̃`: same-layer pooling maps → context maps, 2×2 stride 1.
    pub kernels: &'a Tensor,
    /// `z̃`: context maps at `t−1` → context maps, 3×3 pad 1.
    pub recurrent: &'a Tensor,
    pub bias: &'a Tensor,
}

/// Owned parameters of one context layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub tau: f64,
    pub pad: usize,
    pub feature_kernels: Tensor,
    pub feature_context_kernels: Option<Tensor>,
    pub feature_bias: Tensor,
    pub context_kernels: Tensor,
    pub recurrent_kernels: Tensor,
    pub context_bias: Tensor,
}

impl LayerParams {
    pub fn feature(&self) -> FeatureParams<'_> {
        FeatureParams {
            tau: self.tau,
            kernels: &self.feature_kernels,
            context_kernels: self.feature_context_kernels.as_ref(),
            bias: &self.feature_bias,
            pad: self.pad,
        }
    }

    pub fn context(&self) -> ContextParams<'_> {
        ContextParams {
            tau: self.tau,
            kernels: &self.context_kernels,
            recurrent: &self.recurrent_kernels,
            bias: &self.context_bias,
        }
    }
}

/// Internal states `f̂` of a bank of feature units.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureState {
    pub f_hat: Tensor,
}

impl FeatureState {
    pub fn zeros(shape: &[usize]) -> Self {
        FeatureState {
            f_hat: Tensor::zeros(shape),
        }
    }
}

/// Internal states `ĉ` of context units and their last activations.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextState {
    pub c_hat: Tensor,
    pub c_prev: Tensor,
}

impl ContextState {
    pub fn zeros(shape: &[usize]) -> Self {
        ContextState {
            c_hat: Tensor::zeros(shape),
            c_prev: Tensor::zeros(shape),
        }
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau.is_finite() && tau >= 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("time constant must be ≥ 1, got {tau}")))
    }
}

/// `keep·state + (1/τ)·drive`, then the scaled tanh of the new state.
fn integrate(state: &mut Tensor, drive: &Tensor, tau: f64) -> Result<Tensor> {
    if state.shape() != drive.shape() {
        return Err(Error::shape(format!(
            "state is {:?} but the drive is {:?}",
            state.shape(),
            drive.shape()
        )));
    }
    let keep = 1.0 - 1.0 / tau;
    let gain = 1.0 / tau;
    for (s, &d) in state.data_mut().iter_mut().zip(drive.data()) {
        *s = keep * *s + gain * d;
    }
    Ok(state.map(tanh_scaled_scalar))
}

fn add_bias(t: &mut Tensor, bias: &Tensor) -> Result<()> {
    let maps = t.shape()[0];
    if bias.len() != maps {
        return Err(Error::shape(format!(
            "bias has {} entries for {maps} maps",
            bias.len()
        )));
    }
    let plane = t.len() / maps.max(1);
    for (chunk, &b) in t.data_mut().chunks_mut(plane.max(1)).zip(bias.data()) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
    Ok(())
}

fn sum_per_map(t: &Tensor, into: &mut Tensor) {
    let maps = t.shape()[0];
    let plane = t.len() / maps.max(1);
    for (chunk, g) in t.data().chunks(plane.max(1)).zip(into.data_mut()) {
        *g += chunk.iter().sum::<f64>();
    }
}

/// Convolutional drive `Σ k⊛p + b + Σ z⊛c` of feature units.
pub fn feature_drive(
    prev_pool: &Tensor,
    prev_context: Option<&Tensor>,
    params: &FeatureParams,
    out_shape: &[usize],
) -> Result<Tensor> {
    let mut drive = Tensor::zeros(out_shape);
    conv2d_accumulate(prev_pool, params.kernels, 1, params.pad, &mut drive)?;
    add_bias(&mut drive, params.bias)?;
    match (prev_context, params.context_kernels) {
        (Some(c), Some(z)) => conv2d_accumulate(c, z, 1, params.pad, &mut drive)?,
        (None, None) => {}
        (Some(_), None) => {
            return Err(Error::shape(
                "context input given to feature units without context kernels",
            ))
        }
        (None, Some(_)) => {
            return Err(Error::shape(
                "feature units with context kernels need a context input",
            ))
        }
    }
    Ok(drive)
}

/// One step of feature units. Updates `state` and returns the activations.
pub fn feature_units_step(
    prev_pool: &Tensor,
    prev_context: Option<&Tensor>,
    state: &mut FeatureState,
    params: &FeatureParams,
) -> Result<Tensor> {
    check_tau(params.tau)?;
    let shape = state.f_hat.shape().to_vec();
    let drive = feature_drive(prev_pool, prev_context, params, &shape)?;
    integrate(&mut state.f_hat, &drive, params.tau)
}

/// One step of context units reading the current pooling of their layer.
pub fn context_units_step(
    same_layer_pool: &Tensor,
    state: &mut ContextState,
    params: &ContextParams,
) -> Result<Tensor> {
    check_tau(params.tau)?;
    let [_, _, kh, kw] = *params.recurrent.shape() else {
        return Err(Error::shape("recurrent kernels must be rank 4"));
    };
    if (kh, kw) != (RECURRENT_KERNEL, RECURRENT_KERNEL) {
        return Err(Error::shape(format!(
            "recurrent kernels must be 3×3 with padding 1, got {kh}×{kw}"
        )));
    }
    let shape = state.c_hat.shape().to_vec();
    let mut drive = Tensor::zeros(&shape);
    conv2d_accumulate(same_layer_pool, params.kernels, 1, 0, &mut drive)?;
    add_bias(&mut drive, params.bias)?;
    conv2d_accumulate(&state.c_prev, params.recurrent, 1, RECURRENT_PAD, &mut drive)?;
    let act = integrate(&mut state.c_hat, &drive, params.tau)?;
    state.c_prev = act.clone();
    Ok(act)
}

/// Everything one context-layer step produces.
#[derive(Clone, Debug)]
pub struct ContextLayerOutput {
    pub features: Tensor,
    pub pool: Tensor,
    pub pool_args: ArgIndices,
    /// `None` when the layer has no context units.
    pub context: Option<Tensor>,
}

/// Feature units → pooling → context units, in that order.
pub fn context_layer_step(
    prev_pool: &Tensor,
    prev_context: Option<&Tensor>,
    feature_state: &mut FeatureState,
    context_state: Option<&mut ContextState>,
    feature: &FeatureParams,
    context: Option<&ContextParams>,
) -> Result<ContextLayerOutput> {
    let features = feature_units_step(prev_pool, prev_context, feature_state, feature)?;
    let (pool, pool_args) = maxpool2d(&features)?;
    let context = match (context_state, context) {
        (Some(state), Some(params)) => Some(context_units_step(&pool, state, params)?),
        (None, None) => None,
        _ => return Err(Error::shape("context state and parameters must come together")),
    };
    Ok(ContextLayerOutput {
        features,
        pool,
        pool_args,
        context,
    })
}

/// Gradient sinks for a bank of feature units.
pub struct FeatureGrads<'a> {
    pub kernels: &'a mut Tensor,
    pub context_kernels: Option<&'a mut Tensor>,
    pub bias: &'a mut Tensor,
}

/// Input gradients of one feature-unit step.
pub struct FeatureInputGrads {
    pub prev_pool: Option<Tensor>,
    pub prev_context: Option<Tensor>,
}

/// Reverse of [`feature_units_step`].
///
/// `carry` holds `∂L/∂f̂ᵗ` contributed by step `t+1` through the decay term
/// and is replaced by the contribution this step sends to `t−1`.
#[allow(clippy::too_many_arguments)]
pub fn feature_units_backward(
    grad_activation: Option<&Tensor>,
    activation: &Tensor,
    prev_pool: &Tensor,
    prev_context: Option<&Tensor>,
    params: &FeatureParams,
    carry: &mut Tensor,
    grads: FeatureGrads,
    want_input_grads: bool,
) -> Result<FeatureInputGrads> {
    let keep = 1.0 - 1.0 / params.tau;
    let gain = 1.0 / params.tau;
    let mut d_state = carry.clone();
    if let Some(g) = grad_activation {
        for ((d, &gy), &y) in d_state.data_mut().iter_mut().zip(g.data()).zip(activation.data()) {
            *d += gy * tanh_scaled_grad_from_output(y);
        }
    }
    let mut d_drive = d_state.clone();
    d_drive.scale(gain);
    d_state.scale(keep);
    *carry = d_state;

    conv2d_backward_kernels(prev_pool, &d_drive, 1, params.pad, grads.kernels)?;
    sum_per_map(&d_drive, grads.bias);
    if let (Some(c), Some(gz)) = (prev_context, grads.context_kernels) {
        conv2d_backward_kernels(c, &d_drive, 1, params.pad, gz)?;
    }
    if !want_input_grads {
        return Ok(FeatureInputGrads {
            prev_pool: None,
            prev_context: None,
        });
    }
    let mut gp = Tensor::zeros(prev_pool.shape());
    conv2d_backward_input(&d_drive, params.kernels, 1, params.pad, &mut gp)?;
    let gc = match (prev_context, params.context_kernels) {
        (Some(c), Some(z)) => {
            let mut gc = Tensor::zeros(c.shape());
            conv2d_backward_input(&d_drive, z, 1, params.pad, &mut gc)?;
            Some(gc)
        }
        _ => None,
    };
    Ok(FeatureInputGrads {
        prev_pool: Some(gp),
        prev_context: gc,
    })
}

/// Gradient sinks for context units.
pub struct ContextGrads<'a> {
    pub kernels: &'a mut Tensor,
    pub recurrent: &'a mut Tensor,
    pub bias: &'a mut Tensor,
}

/// Backward carries of context units between steps.
#[derive(Clone, Debug)]
pub struct ContextCarry {
    /// `∂L/∂ĉᵗ` arriving through the decay term.
    pub c_hat: Tensor,
    /// `∂L/∂cᵗ` arriving through the recurrent kernels.
    pub activation: Tensor,
}

impl ContextCarry {
    pub fn zeros(shape: &[usize]) -> Self {
        ContextCarry {
            c_hat: Tensor::zeros(shape),
            activation: Tensor::zeros(shape),
        }
    }
}

/// Reverse of [`context_units_step`]; returns `∂L/∂pᵗ` for the same-layer pooling.
pub fn context_units_backward(
    grad_activation: Option<&Tensor>,
    activation: &Tensor,
    prev_activation: &Tensor,
    pool: &Tensor,
    params: &ContextParams,
    carry: &mut ContextCarry,
    grads: ContextGrads,
) -> Result<Tensor> {
    let keep = 1.0 - 1.0 / params.tau;
    let gain = 1.0 / params.tau;
    let mut d_act = std::mem::replace(&mut carry.activation, Tensor::zeros(activation.shape()));
    if let Some(g) = grad_activation {
        d_act.add_assign(g)?;
    }
    let mut d_state = carry.c_hat.clone();
    for ((d, &gy), &y) in d_state.data_mut().iter_mut().zip(d_act.data()).zip(activation.data()) {
        *d += gy * tanh_scaled_grad_from_output(y);
    }
    let mut d_drive = d_state.clone();
    d_drive.scale(gain);
    d_state.scale(keep);
    carry.c_hat = d_state;

    conv2d_backward_kernels(pool, &d_drive, 1, 0, grads.kernels)?;
    sum_per_map(&d_drive, grads.bias);
    conv2d_backward_kernels(prev_activation, &d_drive, 1, RECURRENT_PAD, grads.recurrent)?;
    conv2d_backward_input(&d_drive, params.recurrent, 1, RECURRENT_PAD, &mut carry.activation)?;
    let mut gp = Tensor::zeros(pool.shape());
    conv2d_backward_input(&d_drive, params.kernels, 1, 0, &mut gp)?;
    Ok(gp)
}

/// Routes a pooled gradient back through max pooling.
pub fn pool_backward(grad_pool: &Tensor, args: &ArgIndices) -> Result<Tensor> {
    maxpool2d_backward(grad_pool, args)
}

fn matvec(weights: &Tensor, bias: &Tensor, input: &[f64]) -> Result<Vec<f64>> {
    let [rows, cols] = *weights.shape() else {
        return Err(Error::shape(format!(
            "weight matrix must be rank 2, got {:?}",
            weights.shape()
        )));
    };
    if cols != input.len() || bias.len() != rows {
        return Err(Error::shape(format!(
            "{rows}×{cols} weights with {} biases cannot take {} inputs",
            bias.len(),
            input.len()
        )));
    }
    Ok(weights
        .data()
        .chunks(cols)
        .zip(bias.data())
        .map(|(row, &b)| b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>())
        .collect())
}

/// `dW += d ⊗ x`, `db += d`, and (optionally) `Wᵀ d`.
fn matvec_backward(
    weights: &Tensor,
    input: &[f64],
    d_out: &[f64],
    grad_w: &mut Tensor,
    grad_b: Option<&mut Tensor>,
    want_input: bool,
) -> Option<Vec<f64>> {
    let cols = input.len();
    for (row, &d) in grad_w.data_mut().chunks_mut(cols).zip(d_out) {
        if d != 0.0 {
            for (g, &x) in row.iter_mut().zip(input) {
                *g += d * x;
            }
        }
    }
    if let Some(gb) = grad_b {
        for (g, &d) in gb.data_mut().iter_mut().zip(d_out) {
            *g += d;
        }
    }
    want_input.then(|| {
        let mut dx = vec![0.0; cols];
        for (row, &d) in weights.data().chunks(cols).zip(d_out) {
            if d != 0.0 {
                for (g, &w) in dx.iter_mut().zip(row) {
                    *g += d * w;
                }
            }
        }
        dx
    })
}

/// Fully-connected layer with scaled-tanh activation.
pub fn fc_step(input: &[f64], weights: &Tensor, bias: &Tensor) -> Result<Vec<f64>> {
    Ok(matvec(weights, bias, input)?
        .into_iter()
        .map(tanh_scaled_scalar)
        .collect())
}

/// Reverse of [`fc_step`] given `∂L/∂output` (after any dropout scaling).
pub fn fc_backward(
    input: &[f64],
    output: &[f64],
    grad_output: &[f64],
    weights: &Tensor,
    grad_w: &mut Tensor,
    grad_b: &mut Tensor,
    want_input: bool,
) -> Option<Vec<f64>> {
    let d: Vec<f64> = grad_output
        .iter()
        .zip(output)
        .map(|(g, &y)| g * tanh_scaled_grad_from_output(y))
        .collect();
    matvec_backward(weights, input, &d, grad_w, Some(grad_b), want_input)
}

/// Linear logits for all heads, stacked.
pub fn head_logits(features: &[f64], weights: &Tensor, bias: &Tensor) -> Result<Vec<f64>> {
    matvec(weights, bias, features)
}

/// One softmax vector per head; `sizes` partitions the stacked logits.
pub fn output_heads(
    features: &[f64],
    weights: &Tensor,
    bias: &Tensor,
    sizes: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let logits = head_logits(features, weights, bias)?;
    if sizes.iter().sum::<usize>() != logits.len() {
        return Err(Error::shape(format!(
            "head sizes {sizes:?} do not partition {} logits",
            logits.len()
        )));
    }
    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for &n in sizes {
        out.push(crate::tensor::softmax(&logits[start..start + n]));
        start += n;
    }
    Ok(out)
}

/// Reverse of [`output_heads`] given `∂L/∂logits`.
pub fn heads_backward(
    features: &[f64],
    grad_logits: &[f64],
    weights: &Tensor,
    grad_w: &mut Tensor,
    grad_b: &mut Tensor,
    want_input: bool,
) -> Option<Vec<f64>> {
    matvec_backward(weights, features, grad_logits, grad_w, Some(grad_b), want_input)
}

/// LSTM parameters with gate blocks stacked in the order
/// input, forget, output, candidate.
#[derive(Clone, Copy, Debug)]
pub struct LstmParams<'a> {
    /// `4H × X`
    pub input_weights: &'a Tensor,
    /// `4H × H`
    pub recurrent_weights: &'a Tensor,
    /// `4H`
    pub bias: &'a Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub hidden: Vec<f64>,
    pub cell: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            hidden: vec![0.0; hidden],
            cell: vec![0.0; hidden],
        }
    }
}

/// Values of one LSTM step needed by its backward pass.
#[derive(Clone, Debug)]
pub struct LstmCache {
    pub input: Vec<f64>,
    pub hidden_prev: Vec<f64>,
    pub cell_prev: Vec<f64>,
    /// Gate activations `[i | f | o | g]`.
    pub gates: Vec<f64>,
    pub cell_tanh: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// ```text
/// a = Wx + Uh + b,  i = σ(a_i), f = σ(a_f), o = σ(a_o), g = tanh(a_g)
/// c' = f⊙c + i⊙g,   h' = o⊙tanh(c')
/// ```
pub fn lstm_step(input: &[f64], state: &mut LstmState, params: &LstmParams) -> Result<Vec<f64>> {
    Ok(lstm_step_cached(input, state, params)?.0)
}

pub fn lstm_step_cached(
    input: &[f64],
    state: &mut LstmState,
    params: &LstmParams,
) -> Result<(Vec<f64>, LstmCache)> {
    let h = state.hidden.len();
    let mut a = matvec(params.input_weights, params.bias, input)?;
    if a.len() != 4 * h {
        return Err(Error::shape(format!(
            "LSTM gate block has {} rows for hidden size {h}",
            a.len()
        )));
    }
    let zero_bias = Tensor::zeros(&[4 * h]);
    let rec = matvec(params.recurrent_weights, &zero_bias, &state.hidden)?;
    for (x, r) in a.iter_mut().zip(rec) {
        *x += r;
    }
    for (j, x) in a.iter_mut().enumerate() {
        *x = if j < 3 * h { sigmoid(*x) } else { x.tanh() };
    }
    let cell_prev = state.cell.clone();
    let hidden_prev = state.hidden.clone();
    let mut cell_tanh = vec![0.0; h];
    for j in 0..h {
        let (i, f, o, g) = (a[j], a[h + j], a[2 * h + j], a[3 * h + j]);
        let c = f * cell_prev[j] + i * g;
        state.cell[j] = c;
        cell_tanh[j] = c.tanh();
        state.hidden[j] = o * cell_tanh[j];
    }
    let cache = LstmCache {
        input: input.to_vec(),
        hidden_prev,
        cell_prev,
        gates: a,
        cell_tanh,
    };
    Ok((state.hidden.clone(), cache))
}

/// Backward carries of an LSTM between steps.
#[derive(Clone, Debug)]
pub struct LstmCarry {
    pub hidden: Vec<f64>,
    pub cell: Vec<f64>,
}

impl LstmCarry {
    pub fn zeros(hidden: usize) -> Self {
        LstmCarry {
            hidden: vec![0.0; hidden],
            cell: vec![0.0; hidden],
        }
    }
}

pub struct LstmGrads<'a> {
    pub input_weights: &'a mut Tensor,
    pub recurrent_weights: &'a mut Tensor,
    pub bias: &'a mut Tensor,
}

/// Reverse of [`lstm_step`]; returns `∂L/∂input` when requested.
pub fn lstm_backward(
    grad_hidden: Option<&[f64]>,
    cache: &LstmCache,
    params: &LstmParams,
    carry: &mut LstmCarry,
    grads: LstmGrads,
    want_input: bool,
) -> Option<Vec<f64>> {
    let h = carry.hidden.len();
    let g = &cache.gates;
    let mut dh = carry.hidden.clone();
    if let Some(gh) = grad_hidden {
        for (d, &x) in dh.iter_mut().zip(gh) {
            *d += x;
        }
    }
    let mut da = vec![0.0; 4 * h];
    let mut dc_prev = vec![0.0; h];
    for j in 0..h {
        let (i, f, o, gg) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
        let tc = cache.cell_tanh[j];
        let dc = carry.cell[j] + dh[j] * o * (1.0 - tc * tc);
        da[j] = dc * gg * i * (1.0 - i);
        da[h + j] = dc * cache.cell_prev[j] * f * (1.0 - f);
        da[2 * h + j] = dh[j] * tc * o * (1.0 - o);
        da[3 * h + j] = dc * i * (1.0 - gg * gg);
        dc_prev[j] = dc * f;
    }
    let dh_prev = matvec_backward(
        params.recurrent_weights,
        &cache.hidden_prev,
        &da,
        grads.recurrent_weights,
        None,
        true,
    )
    .expect("requested");
    let dx = matvec_backward(
        params.input_weights,
        &cache.input,
        &da,
        grads.input_weights,
        Some(grads.bias),
        want_input,
    );
    carry.hidden = dh_prev;
    carry.cell = dc_prev;
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{conv2d, lecun_uniform_init, tanh_scaled, SeededRng};

    fn scalar(v: f64) -> Tensor {
        Tensor::full(&[1, 1, 1], v)
    }

    fn kernel(v: f64) -> Tensor {
        Tensor::full(&[1, 1, 1, 1], v)
    }

    #[test]
    fn tau_one_is_a_plain_conv_layer() {
        let mut rng = SeededRng::new(1);
        let x = lecun_uniform_init(&mut rng, 1, &[2, 6, 6]);
        let k = lecun_uniform_init(&mut rng, 18, &[3, 2, 3, 3]);
        let b = lecun_uniform_init(&mut rng, 1, &[3]);
        let params = FeatureParams {
            tau: 1.0,
            kernels: &k,
            context_kernels: None,
            bias: &b,
            pad: 0,
        };
        let mut state = FeatureState {
            f_hat: lecun_uniform_init(&mut rng, 1, &[3, 4, 4]),
        };
        let y = feature_units_step(&x, None, &mut state, &params).unwrap();
        let stateless = tanh_scaled(&conv2d(&x, &k, &b, 1, 0).unwrap());
        assert!(y.max_abs_diff(&stateless) <= 1e-15);
    }

    #[test]
    fn zero_drive_decays_geometrically() {
        let k = kernel(0.0);
        let b = Tensor::zeros(&[1]);
        let params = FeatureParams {
            tau: 100.0,
            kernels: &k,
            context_kernels: None,
            bias: &b,
            pad: 0,
        };
        let mut state = FeatureState { f_hat: scalar(1.0) };
        for _ in 0..100 {
            feature_units_step(&scalar(0.3), None, &mut state, &params).unwrap();
        }
        assert!((state.f_hat.data()[0] - 0.99f64.powi(100)).abs() < 1e-12);
        assert!((state.f_hat.data()[0] - 0.36603).abs() < 1e-5);
    }

    #[test]
    fn scalar_feature_step() {
        let k = kernel(1.0);
        let b = Tensor::zeros(&[1]);
        let params = FeatureParams {
            tau: 2.0,
            kernels: &k,
            context_kernels: None,
            bias: &b,
            pad: 0,
        };
        let mut state = FeatureState { f_hat: scalar(1.0) };
        let y = feature_units_step(&scalar(0.5), None, &mut state, &params).unwrap();
        assert_eq!(state.f_hat.data()[0], 0.75);
        assert!((y.data()[0] - 0.79295).abs() < 1e-5);
    }

    #[test]
    fn scalar_context_step() {
        // Pool drive 1.0 through k̃ = 1; recurrent drive 0.5 from c^{t-1} = 0.5
        // through a 3×3 recurrent kernel whose centre is 1.
        let kc = kernel(1.0);
        let mut zr = Tensor::zeros(&[1, 1, 3, 3]);
        zr.data_mut()[4] = 1.0;
        let b = Tensor::zeros(&[1]);
        let params = ContextParams {
            tau: 2.0,
            kernels: &kc,
            recurrent: &zr,
            bias: &b,
        };
        let mut state = ContextState {
            c_hat: scalar(0.0),
            c_prev: scalar(0.5),
        };
        let c = context_units_step(&scalar(1.0), &mut state, &params).unwrap();
        assert_eq!(state.c_hat.data()[0], 0.75);
        assert!((c.data()[0] - 0.79295).abs() < 1e-5);
        assert_eq!(state.c_prev, c);
    }

    #[test]
    fn zero_recurrence_matches_feature_units() {
        let mut rng = SeededRng::new(4);
        let pool = lecun_uniform_init(&mut rng, 1, &[2, 5, 5]);
        let kc = lecun_uniform_init(&mut rng, 8, &[3, 2, 2, 2]);
        let b = lecun_uniform_init(&mut rng, 1, &[3]);
        let zr = Tensor::zeros(&[3, 3, 3, 3]);
        let cparams = ContextParams {
            tau: 2.0,
            kernels: &kc,
            recurrent: &zr,
            bias: &b,
        };
        let fparams = FeatureParams {
            tau: 2.0,
            kernels: &kc,
            context_kernels: None,
            bias: &b,
            pad: 0,
        };
        let mut cs = ContextState::zeros(&[3, 4, 4]);
        let mut fs = FeatureState::zeros(&[3, 4, 4]);
        for _ in 0..3 {
            let c = context_units_step(&pool, &mut cs, &cparams).unwrap();
            let f = feature_units_step(&pool, None, &mut fs, &fparams).unwrap();
            assert_eq!(c, f);
        }
    }

    #[test]
    fn rejects_non_3x3_recurrence() {
        let kc = kernel(1.0);
        let zr = Tensor::zeros(&[1, 1, 1, 1]);
        let b = Tensor::zeros(&[1]);
        let params = ContextParams {
            tau: 2.0,
            kernels: &kc,
            recurrent: &zr,
            bias: &b,
        };
        let mut state = ContextState::zeros(&[1, 1, 1]);
        assert!(context_units_step(&scalar(1.0), &mut state, &params).is_err());
    }

    #[test]
    fn rejects_tau_below_one() {
        let k = kernel(1.0);
        let b = Tensor::zeros(&[1]);
        let params = FeatureParams {
            tau: 0.5,
            kernels: &k,
            context_kernels: None,
            bias: &b,
            pad: 0,
        };
        let mut state = FeatureState::zeros(&[1, 1, 1]);
        assert!(feature_units_step(&scalar(1.0), None, &mut state, &params).is_err());
    }

    #[test]
    fn fc_matches_dot_products() {
        let mut rng = SeededRng::new(8);
        let w = lecun_uniform_init(&mut rng, 5, &[4, 5]);
        let b = lecun_uniform_init(&mut rng, 1, &[4]);
        let x: Vec<f64> = (0..5).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let y = fc_step(&x, &w, &b).unwrap();
        for r in 0..4 {
            let mut dot = b.data()[r];
            for c in 0..5 {
                dot += w.data()[r * 5 + c] * x[c];
            }
            assert!((y[r] - tanh_scaled_scalar(dot)).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_heads_are_uniform() {
        let heads = output_heads(&[0.4, -1.0], &Tensor::zeros(&[13, 2]), &Tensor::zeros(&[13]), &[4, 9])
            .unwrap();
        assert!(heads[0].iter().all(|&p| (p - 0.25).abs() < 1e-15));
        assert!(heads[1].iter().all(|&p| (p - 1.0 / 9.0).abs() < 1e-15));
    }

    #[test]
    fn identity_head_keeps_argmax() {
        let mut w = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        let heads = output_heads(&[0.0, 1.0, 0.0], &w, &Tensor::zeros(&[3]), &[3]).unwrap();
        let argmax = (0..3).max_by(|&a, &b| heads[0][a].total_cmp(&heads[0][b])).unwrap();
        assert_eq!(argmax, 1);
    }

    #[test]
    fn head_size_mismatch_is_rejected() {
        assert!(output_heads(&[1.0], &Tensor::zeros(&[5, 1]), &Tensor::zeros(&[5]), &[4, 2]).is_err());
    }

    fn lstm_params(rng: &mut SeededRng, x: usize, h: usize) -> (Tensor, Tensor, Tensor) {
        (
            lecun_uniform_init(rng, x, &[4 * h, x]),
            lecun_uniform_init(rng, h, &[4 * h, h]),
            lecun_uniform_init(rng, 1, &[4 * h]),
        )
    }

    #[test]
    fn lstm_saturated_gates_hold_cell() {
        let h = 3;
        let w = Tensor::zeros(&[4 * h, 2]);
        let u = Tensor::zeros(&[4 * h, h]);
        let mut b = Tensor::zeros(&[4 * h]);
        for j in 0..h {
            b.data_mut()[j] = -800.0; // input gate → 0
            b.data_mut()[h + j] = 800.0; // forget gate → 1
        }
        let params = LstmParams {
            input_weights: &w,
            recurrent_weights: &u,
            bias: &b,
        };
        let mut state = LstmState {
            hidden: vec![0.1, 0.2, 0.3],
            cell: vec![0.7, -0.4, 1.3],
        };
        lstm_step(&[0.5, -0.5], &mut state, &params).unwrap();
        assert_eq!(state.cell, vec![0.7, -0.4, 1.3]);
    }

    #[test]
    fn lstm_zero_params_zero_hidden() {
        let h = 4;
        let (w, u, b) = (
            Tensor::zeros(&[4 * h, 3]),
            Tensor::zeros(&[4 * h, h]),
            Tensor::zeros(&[4 * h]),
        );
        let params = LstmParams {
            input_weights: &w,
            recurrent_weights: &u,
            bias: &b,
        };
        let mut state = LstmState::zeros(h);
        let out = lstm_step(&[1.0, 2.0, 3.0], &mut state, &params).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_matches_unrolled_gates() {
        let mut rng = SeededRng::new(21);
        let (x_dim, h) = (3, 2);
        let (w, u, b) = lstm_params(&mut rng, x_dim, h);
        let params = LstmParams {
            input_weights: &w,
            recurrent_weights: &u,
            bias: &b,
        };
        let x = [0.3, -0.8, 0.5];
        let h0 = [0.2, -0.1];
        let c0 = [0.4, 0.9];
        let mut state = LstmState {
            hidden: h0.to_vec(),
            cell: c0.to_vec(),
        };
        let out = lstm_step(&x, &mut state, &params).unwrap();

        let pre = |row: usize| {
            let mut s = b.data()[row];
            for c in 0..x_dim {
                s += w.data()[row * x_dim + c] * x[c];
            }
            for c in 0..h {
                s += u.data()[row * h + c] * h0[c];
            }
            s
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        for j in 0..h {
            let i = sig(pre(j));
            let f = sig(pre(h + j));
            let o = sig(pre(2 * h + j));
            let g = pre(3 * h + j).tanh();
            let c = f * c0[j] + i * g;
            assert!((state.cell[j] - c).abs() <= 1e-12);
            assert!((out[j] - o * c.tanh()).abs() <= 1e-12);
        }
    }

    #[test]
    fn context_layer_zero_everything_is_zero() {
        let k = Tensor::zeros(&[2, 1, 3, 3]);
        let b = Tensor::zeros(&[2]);
        let kc = Tensor::zeros(&[2, 2, 2, 2]);
        let zr = Tensor::zeros(&[2, 2, 3, 3]);
        let fp = FeatureParams {
            tau: 2.0,
            kernels: &k,
            context_kernels: None,
            bias: &b,
            pad: 0,
        };
        let cp = ContextParams {
            tau: 2.0,
            kernels: &kc,
            recurrent: &zr,
            bias: &b,
        };
        let mut fs = FeatureState::zeros(&[2, 6, 6]);
        let mut cs = ContextState::zeros(&[2, 2, 2]);
        let out = context_layer_step(
            &Tensor::zeros(&[1, 8, 8]),
            None,
            &mut fs,
            Some(&mut cs),
            &fp,
            Some(&cp),
        )
        .unwrap();
        assert!(out.pool.data().iter().all(|&v| v == 0.0));
        assert!(out.context.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn context_layer_is_stateful_and_size_preserving() {
        let mut rng = SeededRng::new(12);
        let input = lecun_uniform_init(&mut rng, 1, &[1, 8, 8]);
        let params = LayerParams {
            tau: 2.0,
            pad: 0,
            feature_kernels: lecun_uniform_init(&mut rng, 9, &[2, 1, 3, 3]),
            feature_context_kernels: None,
            feature_bias: Tensor::zeros(&[2]),
            context_kernels: lecun_uniform_init(&mut rng, 8, &[2, 2, 2, 2]),
            recurrent_kernels: lecun_uniform_init(&mut rng, 18, &[2, 2, 3, 3]),
            context_bias: Tensor::zeros(&[2]),
        };
        let mut fs = FeatureState::zeros(&[2, 6, 6]);
        let mut cs = ContextState::zeros(&[2, 2, 2]);
        let mut outputs = Vec::new();
        for _ in 0..10 {
            let out = context_layer_step(
                &input,
                None,
                &mut fs,
                Some(&mut cs),
                &params.feature(),
                Some(&params.context()),
            )
            .unwrap();
            assert_eq!(out.context.as_ref().unwrap().shape(), &[2, 2, 2]);
            outputs.push(out);
        }
        assert_ne!(outputs[0].context, outputs[1].context);
        assert_ne!(outputs[0].pool, outputs[1].pool);
    }
}
