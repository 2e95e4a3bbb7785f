//! Delay-response objective and backpropagation through time.
//!
//! After the `T` video frames the network sees `d` black frames. Only the
//! outputs of those `d` steps are scored, each head against its one-hot
//! target by Kullback–Leibler divergence:
//!
//! ```text
//! E = Σ_{t=T+1}^{T+d} Σ_s Σ_n õ_sn · ln(õ_sn / oᵗ_sn)
//! ```
//!
//! With one-hot `õ` this is `Σ_t Σ_s −ln oᵗ_{s,correct}` (the `0·ln 0` terms
//! vanish), which is how it is computed. Gradients are exact reverse-mode
//! derivatives through the whole unrolled sequence.

use log::warn;

use crate::error::{Error, Result};
use crate::layers::{
    context_units_backward, fc_backward, feature_units_backward, heads_backward, lstm_backward,
    ContextCarry, ContextGrads, ContextParams, FeatureGrads, FeatureParams, LstmCarry, LstmGrads,
    LstmParams,
};
use crate::model::run::{unflatten, Dropout, Runner, Signal, StepCache};
use crate::model::{ForwardTrace, Model, StageLayout};
use crate::tensor::{
    conv2d_backward_input, conv2d_backward_kernels, maxpool2d_backward,
    tanh_scaled_grad_from_output, SeededRng, Tensor,
};

/// Correct category per head.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetLabels {
    indices: Vec<usize>,
}

impl TargetLabels {
    pub fn new(indices: Vec<usize>, head_sizes: &[usize]) -> Result<Self> {
        if indices.len() != head_sizes.len() {
            return Err(Error::shape(format!(
                "{} labels for {} heads",
                indices.len(),
                head_sizes.len()
            )));
        }
        if let Some((h, (&i, &n))) = indices
            .iter()
            .zip(head_sizes)
            .enumerate()
            .find(|(_, (&i, &n))| i >= n)
        {
            return Err(Error::shape(format!(
                "label {i} out of range for head {h} of size {n}"
            )));
        }
        Ok(TargetLabels { indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// One one-hot vector per head.
    pub fn one_hot(&self, head_sizes: &[usize]) -> Vec<Vec<f64>> {
        self.indices
            .iter()
            .zip(head_sizes)
            .map(|(&i, &n)| {
                let mut v = vec![0.0; n];
                v[i] = 1.0;
                v
            })
            .collect()
    }
}

/// One gradient tensor per model parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    tensors: Vec<Tensor>,
}

impl GradientBundle {
    pub fn zeros_for(model: &Model) -> Self {
        GradientBundle {
            tensors: model.params().iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn add_assign(&mut self, other: &GradientBundle) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::shape("gradient bundles of different models"));
        }
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.tensors.iter_mut().for_each(|t| t.scale(factor));
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

fn check_window(trace_len: usize, frames: usize, delay: usize) -> Result<()> {
    if trace_len < frames + delay {
        return Err(Error::shape(format!(
            "trace has {trace_len} steps, the delay window needs {}",
            frames + delay
        )));
    }
    Ok(())
}

/// Delay-window KL loss of a recorded trace.
pub fn kl_delay_loss(
    trace: &ForwardTrace,
    targets: &TargetLabels,
    frames: usize,
    delay: usize,
) -> Result<f64> {
    check_window(trace.len(), frames, delay)?;
    if delay == 0 {
        warn!("delay period is zero: the objective carries no learning signal");
    }
    let mut e = 0.0;
    for step in &trace.outputs[frames..frames + delay] {
        if step.len() != targets.indices.len() {
            return Err(Error::shape("trace and targets disagree on the head count"));
        }
        for (probs, &y) in step.iter().zip(&targets.indices) {
            e -= probs[y].ln();
        }
    }
    Ok(e)
}

/// Options for [`bptt`].
pub struct BpttOptions<'r> {
    pub delay: usize,
    /// Multiplies the loss (and therefore every gradient).
    pub loss_scale: f64,
    /// Dropout probability and its random stream, for training passes.
    pub dropout: Option<(f64, &'r mut SeededRng)>,
}

impl BpttOptions<'_> {
    pub fn eval(delay: usize) -> Self {
        BpttOptions {
            delay,
            loss_scale: 1.0,
            dropout: None,
        }
    }
}

/// Loss and exact gradients for one sequence, without dropout.
pub fn loss_and_gradients(
    model: &Model,
    frames: &[Tensor],
    targets: &TargetLabels,
    delay: usize,
) -> Result<(f64, GradientBundle)> {
    bptt(model, frames, targets, BpttOptions::eval(delay))
}

/// Forward pass keeping caches, then reverse sweep over all `T + d` steps.
pub fn bptt(
    model: &Model,
    frames: &[Tensor],
    targets: &TargetLabels,
    opts: BpttOptions,
) -> Result<(f64, GradientBundle)> {
    model.check_frames(frames)?;
    let heads = &model.spec().heads;
    let targets = TargetLabels::new(targets.indices.clone(), heads)?;
    let mut grads = GradientBundle::zeros_for(model);
    if opts.delay == 0 {
        warn!("delay period is zero: the objective carries no learning signal");
        return Ok((0.0, grads));
    }

    let mut dropout = opts.dropout.map(|(p, rng)| Dropout { p, rng });
    let mut runner = Runner::new(model, None)?;
    let black = model.black_frame();
    let steps = frames.len() + opts.delay;
    let mut caches: Vec<Vec<StepCache>> = Vec::with_capacity(steps);
    let mut loss = 0.0;
    for (t, frame) in frames
        .iter()
        .chain(std::iter::repeat_n(&black, opts.delay))
        .enumerate()
    {
        let mut cache = Vec::with_capacity(model.layouts().len());
        let out = runner.step(frame, dropout.as_mut(), Some(&mut cache))?;
        if t >= frames.len() {
            for (s, (probs, &y)) in out.heads.iter().zip(&targets.indices).enumerate() {
                let term = -probs[y].ln();
                if !term.is_finite() {
                    return Err(Error::NonFinite(format!("loss of head {s} at step {t}")));
                }
                loss += term;
            }
        }
        caches.push(cache);
    }

    backward(model, &caches, frames.len(), &targets, opts.loss_scale, &mut grads)?;
    for (g, info) in grads.tensors.iter().zip(model.param_info()) {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", info.name)));
        }
    }
    Ok((opts.loss_scale * loss, grads))
}

enum Carry {
    None,
    Feature(Tensor),
    Context(Tensor, ContextCarry),
    Lstm(LstmCarry),
}

fn disjoint<const N: usize>(grads: &mut [Tensor], idx: [usize; N]) -> [&mut Tensor; N] {
    grads
        .get_disjoint_mut(idx)
        .expect("parameter slots are distinct")
}

fn feature_grads<'a>(grads: &'a mut [Tensor], k: usize, z: Option<usize>, b: usize) -> FeatureGrads<'a> {
    match z {
        Some(z) => {
            let [gk, gz, gb] = disjoint(grads, [k, z, b]);
            FeatureGrads {
                kernels: gk,
                context_kernels: Some(gz),
                bias: gb,
            }
        }
        None => {
            let [gk, gb] = disjoint(grads, [k, b]);
            FeatureGrads {
                kernels: gk,
                context_kernels: None,
                bias: gb,
            }
        }
    }
}

fn maps_grad(g: &Option<Signal>) -> (Option<&Tensor>, Option<&Tensor>) {
    match g {
        Some(Signal::Maps { main, context }) => (Some(main), context.as_ref()),
        _ => (None, None),
    }
}

fn backward(
    model: &Model,
    caches: &[Vec<StepCache>],
    window_start: usize,
    targets: &TargetLabels,
    loss_scale: f64,
    grads: &mut GradientBundle,
) -> Result<()> {
    let layouts = model.layouts();
    let params = model.params();
    let heads = &model.spec().heads;
    let one_hot: Vec<f64> = targets.one_hot(heads).concat();
    let grads = &mut grads.tensors[..];
    let mut carries: Vec<Carry> = layouts
        .iter()
        .map(|l| match l {
            StageLayout::Leaky { out, .. } => Carry::Feature(Tensor::zeros(out)),
            StageLayout::Context {
                features, context, ..
            } => Carry::Context(Tensor::zeros(features), ContextCarry::zeros(context)),
            StageLayout::Lstm { hidden, .. } => Carry::Lstm(LstmCarry::zeros(*hidden)),
            _ => Carry::None,
        })
        .collect();

    for t in (0..caches.len()).rev() {
        let mut g: Option<Signal> = None;
        for s in (0..layouts.len()).rev() {
            let want_input = s > 0;
            g = match (&layouts[s], &caches[t][s], &mut carries[s]) {
                (&StageLayout::Heads { w, b, ref input }, StepCache::Heads { input: x, probs }, _) => {
                    if t < window_start {
                        None
                    } else {
                        let d: Vec<f64> = probs
                            .concat()
                            .iter()
                            .zip(&one_hot)
                            .map(|(o, y)| loss_scale * (o - y))
                            .collect();
                        let [gw, gb] = disjoint(grads, [w, b]);
                        heads_backward(x, &d, &params[w], gw, gb, want_input)
                            .map(|dx| unflatten(input, dx))
                            .transpose()?
                    }
                }
                (
                    &StageLayout::Fc { w, b, ref input },
                    StepCache::Fc {
                        input: x,
                        output,
                        mask,
                    },
                    _,
                ) => match g {
                    Some(Signal::Vector(mut gv)) => {
                        if let Some(m) = mask {
                            gv.iter_mut().zip(m).for_each(|(v, s)| *v *= s);
                        }
                        let [gw, gb] = disjoint(grads, [w, b]);
                        fc_backward(x, output, &gv, &params[w], gw, gb, want_input)
                            .map(|dx| unflatten(input, dx))
                            .transpose()?
                    }
                    _ => None,
                },
                (&StageLayout::Lstm { w, u, b, ref input, .. }, StepCache::Lstm(cache), Carry::Lstm(carry)) => {
                    let gh = match &g {
                        Some(Signal::Vector(v)) => Some(v.as_slice()),
                        _ => None,
                    };
                    let lp = LstmParams {
                        input_weights: &params[w],
                        recurrent_weights: &params[u],
                        bias: &params[b],
                    };
                    let [gw, gu, gb] = disjoint(grads, [w, u, b]);
                    let lg = LstmGrads {
                        input_weights: gw,
                        recurrent_weights: gu,
                        bias: gb,
                    };
                    lstm_backward(gh, cache, &lp, carry, lg, want_input)
                        .map(|dx| unflatten(input, dx))
                        .transpose()?
                }
                (
                    &StageLayout::Conv {
                        w, b, stride, pad, ..
                    },
                    StepCache::Conv { input, output },
                    _,
                ) => match maps_grad(&g).0 {
                    Some(gy) => {
                        let mut dz = gy.clone();
                        for (d, &y) in dz.data_mut().iter_mut().zip(output.data()) {
                            *d *= tanh_scaled_grad_from_output(y);
                        }
                        let [gw, gb] = disjoint(grads, [w, b]);
                        conv2d_backward_kernels(input, &dz, stride, pad, gw)?;
                        let plane = dz.len() / gb.len();
                        for (chunk, g) in dz.data().chunks(plane).zip(gb.data_mut()) {
                            *g += chunk.iter().sum::<f64>();
                        }
                        if want_input {
                            let mut gx = Tensor::zeros(input.shape());
                            conv2d_backward_input(&dz, &params[w], stride, pad, &mut gx)?;
                            Some(Signal::Maps {
                                main: gx,
                                context: None,
                            })
                        } else {
                            None
                        }
                    }
                    None => None,
                },
                (StageLayout::Pool { .. }, StepCache::Pool { args }, _) => match maps_grad(&g).0 {
                    Some(gy) => Some(Signal::Maps {
                        main: maxpool2d_backward(gy, args)?,
                        context: None,
                    }),
                    None => None,
                },
                (
                    &StageLayout::Leaky {
                        k, z, b, pad, tau, ..
                    },
                    StepCache::Leaky {
                        pool_in,
                        ctx_in,
                        output,
                    },
                    Carry::Feature(carry),
                ) => {
                    let fp = FeatureParams {
                        tau,
                        kernels: &params[k],
                        context_kernels: z.map(|z| &params[z]),
                        bias: &params[b],
                        pad,
                    };
                    let inputs = feature_units_backward(
                        maps_grad(&g).0,
                        output,
                        pool_in,
                        ctx_in.as_ref(),
                        &fp,
                        carry,
                        feature_grads(grads, k, z, b),
                        want_input,
                    )?;
                    inputs.prev_pool.map(|main| Signal::Maps {
                        main,
                        context: inputs.prev_context,
                    })
                }
                (
                    &StageLayout::Context {
                        k,
                        z,
                        b,
                        pad,
                        tau,
                        kc,
                        zr,
                        bc,
                        ..
                    },
                    StepCache::Context {
                        pool_in,
                        ctx_in,
                        features,
                        args,
                        pool,
                        c_prev,
                        c,
                    },
                    Carry::Context(feature_carry, context_carry),
                ) => {
                    let (g_pool, g_ctx) = maps_grad(&g);
                    let cp = ContextParams {
                        tau,
                        kernels: &params[kc],
                        recurrent: &params[zr],
                        bias: &params[bc],
                    };
                    let [gkc, gzr, gbc] = disjoint(grads, [kc, zr, bc]);
                    let mut d_pool = context_units_backward(
                        g_ctx,
                        c,
                        c_prev,
                        pool,
                        &cp,
                        context_carry,
                        ContextGrads {
                            kernels: gkc,
                            recurrent: gzr,
                            bias: gbc,
                        },
                    )?;
                    if let Some(gp) = g_pool {
                        d_pool.add_assign(gp)?;
                    }
                    let d_features = maxpool2d_backward(&d_pool, args)?;
                    let fp = FeatureParams {
                        tau,
                        kernels: &params[k],
                        context_kernels: z.map(|z| &params[z]),
                        bias: &params[b],
                        pad,
                    };
                    let inputs = feature_units_backward(
                        Some(&d_features),
                        features,
                        pool_in,
                        ctx_in.as_ref(),
                        &fp,
                        feature_carry,
                        feature_grads(grads, k, z, b),
                        want_input,
                    )?;
                    inputs.prev_pool.map(|main| Signal::Maps {
                        main,
                        context: inputs.prev_context,
                    })
                }
                _ => unreachable!("cache matches its layout"),
            };
        }
    }
    Ok(())
}

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_relative_error: f64,
    /// Parameter tensor name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

impl FdReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error <= tolerance
    }
}

/// Deterministic subsample of `(tensor, index)` pairs touching every
/// parameter tensor, at least `min_total` entries when the model has that many.
pub fn sample_parameter_indices(model: &Model, min_total: usize) -> Vec<(usize, usize)> {
    let lens: Vec<usize> = model.params().iter().map(Tensor::len).collect();
    let total: usize = lens.iter().sum();
    let target = min_total.min(total);
    let mut quota = min_total.div_ceil(lens.len().max(1)).max(1);
    while lens.iter().map(|&n| n.min(quota)).sum::<usize>() < target {
        quota += 1;
    }
    let mut picks = Vec::new();
    for (t, &n) in lens.iter().enumerate() {
        let q = n.min(quota);
        for j in 0..q {
            let idx = if q == n { j } else { j * (n - 1) / (q - 1).max(1) };
            picks.push((t, idx));
        }
    }
    picks
}

/// Compares `analytic` with `(E(θ+h) − E(θ−h)) / 2h` on a parameter subsample.
///
/// The relative error of an entry is `|fd − g| / max(|g|, 1e-8)`.
pub fn compare_with_finite_differences(
    model: &Model,
    frames: &[Tensor],
    targets: &TargetLabels,
    delay: usize,
    h: f64,
    analytic: &GradientBundle,
) -> Result<FdReport> {
    let mut probe = model.clone();
    let loss_at = |m: &Model| -> Result<f64> {
        let trace = m.forward_sequence(frames, delay, None)?;
        kl_delay_loss(&trace, targets, frames.len(), delay)
    };
    let picks = sample_parameter_indices(model, 200);
    let mut report = FdReport {
        max_relative_error: 0.0,
        worst: None,
        checked: picks.len(),
    };
    for &(t, i) in &picks {
        let original = probe.params()[t].data()[i];
        probe.params_mut()[t].data_mut()[i] = original + h;
        let plus = loss_at(&probe)?;
        probe.params_mut()[t].data_mut()[i] = original - h;
        let minus = loss_at(&probe)?;
        probe.params_mut()[t].data_mut()[i] = original;
        let fd = (plus - minus) / (2.0 * h);
        let g = analytic.tensors()[t].data()[i];
        let rel = (fd - g).abs() / g.abs().max(1e-8);
        if rel > report.max_relative_error || report.worst.is_none() {
            report.max_relative_error = report.max_relative_error.max(rel);
            if rel >= report.max_relative_error {
                report.worst = Some((model.param_info()[t].name.clone(), i));
            }
        }
    }
    Ok(report)
}

/// Gradient check of [`loss_and_gradients`] against central differences.
pub fn finite_difference_check(
    model: &Model,
    frames: &[Tensor],
    targets: &TargetLabels,
    delay: usize,
    h: f64,
) -> Result<FdReport> {
    let (_, analytic) = loss_and_gradients(model, frames, targets, delay)?;
    compare_with_finite_differences(model, frames, targets, delay, h, &analytic)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_trace(steps: usize, sizes: &[usize]) -> ForwardTrace {
        ForwardTrace {
            outputs: (0..steps)
                .map(|_| sizes.iter().map(|&n| vec![1.0 / n as f64; n]).collect())
                .collect(),
            recorded: None,
        }
    }

    #[test]
    fn perfect_outputs_cost_nothing() {
        let targets = TargetLabels::new(vec![2, 0], &[3, 2]).unwrap();
        let trace = ForwardTrace {
            outputs: vec![targets.one_hot(&[3, 2]); 4],
            recorded: None,
        };
        assert_eq!(kl_delay_loss(&trace, &targets, 2, 2).unwrap(), 0.0);
    }

    #[test]
    fn uniform_outputs_cost_log_n_per_step() {
        let t27 = TargetLabels::new(vec![5], &[27]).unwrap();
        let e = kl_delay_loss(&uniform_trace(10, &[27]), &t27, 5, 5).unwrap();
        assert!((e - 5.0 * 27f64.ln()).abs() <= 1e-10);
        assert!((e - 16.479).abs() < 1e-3);

        let t = TargetLabels::new(vec![1, 8], &[4, 9]).unwrap();
        let e = kl_delay_loss(&uniform_trace(3, &[4, 9]), &t, 2, 1).unwrap();
        assert!((e - (4f64.ln() + 9f64.ln())).abs() <= 1e-10);
        assert!((e - 3.583).abs() < 1e-3);
    }

    #[test]
    fn outputs_before_the_window_are_ignored() {
        let t = TargetLabels::new(vec![0], &[3]).unwrap();
        let mut trace = uniform_trace(6, &[3]);
        let base = kl_delay_loss(&trace, &t, 4, 2).unwrap();
        for step in &mut trace.outputs[..4] {
            step[0] = vec![0.01, 0.01, 0.98];
        }
        assert_eq!(kl_delay_loss(&trace, &t, 4, 2).unwrap(), base);
    }

    #[test]
    fn zero_delay_has_zero_loss() {
        let t = TargetLabels::new(vec![0], &[3]).unwrap();
        assert_eq!(kl_delay_loss(&uniform_trace(4, &[3]), &t, 4, 0).unwrap(), 0.0);
    }

    #[test]
    fn short_trace_rejected() {
        let t = TargetLabels::new(vec![0], &[3]).unwrap();
        assert!(kl_delay_loss(&uniform_trace(4, &[3]), &t, 3, 2).is_err());
    }

    #[test]
    fn labels_validated() {
        assert!(TargetLabels::new(vec![4], &[4]).is_err());
        assert!(TargetLabels::new(vec![1], &[4, 9]).is_err());
        let t = TargetLabels::new(vec![1, 3], &[2, 4]).unwrap();
        assert_eq!(t.one_hot(&[2, 4]), vec![vec![0.0, 1.0], vec![0.0, 0.0, 0.0, 1.0]]);
    }
}
