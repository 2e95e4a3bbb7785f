//! Step-by-step execution of a model, optionally keeping what BPTT needs.

use super::{Feed, Model, StageLayout};
use crate::error::{Error, Result};
use crate::layers::{
    context_layer_step, fc_step, feature_units_step, lstm_step_cached, output_heads, ContextParams,
    ContextState, FeatureParams, FeatureState, LstmCache, LstmParams, LstmState,
};
use crate::training::dropout_mask;
use crate::tensor::{conv2d, maxpool2d, tanh_scaled, ArgIndices, SeededRng, Tensor};

/// Activations passed between stages.
#[derive(Clone, Debug)]
pub(crate) enum Signal {
    Maps {
        main: Tensor,
        context: Option<Tensor>,
    },
    Vector(Vec<f64>),
}

impl Signal {
    pub(crate) fn flatten(&self) -> Vec<f64> {
        match self {
            Signal::Maps { main, context } => {
                let mut v = main.data().to_vec();
                if let Some(c) = context {
                    v.extend_from_slice(c.data());
                }
                v
            }
            Signal::Vector(v) => v.clone(),
        }
    }

    fn maps(&self) -> Result<(&Tensor, Option<&Tensor>)> {
        match self {
            Signal::Maps { main, context } => Ok((main, context.as_ref())),
            Signal::Vector(_) => Err(Error::shape("stage expects spatial maps")),
        }
    }
}

/// Splits a flat gradient back into the shape of `feed`.
pub(crate) fn unflatten(feed: &Feed, flat: Vec<f64>) -> Result<Signal> {
    match *feed {
        Feed::Vector(_) => Ok(Signal::Vector(flat)),
        Feed::Maps { main, context } => {
            let n: usize = main.iter().product();
            let mut flat = flat;
            let ctx = context
                .map(|c| Tensor::from_vec(&c, flat.split_off(n)))
                .transpose()?;
            Ok(Signal::Maps {
                main: Tensor::from_vec(&main, flat)?,
                context: ctx,
            })
        }
    }
}

pub(crate) enum StageState {
    Stateless,
    Feature(FeatureState),
    Context(FeatureState, ContextState),
    Lstm(LstmState),
}

/// Per-stage values of one forward step kept for the backward pass.
pub(crate) enum StepCache {
    Conv {
        input: Tensor,
        output: Tensor,
    },
    Pool {
        args: ArgIndices,
    },
    Leaky {
        pool_in: Tensor,
        ctx_in: Option<Tensor>,
        output: Tensor,
    },
    Context {
        pool_in: Tensor,
        ctx_in: Option<Tensor>,
        features: Tensor,
        args: ArgIndices,
        pool: Tensor,
        c_prev: Tensor,
        c: Tensor,
    },
    Lstm(LstmCache),
    Fc {
        input: Vec<f64>,
        output: Vec<f64>,
        /// Per-unit multiplier (0 or 1/(1−p)) applied after the activation.
        mask: Option<Vec<f64>>,
    },
    Heads {
        input: Vec<f64>,
        probs: Vec<Vec<f64>>,
    },
}

/// Dropout applied to fully-connected activations during training.
pub(crate) struct Dropout<'r> {
    pub p: f64,
    pub rng: &'r mut SeededRng,
}

pub(crate) struct StepOutput {
    pub heads: Vec<Vec<f64>>,
    pub recorded: Option<Vec<f64>>,
}

pub(crate) struct Runner<'m> {
    model: &'m Model,
    states: Vec<StageState>,
    record: Option<usize>,
}

impl<'m> Runner<'m> {
    pub(crate) fn new(model: &'m Model, record: Option<usize>) -> Result<Self> {
        if let Some(r) = record {
            if r >= model.layouts().len() {
                return Err(Error::config(format!(
                    "cannot record stage {r}: the model has stages 0..={}",
                    model.layouts().len() - 1
                )));
            }
        }
        let states = model
            .layouts()
            .iter()
            .map(|l| match l {
                StageLayout::Leaky { out, .. } => StageState::Feature(FeatureState::zeros(out)),
                StageLayout::Context {
                    features, context, ..
                } => StageState::Context(FeatureState::zeros(features), ContextState::zeros(context)),
                StageLayout::Lstm { hidden, .. } => StageState::Lstm(LstmState::zeros(*hidden)),
                _ => StageState::Stateless,
            })
            .collect();
        Ok(Runner {
            model,
            states,
            record,
        })
    }

    /// Advances every stage by one frame.
    pub(crate) fn step(
        &mut self,
        frame: &Tensor,
        mut dropout: Option<&mut Dropout>,
        mut caches: Option<&mut Vec<StepCache>>,
    ) -> Result<StepOutput> {
        let params = self.model.params();
        let mut signal = Signal::Maps {
            main: frame.clone(),
            context: None,
        };
        let mut recorded = None;
        let mut heads = Vec::new();
        for (i, (layout, state)) in self
            .model
            .layouts()
            .iter()
            .zip(self.states.iter_mut())
            .enumerate()
        {
            let keep = caches.is_some();
            let (next, cache) = match (layout, state) {
                (
                    &StageLayout::Conv {
                        w, b, stride, pad, ..
                    },
                    _,
                ) => {
                    let (x, _) = signal.maps()?;
                    let y = tanh_scaled(&conv2d(x, &params[w], &params[b], stride, pad)?);
                    let cache = keep.then(|| StepCache::Conv {
                        input: x.clone(),
                        output: y.clone(),
                    });
                    (
                        Signal::Maps {
                            main: y,
                            context: None,
                        },
                        cache,
                    )
                }
                (StageLayout::Pool { .. }, _) => {
                    let (x, _) = signal.maps()?;
                    let (y, args) = maxpool2d(x)?;
                    (
                        Signal::Maps {
                            main: y,
                            context: None,
                        },
                        keep.then_some(StepCache::Pool { args }),
                    )
                }
                (
                    &StageLayout::Leaky {
                        k, z, b, pad, tau, ..
                    },
                    StageState::Feature(fs),
                ) => {
                    let fp = FeatureParams {
                        tau,
                        kernels: &params[k],
                        context_kernels: z.map(|z| &params[z]),
                        bias: &params[b],
                        pad,
                    };
                    let (p, c) = signal.maps()?;
                    let y = feature_units_step(p, c, fs, &fp)?;
                    let cache = keep.then(|| StepCache::Leaky {
                        pool_in: p.clone(),
                        ctx_in: c.cloned(),
                        output: y.clone(),
                    });
                    (
                        Signal::Maps {
                            main: y,
                            context: None,
                        },
                        cache,
                    )
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
                    StageState::Context(fs, cs),
                ) => {
                    let fp = FeatureParams {
                        tau,
                        kernels: &params[k],
                        context_kernels: z.map(|z| &params[z]),
                        bias: &params[b],
                        pad,
                    };
                    let cp = ContextParams {
                        tau,
                        kernels: &params[kc],
                        recurrent: &params[zr],
                        bias: &params[bc],
                    };
                    let (p, c) = signal.maps()?;
                    let c_prev = keep.then(|| cs.c_prev.clone());
                    let out = context_layer_step(p, c, fs, Some(cs), &fp, Some(&cp))?;
                    let ctx = out.context.expect("context units present");
                    let cache = c_prev.map(|c_prev| StepCache::Context {
                        pool_in: p.clone(),
                        ctx_in: c.cloned(),
                        features: out.features,
                        args: out.pool_args,
                        pool: out.pool.clone(),
                        c_prev,
                        c: ctx.clone(),
                    });
                    (
                        Signal::Maps {
                            main: out.pool,
                            context: Some(ctx),
                        },
                        cache,
                    )
                }
                (&StageLayout::Lstm { w, u, b, .. }, StageState::Lstm(ls)) => {
                    let lp = LstmParams {
                        input_weights: &params[w],
                        recurrent_weights: &params[u],
                        bias: &params[b],
                    };
                    let (h, cache) = lstm_step_cached(&signal.flatten(), ls, &lp)?;
                    (Signal::Vector(h), keep.then_some(StepCache::Lstm(cache)))
                }
                (&StageLayout::Fc { w, b, .. }, _) => {
                    let x = signal.flatten();
                    let y = fc_step(&x, &params[w], &params[b])?;
                    let mask = dropout.as_deref_mut().and_then(|d| {
                        (d.p > 0.0).then(|| dropout_mask(y.len(), d.p, d.rng))
                    });
                    if self.record == Some(i) {
                        recorded = Some(y.clone());
                    }
                    let dropped = match &mask {
                        Some(m) => y.iter().zip(m).map(|(v, s)| v * s).collect(),
                        None => y.clone(),
                    };
                    let cache = keep.then(|| StepCache::Fc {
                        input: x,
                        output: y,
                        mask,
                    });
                    (Signal::Vector(dropped), cache)
                }
                (&StageLayout::Heads { w, b, .. }, _) => {
                    let x = signal.flatten();
                    heads = output_heads(&x, &params[w], &params[b], &self.model.spec().heads)?;
                    if self.record == Some(i) {
                        recorded = Some(heads.concat());
                    }
                    let cache = keep.then(|| StepCache::Heads {
                        input: x,
                        probs: heads.clone(),
                    });
                    (Signal::Vector(Vec::new()), cache)
                }
                _ => unreachable!("stage state matches its layout"),
            };
            if self.record == Some(i) && recorded.is_none() {
                recorded = Some(match &next {
                    Signal::Maps {
                        context: Some(c), ..
                    } => c.data().to_vec(),
                    other => other.flatten(),
                });
            }
            if let (Some(cs), Some(c)) = (caches.as_deref_mut(), cache) {
                cs.push(c);
            }
            signal = next;
        }
        Ok(StepOutput { heads, recorded })
    }
}
