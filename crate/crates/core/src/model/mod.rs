//! Model assembly: shape-checks a [`ModelSpec`], allocates its parameters
//! and runs whole sequences (video frames followed by black delay frames).

mod checkpoint;
pub(crate) mod run;
mod spec;

pub use checkpoint::{
    load_checkpoint, read_tensor_file, save_checkpoint, write_tensor_file, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use spec::{InputShape, ModelKind, ModelSpec, PresetOptions, StageSpec};

use crate::error::{Error, Result};
use crate::layers::{RECURRENT_KERNEL, RECURRENT_PAD};
use crate::tensor::{conv_output_extent, lecun_uniform_init, pool_output_extent, SeededRng, Tensor};

/// Pixel value of a black frame after mapping bytes to `[−1, 1]`.
pub const BLACK_LEVEL: f64 = -1.0;

/// Initial forget-gate bias of LSTM stages. Zero would halve the cell
/// memory at every step of an untrained network.
pub const LSTM_FORGET_BIAS: f64 = 1.0;

/// What flows from one stage into the next.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Feed {
    Maps {
        main: [usize; 3],
        context: Option<[usize; 3]>,
    },
    Vector(usize),
}

impl Feed {
    pub(crate) fn flat_len(&self) -> usize {
        match *self {
            Feed::Maps { main, context } => {
                main.iter().product::<usize>() + context.map_or(0, |c| c.iter().product())
            }
            Feed::Vector(n) => n,
        }
    }
}

/// Resolved stage with parameter slots and tensor extents.
#[derive(Clone, Debug)]
pub(crate) enum StageLayout {
    Conv {
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
        out: [usize; 3],
    },
    Pool {
        out: [usize; 3],
    },
    Leaky {
        k: usize,
        z: Option<usize>,
        b: usize,
        pad: usize,
        tau: f64,
        out: [usize; 3],
    },
    Context {
        k: usize,
        z: Option<usize>,
        b: usize,
        pad: usize,
        tau: f64,
        features: [usize; 3],
        kc: usize,
        zr: usize,
        bc: usize,
        context: [usize; 3],
    },
    Lstm {
        w: usize,
        u: usize,
        b: usize,
        hidden: usize,
        input: Feed,
    },
    Fc {
        w: usize,
        b: usize,
        input: Feed,
    },
    Heads {
        w: usize,
        b: usize,
        input: Feed,
    },
}

/// Name, owner and role of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub stage: usize,
    pub shape: Vec<usize>,
    pub fan_in: usize,
    pub is_bias: bool,
}

struct Planner {
    infos: Vec<ParamInfo>,
}

impl Planner {
    fn add(&mut self, stage: usize, label: &str, role: &str, shape: &[usize], fan_in: usize) -> usize {
        self.infos.push(ParamInfo {
            name: format!("stage {stage} ({label}) {role}"),
            stage,
            shape: shape.to_vec(),
            fan_in: fan_in.max(1),
            is_bias: false,
        });
        self.infos.len() - 1
    }

    fn add_bias(&mut self, stage: usize, label: &str, role: &str, len: usize) -> usize {
        let i = self.add(stage, label, role, &[len], 1);
        self.infos[i].is_bias = true;
        i
    }
}

fn stage_error(index: usize, label: &str, message: impl Into<String>) -> Error {
    Error::Stage {
        index,
        stage: label.to_string(),
        message: message.into(),
    }
}

/// Resolves every stage's extents and parameter shapes.
pub(crate) fn plan(spec: &ModelSpec) -> Result<(Vec<StageLayout>, Vec<ParamInfo>)> {
    spec::validate_basic(spec)?;
    let mut p = Planner { infos: Vec::new() };
    let mut layouts = Vec::with_capacity(spec.stages.len() + 1);
    let mut feed = Feed::Maps {
        main: spec.input.dims(),
        context: None,
    };
    for (i, stage) in spec.stages.iter().enumerate() {
        let label = stage.label();
        let err = |m: String| stage_error(i, label, m);
        let maps_only = |feed: Feed| match feed {
            Feed::Maps {
                main,
                context: None,
            } => Ok(main),
            Feed::Maps { .. } => Err(err(
                "cannot consume context units; follow a context layer with a context layer, leaky conv, lstm or fc".into(),
            )),
            Feed::Vector(_) => Err(err("needs spatial maps but receives a vector".into())),
        };
        let conv_extent = |input: [usize; 3], kernel: [usize; 2], stride: usize, pad: usize| {
            match (
                conv_output_extent(input[1], kernel[0], stride, pad),
                conv_output_extent(input[2], kernel[1], stride, pad),
            ) {
                (Some(h), Some(w)) => Ok([h, w]),
                _ => Err(err(format!(
                    "{}×{} kernel (stride {stride}, pad {pad}) leaves no output on a {}×{} input",
                    kernel[0], kernel[1], input[1], input[2]
                ))),
            }
        };
        let positive = |n: usize, what: &str| {
            if n == 0 {
                Err(err(format!("{what} must be positive")))
            } else {
                Ok(())
            }
        };
        let check_tau = |tau: f64| {
            if tau.is_finite() && tau >= 1.0 {
                Ok(())
            } else {
                Err(err(format!("time constant must be ≥ 1, got {tau}")))
            }
        };
        // Feature units of a leaky conv or context layer: k over the main
        // maps, z over incoming context maps.
        let feature_units = |p: &mut Planner,
                                 feed: Feed,
                                 maps: usize,
                                 kernel: [usize; 2],
                                 pad: usize|
         -> Result<(usize, Option<usize>, usize, [usize; 3])> {
            let Feed::Maps { main, context } = feed else {
                return Err(err("needs spatial maps but receives a vector".into()));
            };
            let [oh, ow] = conv_extent(main, kernel, 1, pad)?;
            let mut fan_in = main[0] * kernel[0] * kernel[1];
            let z_kernel = [kernel[0].saturating_sub(1), kernel[1].saturating_sub(1)];
            if let Some(ctx) = context {
                if z_kernel.contains(&0) {
                    return Err(err("kernels must be at least 2×2 to read context maps".into()));
                }
                let [ch, cw] = conv_extent(ctx, z_kernel, 1, pad)?;
                if (ch, cw) != (oh, ow) {
                    return Err(err(format!(
                        "context input {}×{} maps to {ch}×{cw}, pooling input maps to {oh}×{ow}",
                        ctx[1], ctx[2]
                    )));
                }
                fan_in += ctx[0] * z_kernel[0] * z_kernel[1];
            }
            let k = p.add(i, label, "feature kernels k", &[maps, main[0], kernel[0], kernel[1]], fan_in);
            let z = context.map(|ctx| {
                p.add(i, label, "context-input kernels z", &[maps, ctx[0], z_kernel[0], z_kernel[1]], fan_in)
            });
            let b = p.add_bias(i, label, "feature bias b", maps);
            Ok((k, z, b, [maps, oh, ow]))
        };

        let layout = match *stage {
            StageSpec::Conv {
                maps,
                kernel,
                stride,
                pad,
            } => {
                positive(maps, "map count")?;
                positive(stride, "stride")?;
                let input = maps_only(feed)?;
                let [oh, ow] = conv_extent(input, kernel, stride, pad)?;
                let fan_in = input[0] * kernel[0] * kernel[1];
                let w = p.add(i, label, "kernels", &[maps, input[0], kernel[0], kernel[1]], fan_in);
                let b = p.add_bias(i, label, "bias", maps);
                let out = [maps, oh, ow];
                feed = Feed::Maps {
                    main: out,
                    context: None,
                };
                StageLayout::Conv {
                    w,
                    b,
                    stride,
                    pad,
                    out,
                }
            }
            StageSpec::Pool => {
                let input = maps_only(feed)?;
                let out = [input[0], pool_output_extent(input[1]), pool_output_extent(input[2])];
                feed = Feed::Maps {
                    main: out,
                    context: None,
                };
                StageLayout::Pool { out }
            }
            StageSpec::LeakyConv {
                maps,
                kernel,
                pad,
                tau,
            } => {
                positive(maps, "map count")?;
                check_tau(tau)?;
                let (k, z, b, out) = feature_units(&mut p, feed, maps, kernel, pad)?;
                feed = Feed::Maps {
                    main: out,
                    context: None,
                };
                StageLayout::Leaky {
                    k,
                    z,
                    b,
                    pad,
                    tau,
                    out,
                }
            }
            StageSpec::ContextLayer {
                feature_maps,
                context_maps,
                kernel,
                pad,
                tau,
            } => {
                positive(feature_maps, "feature map count")?;
                positive(context_maps, "context map count")?;
                check_tau(tau)?;
                let (k, z, b, features) = feature_units(&mut p, feed, feature_maps, kernel, pad)?;
                let pool = [
                    feature_maps,
                    pool_output_extent(features[1]),
                    pool_output_extent(features[2]),
                ];
                if pool[1] < 2 || pool[2] < 2 {
                    return Err(err(format!(
                        "pooled maps are {}×{}; context units need at least 2×2",
                        pool[1], pool[2]
                    )));
                }
                let context = [context_maps, pool[1] - 1, pool[2] - 1];
                let fan_in = feature_maps * 4 + context_maps * RECURRENT_KERNEL * RECURRENT_KERNEL;
                let kc = p.add(i, label, "context kernels k̃", &[context_maps, feature_maps, 2, 2], fan_in);
                let zr = p.add(
                    i,
                    label,
                    "recurrent kernels z̃",
                    &[context_maps, context_maps, RECURRENT_KERNEL, RECURRENT_KERNEL],
                    fan_in,
                );
                let bc = p.add_bias(i, label, "context bias b̃", context_maps);
                debug_assert_eq!(RECURRENT_PAD, 1);
                feed = Feed::Maps {
                    main: pool,
                    context: Some(context),
                };
                StageLayout::Context {
                    k,
                    z,
                    b,
                    pad,
                    tau,
                    features,
                    kc,
                    zr,
                    bc,
                    context,
                }
            }
            StageSpec::Lstm { hidden } => {
                positive(hidden, "hidden size")?;
                let x = feed.flat_len();
                let w = p.add(i, label, "input weights", &[4 * hidden, x], x + hidden);
                let u = p.add(i, label, "recurrent weights", &[4 * hidden, hidden], x + hidden);
                let b = p.add_bias(i, label, "gate bias", 4 * hidden);
                let input = feed;
                feed = Feed::Vector(hidden);
                StageLayout::Lstm {
                    w,
                    u,
                    b,
                    hidden,
                    input,
                }
            }
            StageSpec::Fc { units } => {
                positive(units, "unit count")?;
                let x = feed.flat_len();
                let w = p.add(i, label, "weights", &[units, x], x);
                let b = p.add_bias(i, label, "bias", units);
                let input = feed;
                feed = Feed::Vector(units);
                StageLayout::Fc { w, b, input }
            }
        };
        layouts.push(layout);
    }
    let i = spec.stages.len();
    let total: usize = spec.heads.iter().sum();
    let x = feed.flat_len();
    let w = p.add(i, "heads", "weights", &[total, x], x);
    let b = p.add_bias(i, "heads", "bias", total);
    layouts.push(StageLayout::Heads { w, b, input: feed });
    Ok((layouts, p.infos))
}

/// Parameter count of a spec without allocating it.
pub fn count_spec_parameters(spec: &ModelSpec) -> Result<usize> {
    let (_, infos) = plan(spec)?;
    Ok(infos.iter().map(|i| i.shape.iter().product::<usize>()).sum())
}

#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    layouts: Vec<StageLayout>,
    params: Vec<Tensor>,
    info: Vec<ParamInfo>,
}

/// Head outputs for every step and, optionally, one stage's activations.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// `outputs[t][head]` is the softmax vector at step `t`.
    pub outputs: Vec<Vec<Vec<f64>>>,
    /// `recorded[t]` is the flattened activation of the tapped stage.
    pub recorded: Option<Vec<Vec<f64>>>,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }
}

impl Model {
    /// Builds a model with LeCun-uniform kernels and zero biases, except
    /// LSTM forget gates whose bias starts at [`LSTM_FORGET_BIAS`].
    pub fn build(spec: ModelSpec, rng: &mut SeededRng) -> Result<Model> {
        let (layouts, info) = plan(&spec)?;
        let mut params: Vec<Tensor> = info
            .iter()
            .map(|i| {
                if i.is_bias {
                    Tensor::zeros(&i.shape)
                } else {
                    lecun_uniform_init(rng, i.fan_in, &i.shape)
                }
            })
            .collect();
        for l in &layouts {
            if let StageLayout::Lstm { b, hidden, .. } = *l {
                params[b].data_mut()[hidden..2 * hidden].fill(LSTM_FORGET_BIAS);
            }
        }
        Ok(Model {
            spec,
            layouts,
            params,
            info,
        })
    }

    /// Assembles a model around existing parameters (e.g. from a checkpoint).
    pub fn with_params(spec: ModelSpec, params: Vec<Tensor>) -> Result<Model> {
        let (layouts, info) = plan(&spec)?;
        if params.len() != info.len() {
            return Err(Error::shape(format!(
                "model needs {} parameter tensors, got {}",
                info.len(),
                params.len()
            )));
        }
        for (p, i) in params.iter().zip(&info) {
            if p.shape() != i.shape.as_slice() {
                return Err(Error::shape(format!(
                    "{} should be {:?}, got {:?}",
                    i.name,
                    i.shape,
                    p.shape()
                )));
            }
        }
        Ok(Model {
            spec,
            layouts,
            params,
            info,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        *self = Model::with_params(self.spec.clone(), params)?;
        Ok(())
    }

    pub fn param_info(&self) -> &[ParamInfo] {
        &self.info
    }

    pub(crate) fn layouts(&self) -> &[StageLayout] {
        &self.layouts
    }

    pub fn count_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Length of the vector recorded at `stage` (see [`Model::forward_sequence`]).
    pub fn recorded_width(&self, stage: usize) -> Option<usize> {
        let n = |d: &[usize; 3]| d.iter().product::<usize>();
        Some(match self.layouts.get(stage)? {
            StageLayout::Conv { out, .. } | StageLayout::Pool { out } | StageLayout::Leaky { out, .. } => {
                n(out)
            }
            StageLayout::Context { context, .. } => n(context),
            StageLayout::Lstm { hidden, .. } => *hidden,
            StageLayout::Fc { w, .. } => self.params[*w].shape()[0],
            StageLayout::Heads { .. } => self.spec.heads.iter().sum(),
        })
    }

    /// Frame that fills the delay period.
    pub fn black_frame(&self) -> Tensor {
        Tensor::full(&self.spec.input.dims(), BLACK_LEVEL)
    }

    /// Runs `frames` then `delay` black frames from zeroed states.
    ///
    /// `record` names a stage index whose activations are captured at every
    /// step (context units for a context layer, hidden state for an LSTM,
    /// softmax outputs for the index one past the last stage).
    pub fn forward_sequence(
        &self,
        frames: &[Tensor],
        delay: usize,
        record: Option<usize>,
    ) -> Result<ForwardTrace> {
        let mut runner = run::Runner::new(self, record)?;
        let black = self.black_frame();
        let mut outputs = Vec::with_capacity(frames.len() + delay);
        let mut recorded = record.map(|_| Vec::with_capacity(frames.len() + delay));
        self.check_frames(frames)?;
        for frame in frames.iter().chain(std::iter::repeat_n(&black, delay)) {
            let step = runner.step(frame, None, None)?;
            outputs.push(step.heads);
            if let (Some(r), Some(v)) = (recorded.as_mut(), step.recorded) {
                r.push(v);
            }
        }
        Ok(ForwardTrace { outputs, recorded })
    }

    pub(crate) fn check_frames(&self, frames: &[Tensor]) -> Result<()> {
        if frames.is_empty() {
            return Err(Error::shape("a sequence needs at least one frame"));
        }
        let dims = self.spec.input.dims();
        for (i, f) in frames.iter().enumerate() {
            if f.shape() != dims {
                return Err(Error::shape(format!(
                    "frame {i} is {:?}, the model expects {dims:?}",
                    f.shape()
                )));
            }
        }
        Ok(())
    }
}

pub fn count_parameters(model: &Model) -> usize {
    model.count_parameters()
}
