//! Architecture descriptions and the three presets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Mstrnn,
    Mstnn,
    Lrcn,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Mstrnn => "mstrnn",
            ModelKind::Mstnn => "mstnn",
            ModelKind::Lrcn => "lrcn",
        })
    }
}

/// `channels × height × width` of every input frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        InputShape {
            channels,
            height,
            width,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

/// One stage of a model. Kernel extents are `[height, width]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum StageSpec {
    /// Stateless convolution followed by the scaled tanh.
    Conv {
        maps: usize,
        kernel: [usize; 2],
        stride: usize,
        #[serde(default)]
        pad: usize,
    },
    /// 2×2 max pooling, stride 2.
    Pool,
    /// Leaky-integrator convolution (feature units without a pooling or
    /// context part of their own).
    LeakyConv {
        maps: usize,
        kernel: [usize; 2],
        #[serde(default)]
        pad: usize,
        tau: f64,
    },
    /// Feature units → pooling → context units.
    ContextLayer {
        feature_maps: usize,
        context_maps: usize,
        kernel: [usize; 2],
        #[serde(default)]
        pad: usize,
        tau: f64,
    },
    Lstm {
        hidden: usize,
    },
    /// Fully-connected layer with scaled tanh (and dropout while training).
    Fc {
        units: usize,
    },
}

impl StageSpec {
    pub fn label(&self) -> &'static str {
        match self {
            StageSpec::Conv { .. } => "conv",
            StageSpec::Pool => "pool",
            StageSpec::LeakyConv { .. } => "leaky conv",
            StageSpec::ContextLayer { .. } => "context layer",
            StageSpec::Lstm { .. } => "lstm",
            StageSpec::Fc { .. } => "fc",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input: InputShape,
    pub stages: Vec<StageSpec>,
    /// Softmax vector sizes, one per output head.
    pub heads: Vec<usize>,
}

impl ModelSpec {
    /// Canonical JSON used for digests and checkpoints.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("model spec serializes")
    }

    /// SHA-256 of [`ModelSpec::canonical_json`].
    pub fn digest(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        Sha256::digest(self.canonical_json().as_bytes()).into()
    }

    /// The same stack with every context layer replaced by leaky feature
    /// units and a pooling layer.
    pub fn without_context(&self) -> ModelSpec {
        let stages = self
            .stages
            .iter()
            .flat_map(|s| match *s {
                StageSpec::ContextLayer {
                    feature_maps,
                    kernel,
                    pad,
                    tau,
                    ..
                } => vec![
                    StageSpec::LeakyConv {
                        maps: feature_maps,
                        kernel,
                        pad,
                        tau,
                    },
                    StageSpec::Pool,
                ],
                ref other => vec![other.clone()],
            })
            .collect();
        ModelSpec {
            kind: ModelKind::Mstnn,
            input: self.input,
            stages,
            heads: self.heads.clone(),
        }
    }

    /// Index of the stage recorded for trajectory analysis: the context
    /// units of the last context layer (MSTRNN), the last leaky convolution
    /// (MSTNN) or the LSTM (LRCN).
    pub fn default_tap(&self) -> Option<usize> {
        let find_last = |pred: fn(&StageSpec) -> bool| self.stages.iter().rposition(pred);
        match self.kind {
            ModelKind::Mstrnn => find_last(|s| matches!(s, StageSpec::ContextLayer { .. })),
            ModelKind::Mstnn => find_last(|s| matches!(s, StageSpec::LeakyConv { .. })),
            ModelKind::Lrcn => find_last(|s| matches!(s, StageSpec::Lstm { .. })),
        }
    }

    /// Index of the first fully-connected stage.
    pub fn first_fc(&self) -> Option<usize> {
        self.stages
            .iter()
            .position(|s| matches!(s, StageSpec::Fc { .. }))
    }

    pub fn preset(kind: ModelKind, options: &PresetOptions) -> Result<ModelSpec> {
        match kind {
            ModelKind::Mstrnn => Ok(Self::mstrnn(options)),
            ModelKind::Mstnn => Ok(Self::mstnn(options)),
            ModelKind::Lrcn => Self::lrcn(options),
        }
    }

    /// conv → pool → context layer (τ fast) → context layer (τ slow) → fc → fc → heads.
    pub fn mstrnn(o: &PresetOptions) -> ModelSpec {
        ModelSpec {
            kind: ModelKind::Mstrnn,
            input: o.input,
            stages: vec![
                StageSpec::Conv {
                    maps: o.conv_maps,
                    kernel: o.first_kernel,
                    stride: o.first_stride,
                    pad: 0,
                },
                StageSpec::Pool,
                StageSpec::ContextLayer {
                    feature_maps: o.feature_maps[0],
                    context_maps: o.context_maps[0],
                    kernel: o.after_pool_kernel,
                    pad: 0,
                    tau: o.taus[0],
                },
                StageSpec::ContextLayer {
                    feature_maps: o.feature_maps[1],
                    context_maps: o.context_maps[1],
                    kernel: [3, 3],
                    pad: 0,
                    tau: o.taus[1],
                },
                StageSpec::Fc {
                    units: o.fc_units[0],
                },
                StageSpec::Fc {
                    units: o.fc_units[1],
                },
            ],
            heads: o.heads.clone(),
        }
    }

    /// The MSTRNN stack with its context units removed.
    pub fn mstnn(o: &PresetOptions) -> ModelSpec {
        Self::mstrnn(o).without_context()
    }

    /// Three conv+pool stages → LSTM → fc → heads.
    ///
    /// With `lstm_hidden = None` the hidden size is the one whose parameter
    /// count comes closest to the matching MSTRNN preset.
    pub fn lrcn(o: &PresetOptions) -> Result<ModelSpec> {
        let with_hidden = |hidden: usize| ModelSpec {
            kind: ModelKind::Lrcn,
            input: o.input,
            stages: vec![
                StageSpec::Conv {
                    maps: o.conv_maps,
                    kernel: o.first_kernel,
                    stride: o.first_stride,
                    pad: 0,
                },
                StageSpec::Pool,
                StageSpec::Conv {
                    maps: o.feature_maps[0],
                    kernel: o.after_pool_kernel,
                    stride: 1,
                    pad: 0,
                },
                StageSpec::Pool,
                StageSpec::Conv {
                    maps: o.feature_maps[1],
                    kernel: [3, 3],
                    stride: 1,
                    pad: 0,
                },
                StageSpec::Pool,
                StageSpec::Lstm { hidden },
                StageSpec::Fc {
                    units: o.fc_units[1],
                },
            ],
            heads: o.heads.clone(),
        };
        if let Some(h) = o.lstm_hidden {
            return Ok(with_hidden(h));
        }
        let target = super::count_spec_parameters(&Self::mstrnn(o))? as f64;
        let mut best = (f64::INFINITY, 1);
        for hidden in 1..=4096 {
            let count = super::count_spec_parameters(&with_hidden(hidden))? as f64;
            let gap = (count - target).abs();
            if gap < best.0 {
                best = (gap, hidden);
            }
            if count > target {
                break;
            }
        }
        Ok(with_hidden(best.1))
    }
}

/// Knobs shared by the three presets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PresetOptions {
    pub input: InputShape,
    pub heads: Vec<usize>,
    pub first_kernel: [usize; 2],
    pub first_stride: usize,
    /// Kernel of the first convolution after the first pooling layer.
    pub after_pool_kernel: [usize; 2],
    pub conv_maps: usize,
    /// Feature maps of the two context layers (conv maps of later LRCN stages).
    pub feature_maps: [usize; 2],
    pub context_maps: [usize; 2],
    pub taus: [f64; 2],
    pub fc_units: [usize; 2],
    /// LSTM width for the LRCN; `None` matches the MSTRNN parameter count.
    #[serde(default)]
    pub lstm_hidden: Option<usize>,
}

impl PresetOptions {
    /// Desk-scale defaults: 24×24 RGB input, 8/16 maps per stage.
    pub fn desk(heads: Vec<usize>) -> Self {
        PresetOptions {
            input: InputShape::new(3, 24, 24),
            heads,
            first_kernel: [3, 3],
            first_stride: 1,
            after_pool_kernel: [3, 3],
            conv_maps: 8,
            feature_maps: [8, 16],
            context_maps: [8, 16],
            taus: [2.0, 100.0],
            fc_units: [64, 64],
            lstm_hidden: None,
        }
    }

    /// Full-size concat3 geometry: 38 wide × 44 high input, 3 wide × 5
    /// high kernels on the first convolution and the first one after pooling.
    pub fn full_concat3() -> Self {
        PresetOptions {
            input: InputShape::new(3, 44, 38),
            first_kernel: [5, 3],
            after_pool_kernel: [5, 3],
            ..Self::desk(vec![27])
        }
    }

    /// 108×108 input with a stride-3 first convolution.
    pub fn full_compositional(heads: Vec<usize>) -> Self {
        PresetOptions {
            input: InputShape::new(3, 108, 108),
            first_stride: 3,
            ..Self::desk(heads)
        }
    }
}

pub(crate) fn validate_basic(spec: &ModelSpec) -> Result<()> {
    if spec.heads.is_empty() || spec.heads.iter().any(|&h| h < 2) {
        return Err(Error::config(format!(
            "every head needs at least two categories, got {:?}",
            spec.heads
        )));
    }
    let InputShape {
        channels,
        height,
        width,
    } = spec.input;
    if channels == 0 || height == 0 || width == 0 {
        return Err(Error::config("input extents must be positive"));
    }
    Ok(())
}
