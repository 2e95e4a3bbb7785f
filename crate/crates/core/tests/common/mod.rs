#![allow(dead_code)]

use mstrnn::model::{InputShape, ModelKind, ModelSpec, StageSpec};
use mstrnn::objective::TargetLabels;
use mstrnn::tensor::{SeededRng, Tensor};

/// 2-map MSTRNN on 8×8 frames: conv, two context layers (τ 2 and 100), two fc.
pub fn toy_mstrnn(heads: Vec<usize>) -> ModelSpec {
    ModelSpec {
        kind: ModelKind::Mstrnn,
        input: InputShape::new(1, 8, 8),
        stages: vec![
            StageSpec::Conv {
                maps: 2,
                kernel: [3, 3],
                stride: 1,
                pad: 1,
            },
            StageSpec::ContextLayer {
                feature_maps: 2,
                context_maps: 2,
                kernel: [3, 3],
                pad: 1,
                tau: 2.0,
            },
            StageSpec::ContextLayer {
                feature_maps: 2,
                context_maps: 2,
                kernel: [3, 3],
                pad: 1,
                tau: 100.0,
            },
            StageSpec::Fc { units: 6 },
            StageSpec::Fc { units: 5 },
        ],
        heads,
    }
}

pub fn toy_mstnn(heads: Vec<usize>) -> ModelSpec {
    toy_mstrnn(heads).without_context()
}

pub fn toy_lrcn(heads: Vec<usize>) -> ModelSpec {
    let conv = StageSpec::Conv {
        maps: 2,
        kernel: [3, 3],
        stride: 1,
        pad: 1,
    };
    ModelSpec {
        kind: ModelKind::Lrcn,
        input: InputShape::new(1, 8, 8),
        stages: vec![
            conv.clone(),
            StageSpec::Pool,
            conv.clone(),
            StageSpec::Pool,
            conv,
            StageSpec::Pool,
            StageSpec::Lstm { hidden: 4 },
            StageSpec::Fc { units: 5 },
        ],
        heads,
    }
}

pub fn random_frames(rng: &mut SeededRng, n: usize, shape: &[usize]) -> Vec<Tensor> {
    (0..n)
        .map(|_| {
            let len = shape.iter().product();
            Tensor::from_vec(shape, (0..len).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
        })
        .collect()
}

pub fn labels(indices: &[usize], heads: &[usize]) -> TargetLabels {
    TargetLabels::new(indices.to_vec(), heads).unwrap()
}
