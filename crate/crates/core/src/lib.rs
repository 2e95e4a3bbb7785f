//! MSTRNN video classifier: convolutional leaky-integrator networks with
//! fast and slow layers, plus feedforward (MSTNN) and LSTM (LRCN) baselines.

pub mod analysis;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod layers;
pub mod model;
pub mod objective;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

// The guide's code blocks run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/leaky-integrators.md")]
    mod leaky_integrators {}
    #[doc = include_str!("../../../book/src/context-layers.md")]
    mod context_layers {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/delay-response.md")]
    mod delay_response {}
    #[doc = include_str!("../../../book/src/datasets.md")]
    mod datasets {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/trajectories.md")]
    mod trajectories {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
