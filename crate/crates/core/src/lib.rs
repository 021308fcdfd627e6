//! Tensorized optical multimodal fusion networks.
//!
//! The crate covers the numerical side (dense and tensor-train weights,
//! low-rank fusion, attention text encoder, training) and the hardware side
//! (MZI mesh compilation, optical simulation, power and efficiency figures).

pub mod attention;
pub mod cost;
pub mod error;
pub mod fusion;
pub mod linalg;
pub mod model;
pub mod photonic;
pub mod tensor;
pub mod train;
pub mod tt;
pub mod weight;

pub use error::{Error, Result};
pub use tensor::{DenseTensor, Shape};
pub use tt::TtMatrix;
pub use model::{ModelConfig, TomfnModel};
pub use photonic::{CompiledModel, LayerPlan, MeshNetlist};
pub use train::Sample;
pub use weight::Weight;

// Book chapters, compiled and run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensor-train.md")]
    mod tensor_train {}
    #[doc = include_str!("../../../book/src/fusion.md")]
    mod fusion {}
    #[doc = include_str!("../../../book/src/attention.md")]
    mod attention {}
    #[doc = include_str!("../../../book/src/model-training.md")]
    mod model_training {}
    #[doc = include_str!("../../../book/src/photonic.md")]
    mod photonic {}
    #[doc = include_str!("../../../book/src/cost.md")]
    mod cost {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
