//! Context-conditioned spatiotemporal predictive learning for CSI forecasting.

pub mod cells;
pub mod commands;
pub mod data;
pub mod network;
pub mod error;
pub mod evaluation;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Graph, Real, Tensor, Var};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/cells.md")]
    mod cells {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
