//! Minimal CPU tensor engine with reverse-mode differentiation.

mod conv;
mod fpmode;
pub mod gradcheck;
mod graph;
pub mod layers;
mod params;
mod tensor;

pub use fpmode::FlushDenormals;
pub use graph::{BatchStats, Graph, Var};
pub use layers::{BatchNorm, Conv2d, ConvLstm, Dense, Session};
pub use params::{Adam, Collection, Init, Param, ParamId, ParamStore};
pub use tensor::{Real, Tensor};

#[cfg(test)]
mod tests;
