pub mod attn_unet;
pub mod datagen;
pub mod effects;
pub mod error;
pub mod grid;
pub mod io;
pub mod lfm;
pub mod stcinet;
pub mod nn;

pub use error::{Error, Result};
