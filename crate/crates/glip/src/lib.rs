//! Progressive image inpainting engine.
//!
//! Three stages: pyramid feature extraction built from stacked
//! Gaussian-Laplacian residual modules, iterative hole filling with partial
//! convolutions and feature attention over two frequency branches, and a
//! reinpainting enhancement plus reconstruction head. Everything runs on a
//! small from-scratch f32 tensor library with reverse-mode differentiation,
//! so the network is trainable at desk scale on a CPU.

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gle;
pub mod iterative;
pub mod losses;
pub mod metrics;
pub mod ops;
pub mod pconv;
pub mod reinpaint;
pub mod tape;
pub mod tensor;
pub mod testutil;

pub use error::{Error, Result};
pub use pconv::{partial_conv, update_mask, MaskPlane};
pub use tape::{gradcheck, Tape, Var};
pub use tensor::{ConvSpec, Tensor4};
