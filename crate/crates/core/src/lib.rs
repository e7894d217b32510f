//! MXFP4/MXFP8 block quantization with learnable block-wise affine transforms.
//!
//! Each 32-element quantization block gets its own invertible transform,
//! factored as a private `g2 x g2` matrix Kronecker a `g1 x g1` matrix shared by
//! all blocks, plus learnable per-block clipping. Transforms and clip logits are
//! calibrated per layer against the full-precision output and the weight side
//! is fused offline.

pub mod calib;
pub mod cli;
pub mod clipping;
pub mod error;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod mxfp;
pub mod oracle;
pub mod report;
pub mod synth;
pub mod transform;
pub mod verify;

pub use error::{BatError, Result};
pub use linalg::Mat;
pub use mxfp::{MxBlock, MxFormat, MxTensor, BLOCK_SIZE};
pub use transform::GpkTransform;
