//! Multi-object video mask propagation engine.
//!
//! The core idea: instead of matching and decoding one object at a time and
//! merging the results afterwards, every object in a sequence is assigned a
//! vector from a shared identity bank, all masks are embedded into one
//! feature space, and a stack of long short-term transformer blocks
//! propagates every object through attention in a single pass. Propagating N
//! objects then costs roughly the same as propagating one, which the
//! benchmark surface in this crate measures directly.
//!
//! Layout:
//! - [`tensor`]: dense tensors, tape-based reverse-mode differentiation,
//!   finite-difference oracle, raw tensor file format
//! - [`ident`]: identity bank, assignment, mask embedding and decoding
//! - [`attn`]: scaled dot-product / multi-head / long-term / short-term
//!   windowed attention and positional embeddings
//! - [`lstt`]: the transformer block and the L-layer stack
//! - [`engine`]: encoder, decoder, memory state, frame propagation, the
//!   post-ensemble baseline
//! - [`eval`]: region and boundary metrics, training losses
//! - [`train`]: optimizer and the toy trainer
//! - [`synth`]: deterministic synthetic sequence generator
//! - [`io`]: PGM/PPM rasters and flat key=value files

pub mod attn;
pub mod engine;
pub mod error;
pub mod eval;
pub mod ident;
pub mod io;
pub mod lstt;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};
pub use tensor::Tensor;
