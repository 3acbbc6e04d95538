//! File formats: PGM/PPM rasters and flat key=value records. Tensor files
//! live in [`crate::tensor::serial`].

pub mod kv;
pub mod pgm;
