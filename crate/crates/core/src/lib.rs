//! Desk-scale toolkit for sliding-tile and sliding-window attention over 3D
//! (video) and 2D (image) token grids: mask generation, block-level
//! sparsity analysis, block-sparse attention execution, per-head mask
//! search, and distillation loss terms.
//!
//! Everything runs on CPU with deterministic, seedable inputs so results
//! are reproducible in CI. See the individual modules:
//!
//! * [`grid`] — token coordinates, tile partitioning, flattening orders;
//! * [`masks`] — mask families, block classification, analytic counts;
//! * [`attn`] — dense oracle, block-sparse executor, recall, FLOP model;
//! * [`search`] — toy model and per-head mask search;
//! * [`losses`] — fine-tuning objective terms;
//! * [`tensorio`] — the binary tensor file format;
//! * [`prng`] — the CBG-1 counter-based generator.

pub mod attn;
pub mod error;
pub mod grid;
pub mod losses;
pub mod masks;
pub mod prng;
pub mod search;
pub mod tensorio;

pub use error::{Axis, Error, Result};
