//! Multi-task expression embedding training with teacher-ensemble
//! self-distillation.
//!
//! Teachers learn a shared `d_face` embedding from two supervised streams
//! (triplet similarity and 8-way classification). A student then learns the
//! same tasks plus a relational distillation objective against the
//! concatenated, individually normalised outputs of a frozen teacher
//! ensemble. Embedding quality is measured with triplet accuracy and a
//! class-reweighted linear probe.

pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod losses;
pub mod models;
pub mod ndgrad;
pub mod pipeline;
pub mod train;

pub use error::{FeverError, Result};
