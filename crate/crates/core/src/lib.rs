//! Flexible-token training for video transformers.
//!
//! The crate covers the full desk-scale pipeline: synthetic motion videos,
//! flexible spatiotemporal sampling, group-dynamic token selection, the
//! FluxViT model (dual patch norm, global-local positional embedding,
//! value-projected attention bias), teacher–student and multi-count training
//! loops, and FLOP-budgeted token optimization.

// `!(x > 0.0)` style checks also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod rng;
pub mod tensor;

pub use error::{FluxError, Result};
pub use tensor::{Graph, Tensor, Var};
pub mod sampling;
pub mod selector;
pub mod videogen;
pub mod fluxvit;
pub mod tokenopt;
pub mod train;
pub mod cli;
