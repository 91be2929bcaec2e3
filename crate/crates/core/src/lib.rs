//! Router-ranked ordinal preference training for tiny sparse mixture-of-experts
//! language models.
//!
//! The crate is organised bottom-up:
//!
//! * [`autodiff`]: a dynamic reverse-mode tape over dense tensors.
//! * [`moe`]: router, top-K selection, (tier-restricted) gating and the
//!   sparse expert mixture.
//! * [`grouping`]: rank-ordered expert tiers and layer scopes.
//! * [`losses`]: expert rank loss, next-token prediction, balance loss.
//! * [`model`], [`optim`], [`train`], [`checkpoint`]: a small decoder-only
//!   transformer with MoE feed-forward blocks, AdamW, the training step and
//!   evaluation, and the binary checkpoint format.

pub mod autodiff;
pub mod checkpoint;
pub mod grouping;
pub mod losses;
pub mod model;
pub mod moe;
pub mod optim;
pub mod train;

mod error;
mod real;
mod tensor;

pub use error::{Error, Result};
pub use real::{Precision, Real};
pub use tensor::Tensor;
