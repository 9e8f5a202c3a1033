//! Semi-causal language modeling at desk scale.
//!
//! A causal decoder reads a sequence left to right. Selected spans of that
//! sequence are instead encoded by bidirectional encoders, projected through
//! connectors, and docked into the decoder input at their positions. Every
//! token outside the span interiors is predicted autoregressively, and the
//! token after a span is predicted at the span's last position.
//!
//! Modules, bottom-up:
//!
//! * [`numerics`]: tensors and the reverse-mode tape.
//! * [`textdata`]: byte vocabulary and sequence packing.
//! * [`spans`]: span layouts, the sampler, and target bookkeeping.
//! * [`masks`]: attention visibility relations.
//! * [`model`]: encoders, connectors, decoder, and the loss.
//! * [`training`]: optimizer, schedule, freeze policies, checkpoints.
//! * [`eval`]: episodes, decoding, metrics, and synthetic tasks.

pub mod error;
pub mod eval;
pub mod masks;
pub mod model;
pub mod numerics;
pub mod spans;
pub mod textdata;
pub mod training;

pub use error::{Error, Result};
