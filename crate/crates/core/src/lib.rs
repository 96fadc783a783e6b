//! Attention-based encoder-decoder models for text-to-text and
//! speech-features-to-text translation.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, audio IO and the
//! command-line front end live in the companion `s2t` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod attention;
pub mod audio;
pub mod batch;
pub mod bleu;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod lm;
pub mod model;
pub mod optim;
pub mod search;
pub mod tape;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
pub use tape::{NodeId, Primitive, Tape};
pub use tensor::Tensor;
