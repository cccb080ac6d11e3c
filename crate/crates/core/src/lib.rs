//! Attributed generation with contextual citation embeddings.
//!
//! A small decoder-only transformer whose citation markers `⟨c_i⟩` are embedded
//! as the mean of their document's token embeddings, trained with a router
//! (default vs. citation token), an alignment head (which document), and an
//! attention-shaping term, next to the ordinary language-model loss. The crate
//! also ships a symbolic corpus generator and a containment-based citation
//! evaluator.

pub mod attn_shaping;
pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod corpus;
pub mod decoder;
pub mod error;
pub mod evalkit;
pub mod fusion;
pub mod gradcheck;
pub mod heads;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use backbone::{BackboneConfig, ForwardTrace, ModelState};
pub use corpus::{AttributedResponse, Document, Example, Segment};
pub use error::{Error, Result};
pub use heads::LossBreakdown;
pub use tensor::Tensor;
pub use vocab::{Role, TaggedToken, Vocab};
