//! Autoregressive generation of layouts made of categorized bounding boxes.
//!
//! Layouts are quantized and flattened into `bos, (category, x, y, h, w)*, eos`
//! token sequences ([`layout`]), modelled by a masked transformer decoder
//! ([`model`]) trained with teacher forcing ([`train`]), sampled with nucleus
//! decoding ([`sample`]) and analysed with the metrics in [`eval`]. Corpus
//! files, synthetic corpora and SVG rendering live in [`io`].

pub mod error;
pub mod eval;
pub mod io;
pub mod layout;
pub mod model;
pub mod sample;
pub mod train;

pub use error::{Error, Result};
pub use layout::{BBox, CategoryVocab, Element, Layout, SlotKind, TokenKind, TokenSequence, Vocab};
pub use model::{Model, ModelConfig};

/// Deterministically derives an independent seed for sub-stream `stream`.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
