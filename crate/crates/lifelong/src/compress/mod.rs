//! Two-stage codec for latent rehearsal samples.
//!
//! Stage 1 ([`BitmapCompressed`]) is lossless: a presence bitmap plus the
//! packed non-zero values, exploiting the heavy zero fraction ReLU leaves in
//! the latent layer. Stage 2 ([`PQCodebook`]) is lossy: the packed non-zero
//! vector is split into fixed-length sub-vectors and each is replaced by the
//! one-byte index of its nearest learned centroid. [`CompressedSample`]
//! composes both stages with a class label.

mod bitmap;
pub mod kmeans;
mod pq;
mod sample;

pub use bitmap::{BitmapCompressed, BITMAP_HEADER_BYTES};
pub use pq::{PQCodebook, PQEncoded};
pub use sample::{CompressedSample, SAMPLE_HEADER_BYTES};
