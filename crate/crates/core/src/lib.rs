//! Bag-to-bag vision-language alignment at desk scale.
//!
//! An unlabeled image is matched against a prompt dictionary, the matched
//! prompt is expanded into alternate descriptions, and text and visual bags
//! are assembled by retrieval and then pruned. A toy two-tower encoder is
//! trained on the bags with a multiple-instance NCE objective and used for
//! zero-shot tile classification, top-K slide classification and tile-stitched
//! segmentation. Every metric used to evaluate the pipeline lives in
//! [`metrics`].

pub mod bags;
pub mod embedding;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod synth;
pub mod trainer;
pub mod vocab;
pub mod zeroshot;

pub use embedding::{cosine_similarity, l2_normalize, EmbeddingStore, EmbeddingVector};
pub use error::{Error, Result};
