//! Multimodal tokenizer for medical codes.
//!
//! Each code is described by a frozen text embedding and a subgraph of a
//! biomedical knowledge graph. The pipeline encodes the subgraph
//! ([`graphenc`]), fuses both modalities into four `d`-dimensional vectors
//! ([`fusion`]), and quantizes each against its own region of a shared
//! codebook ([`quantizer`]). Training ([`trainer`]) minimises the codebook
//! loss, a KL alignment term and the token-packing objectives
//! ([`packing`]); the frozen result ([`tokenizer`]) maps a code id to a
//! fixed-length sequence of `4K` token ids.

pub mod binio;
pub mod corpus;
pub mod fusion;
pub mod graphenc;
pub mod numcore;
pub mod packing;
pub mod quantizer;
pub mod textenc;
pub mod tokenizer;
pub mod trainer;
