//! Pathology image-text pair generation and evaluation.
//!
//! The crate is organized along the pipeline:
//!
//! - [`corpus`]: slide manifests, pair records, token accounting.
//! - [`vectors`]: embedding matrices, exact cosine search, k-means.
//! - [`extraction`]: representative patch selection and probabilistic dedup.
//! - [`agents`]: describe / revise / summarize orchestration over a backend wire protocol.
//! - [`cliptrain`]: projection-head contrastive training with a two-stage schedule.
//! - [`evaluation`]: zero-shot classification, few-shot linear probing, attention MIL.
//!
//! Data-parallel loops go through [`par`]; with the `parallel` feature (default) they run on
//! rayon, otherwise sequentially. Results are identical either way.

pub mod agents;
pub mod cliptrain;
pub mod corpus;
pub mod digest;
pub mod evaluation;
pub mod extraction;
pub mod par;
pub mod synth;
pub mod vectors;

pub use corpus::{DatasetManifest, PairRecord, PatchRef, SelectionRoute, SlideRecord};
pub use extraction::PipelineConfig;

pub use vectors::EmbeddingMatrix;
