//! Hierarchy-preserving embeddings for tree-shaped classifications.
//!
//! The crate turns a NACE-shaped classification (sections, divisions, groups,
//! classes) into embedding vectors and measures how much of the tree survives
//! in the embedding space and after dimensionality reduction:
//!
//! - [`taxonomy`]: parse and query the classification forest.
//! - [`preprocess`]: build model input text in `raw` or `with_parents` mode.
//! - [`embed`]: embedding providers (remote HTTP, seeded synthetic), the
//!   embedding-set file format and prefix truncation.
//! - [`reduce`]: exact t-SNE, UMAP, prefix truncation and a PCA baseline.
//! - [`metrics`]: bounded cosine distance, hierarchy loss/error and per-level
//!   silhouettes.
//! - [`pipeline`] and [`plot`]: experiment grids, run manifests and SVG
//!   scatter plots.

pub mod embed;
pub mod fixtures;
pub mod metrics;
pub mod pipeline;
pub mod plot;
pub mod preprocess;
pub mod reduce;
pub mod seed;
pub mod taxonomy;

pub use embed::{EmbeddingSet, ProviderConfig, ProviderKind};
pub use metrics::{RetentionReport, SilhouetteVariant};
pub use preprocess::{EnrichedCorpus, Mode};
pub use reduce::ReductionConfig;
pub use taxonomy::{Code, Taxonomy, TaxonomyNode};
