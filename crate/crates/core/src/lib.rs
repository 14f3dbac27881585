//! Cell graphs from nucleus segmentations and linear-complexity graph
//! transformers for tumor versus healthy epithelial node classification.
//!
//! The pipeline runs segmentation JSON through [`ingest`] (parsing and
//! tumor-region relabeling), [`features`] (morphology and GLCM texture),
//! [`graph`] (radius graph assembly and cleanup), [`simplify`] (k-hop
//! anchor masks and K-means spatial splits), then [`train`] and [`eval`]
//! for cross-validated node classification with the models in [`models`].
//! [`synth`] generates labeled tissue for desk-scale experiments.

pub mod cli;
pub mod error;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod graph;
pub mod ingest;
pub mod io;
pub mod models;
pub mod numerics;
pub mod pipeline;
pub mod simplify;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use graph::CellGraph;
pub use ingest::{CellClass, CellRecord, RegionAnnotation};
