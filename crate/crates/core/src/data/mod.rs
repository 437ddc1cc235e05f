//! On-disk formats and dataset access.

pub mod embedding;
pub mod manifest;
pub mod synthetic;

pub use embedding::{load_embedding, save_embedding, DType, Embedding, EmbeddingHeader};
pub use manifest::{load_manifest, Dataset, DatasetManifest, LoadedSample, SampleRecord, Split, TargetRecord};
pub use synthetic::{generate_synthetic, SyntheticSpec};
