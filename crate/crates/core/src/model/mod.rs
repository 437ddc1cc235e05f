//! The multi-grained target perception stack.

pub mod attention;
pub mod config;
pub mod layers;
pub mod mps;
pub mod mts;
pub mod params;
pub mod stack;

pub use attention::{atom_attention_scores, AttentionMap, AttentionRecord, MapKind};
pub use config::{AdaLnStyle, InputDims, MtpConfig, Task};
pub use layers::Pass;
pub use params::{BoundParams, InitScheme, MtpParams, Params};
pub use stack::{mtp_forward, predict, MtpModel, MtpTrace, Prediction, SampleInput};
