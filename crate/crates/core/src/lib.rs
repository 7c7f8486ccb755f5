//! Synthetic data generation by recursive, model-guided partitioning of a
//! task's data space.
//!
//! A [`tree::SpaceTree`] is grown breadth-first by [`partition::Partitioner`];
//! [`synth::Synthesizer`] then fills each leaf with samples, and the
//! [`quality`] module filters near-duplicates and scores diversity. The
//! [`pipeline`] module ties the stages to files on disk and backs the CLI.

pub mod dataset;
pub mod gateway;
pub mod partition;
pub mod pipeline;
pub mod quality;
pub mod synth;
pub mod templates;
pub mod tree;

pub use dataset::{Dataset, SampleRecord};
pub use gateway::{Gateway, GatewayError, Provider};
pub use partition::{BuildOutcome, PartitionError, PartitionOptions, Partitioner};
pub use synth::{SynthError, SynthOptions, Synthesizer};
pub use templates::TemplateSet;
pub use tree::{PartitionConfig, SpaceTree, TreeError};
