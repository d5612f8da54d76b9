//! Dense feature vectors, datasets and the synthetic data pipeline.

pub mod dataset;
pub mod generator;
pub mod propagation;
pub mod sparse;
pub mod split;

pub use dataset::{
    cross_split_duplicates, header_path, Dataset, DatasetHeader, Example, Provenance, SplitTag, Subpopulation,
    UnlabeledExample,
};
pub use generator::{generate_synthetic_dataset, GeneratorConfig, SubpopCounts, TemplateInventory};
pub use propagation::{propagate_labels, DropReason, Propagation};
pub use sparse::{densify, SparseFeatureVector};
pub use split::split;
