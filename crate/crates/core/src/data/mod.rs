//! Patch ingestion, split manifests, species profiles and the synthetic
//! lesion generator.

pub mod ingest;
pub mod manifest;
pub mod patch;
pub mod synth;

pub use ingest::{ingest_buffers, ingest_patch, write_patch};
pub use manifest::{build_manifest, load_entries, ManifestEntry, Split, SplitManifest, SplitRatios};
pub use patch::{class_name, class_names, LabeledPatch, Species, SpeciesProfile, LESION_CLASSES};
pub use synth::{generate_synthetic_dataset, ShapeFamily, SplitCounts, SyntheticDataset, SyntheticSpec};
