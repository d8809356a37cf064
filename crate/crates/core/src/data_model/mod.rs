//! Dataset manifest ingestion, genus-centered seen/unseen splitting, and
//! split-level statistics.

pub mod manifest;
pub mod split;
pub mod stats;

pub use manifest::{load_manifest, validate_manifest, BBox, DatasetManifest, ManifestFile};
pub use split::{genus_split, SplitAssignment};
pub use stats::{dataset_stats, StatsColumn, StatsReport};
