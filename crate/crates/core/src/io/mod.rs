//! Files on disk: PNG images, datasets, run configs and the synthetic
//! scene generator.

pub mod config;
pub mod dataset;
pub mod png;
pub mod run;
pub mod synthetic;

pub use config::{EvalConfig, Preset, RunConfig};
pub use dataset::{Dataset, DatasetDir, GroundTruth, GtMesh, GtRecord, ImageSet, ManifestEntry, PoseRecord};
pub use run::Run;
pub use synthetic::{generate_synthetic, procedural_texture, SceneFamily, ShapeKind, SyntheticSpec};
