//! Point cloud files, synthetic scene pairs and dataset manifests.

pub mod manifest;
pub mod ply;
pub mod synth;

pub use manifest::{load_manifest, write_dataset, Manifest, ManifestEntry};
pub use ply::{read_ply, write_ply, PlyFormat};
pub use synth::{generate_pair, Regime, SceneConfig, ScenePair, ShapeKind};
