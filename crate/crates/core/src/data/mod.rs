//! Synthetic bitemporal data: scene generation, patch manifests and loading.

mod dataset;
mod manifest;
mod scene;

pub use dataset::{Patch, PatchSet};
pub use manifest::{
    generate_dataset, label_fraction_subset, split, split_counts, tile_and_filter, DatasetConfig, DatasetKind, Manifest,
    ManifestHeader, PatchRecord, Split, MANIFEST_FILE,
};
pub use scene::{generate_scene, rasterize, Building, Distractor, Scene, SceneConfig};
