//! In-memory access to manifest patches. Scene files are decoded once and
//! patches are cropped on demand.

use std::collections::HashMap;
use std::sync::Arc;

use super::manifest::{Manifest, PatchRecord};
use crate::augmentation::Sample;
use crate::error::{Error, Result};
use crate::raster::{Image, Mask};

#[derive(Debug)]
struct SceneFiles {
    t1: Image,
    t2: Image,
    mask: Mask,
    change: Mask,
}

/// A bitemporal patch with both label rasters.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub t1: Image,
    pub t2: Image,
    pub mask: Mask,
    pub change: Mask,
}

impl Patch {
    pub fn sample(&self) -> Sample {
        Sample {
            t1: self.t1.clone(),
            t2: self.t2.clone(),
            mask: self.mask.clone(),
        }
    }
}

/// Patches of one manifest, cropped out of cached scenes.
#[derive(Clone, Debug)]
pub struct PatchSet {
    pub records: Vec<PatchRecord>,
    pub patch_size: usize,
    scenes: HashMap<String, Arc<SceneFiles>>,
}

impl PatchSet {
    /// Loads the scenes referenced by `records`.
    pub fn load(manifest: &Manifest, records: Vec<PatchRecord>) -> Result<Self> {
        let mut scenes = HashMap::new();
        for r in &records {
            if scenes.contains_key(&r.scene_id) {
                continue;
            }
            let files = SceneFiles {
                t1: Image::load_png(&manifest.resolve(&r.t1))?,
                t2: Image::load_png(&manifest.resolve(&r.t2))?,
                mask: Mask::load_png(&manifest.resolve(&r.mask))?,
                change: Mask::load_png(&manifest.resolve(&r.change))?,
            };
            scenes.insert(r.scene_id.clone(), Arc::new(files));
        }
        let p = manifest.header.patch_size;
        for r in &records {
            let s = &scenes[&r.scene_id];
            if r.y + p > s.t1.height || r.x + p > s.t1.width {
                return Err(Error::DataMissing(format!("{} lies outside its {}x{} scene", r.patch_id, s.t1.height, s.t1.width)));
            }
        }
        Ok(Self {
            records,
            patch_size: manifest.header.patch_size,
            scenes,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, i: usize) -> Patch {
        let r = &self.records[i];
        let s = &self.scenes[&r.scene_id];
        let p = self.patch_size;
        Patch {
            t1: s.t1.crop(r.y, r.x, p, p),
            t2: s.t2.crop(r.y, r.x, p, p),
            mask: s.mask.crop(r.y, r.x, p, p),
            change: s.change.crop(r.y, r.x, p, p),
        }
    }
}
