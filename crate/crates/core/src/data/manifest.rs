//! Patch tiling, splitting, label-fraction subsets and the JSON-lines
//! manifest that ties patches to scene files on disk.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::{generate_scene, Scene, SceneConfig};
use crate::error::{Error, Result};
use crate::raster::Mask;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Foreground-bearing patches split into train/val.
    Pretrain,
    /// All patches split into train/val/test.
    Cd,
}

impl DatasetKind {
    fn stream_tag(self) -> u64 {
        match self {
            DatasetKind::Pretrain => 1,
            DatasetKind::Cd => 2,
        }
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Self::Pretrain),
            "cd" => Ok(Self::Cd),
            _ => Err(Error::ConfigInvalid(format!("unknown dataset kind {s:?} (expected pretrain or cd)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub scenes: usize,
    pub patch_size: usize,
    pub seed: u64,
    pub scene: SceneConfig,
    /// train/val fractions for pre-training data.
    pub pretrain_split: [f64; 2],
    /// train/val/test fractions for change-detection data.
    pub cd_split: [f64; 3],
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Pretrain,
            scenes: 40,
            patch_size: 64,
            seed: 0,
            scene: SceneConfig::default(),
            pretrain_split: [0.8, 0.2],
            cd_split: [0.7, 0.1, 0.2],
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.scenes == 0 || self.patch_size == 0 {
            return Err(Error::ConfigInvalid("data: scenes and patch_size must be positive".into()));
        }
        if self.scene.size < self.patch_size {
            return Err(Error::SceneTooSmall {
                scene: (self.scene.size, self.scene.size),
                patch: self.patch_size,
            });
        }
        check_fractions(&self.pretrain_split)?;
        check_fractions(&self.cd_split)
    }

    /// `(split, fraction)` pairs for this kind.
    pub fn split_fractions(&self) -> Vec<(Split, f64)> {
        match self.kind {
            DatasetKind::Pretrain => vec![(Split::Train, self.pretrain_split[0]), (Split::Val, self.pretrain_split[1])],
            DatasetKind::Cd => Split::ALL.iter().copied().zip(self.cd_split).collect(),
        }
    }

    /// Independent stream for scene `index`.
    pub fn scene_rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((self.kind.stream_tag() << 32) | index as u64);
        rng
    }
}

fn check_fractions(f: &[f64]) -> Result<()> {
    if f.iter().any(|&v| !(0.0..=1.0).contains(&v)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::ConfigInvalid(format!("split fractions {f:?} must be in [0, 1] and sum to 1")));
    }
    Ok(())
}

/// One patch: a window of a scene plus the scene's files, relative to the
/// manifest directory.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchRecord {
    pub patch_id: String,
    pub scene_id: String,
    pub y: usize,
    pub x: usize,
    pub split: Split,
    pub t1: String,
    pub t2: String,
    pub mask: String,
    pub change: String,
}

/// First line of a manifest file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub dataset: DatasetKind,
    pub patch_size: usize,
    pub seed: u64,
    pub generator: DatasetConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub records: Vec<PatchRecord>,
    /// Directory the record paths are relative to.
    pub root: PathBuf,
}

impl Manifest {
    pub fn records_in(&self, split: Split) -> Vec<PatchRecord> {
        self.records.iter().filter(|r| r.split == split).cloned().collect()
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Header line followed by one record per line.
    pub fn save(&self) -> Result<PathBuf> {
        let path = self.root.join(MANIFEST_FILE);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        let mut line = |v: String| writeln!(w, "{v}").map_err(|e| Error::io(&path, e));
        line(serde_json::to_string(&self.header)?)?;
        for r in &self.records {
            line(serde_json::to_string(r)?)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Accepts either the manifest file or its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let file_path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        if !file_path.exists() {
            return Err(Error::DataMissing(format!("no manifest at {}", file_path.display())));
        }
        let file = fs::File::open(&file_path).map_err(|e| Error::io(&file_path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::DataMissing(format!("{} is empty", file_path.display())))?
            .map_err(|e| Error::io(&file_path, e))?;
        let header: ManifestHeader = serde_json::from_str(&header_line)?;
        let mut records = Vec::new();
        for line in lines {
            let line = line.map_err(|e| Error::io(&file_path, e))?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        let root = file_path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { header, records, root })
    }
}

/// Top-left corners of the full `patch`-sized tiles of `mask`, row-major;
/// partial edge tiles are dropped. With `require_foreground`, tiles without
/// any foreground pixel are dropped too.
pub fn tile_and_filter(mask: &Mask, patch: usize, require_foreground: bool) -> Result<Vec<(usize, usize)>> {
    if patch == 0 || mask.height < patch || mask.width < patch {
        return Err(Error::SceneTooSmall {
            scene: (mask.height, mask.width),
            patch,
        });
    }
    let mut out = Vec::new();
    for ty in 0..mask.height / patch {
        for tx in 0..mask.width / patch {
            let (y, x) = (ty * patch, tx * patch);
            let keep = !require_foreground || (y..y + patch).any(|r| mask.data[r * mask.width + x..r * mask.width + x + patch].contains(&1));
            if keep {
                out.push((y, x));
            }
        }
    }
    Ok(out)
}

/// Split sizes by largest remainder: each is within 1 of `fraction · n` and
/// they sum to `n`. Ties go to the earlier split.
pub fn split_counts(n: usize, fractions: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let short = n.saturating_sub(counts.iter().sum());
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

/// Shuffles `records` with `rng` and labels consecutive runs with the splits.
pub fn split(mut records: Vec<PatchRecord>, fractions: &[(Split, f64)], rng: &mut impl Rng) -> Result<Vec<PatchRecord>> {
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let f: Vec<f64> = fractions.iter().map(|&(_, f)| f).collect();
    check_fractions(&f)?;
    records.shuffle(rng);
    let counts = split_counts(records.len(), &f);
    let mut it = records.iter_mut();
    for (&(s, _), &c) in fractions.iter().zip(&counts) {
        for r in it.by_ref().take(c) {
            r.split = s;
        }
    }
    Ok(records)
}

/// The first `ceil(fraction · n)` records of a seeded shuffle. Subsets for the
/// same seed are nested.
pub fn label_fraction_subset(train: &[PatchRecord], fraction: f64, seed: u64) -> Result<Vec<PatchRecord>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::ConfigInvalid(format!("label fraction {fraction} outside (0, 1]")));
    }
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut order: Vec<&PatchRecord> = train.iter().collect();
    // a canonical order first, so the subset does not depend on input order
    order.sort_by(|a, b| a.patch_id.cmp(&b.patch_id));
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    // guard against 0.05 * 1000 = 50.000000000000004
    let k = ((fraction * train.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    Ok(order.into_iter().take(k.min(train.len())).cloned().collect())
}

fn scene_id(index: usize) -> String {
    format!("s{index:04}")
}

fn write_scene(root: &Path, id: &str, scene: &Scene) -> Result<()> {
    let dir = root.join("scenes").join(id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    scene.image_t1.save_png(&dir.join("t1.png"))?;
    scene.image_t2.save_png(&dir.join("t2.png"))?;
    scene.building_mask.save_png(&dir.join("mask.png"))?;
    scene.change_mask.save_png(&dir.join("change.png"))
}

/// Generates every scene of `cfg` into `root`, tiles, splits and writes the
/// manifest. Scenes are spread over `threads` workers; each scene has its own
/// random stream so the output does not depend on the worker count.
pub fn generate_dataset(cfg: &DatasetConfig, root: &Path, threads: usize) -> Result<Manifest> {
    cfg.validate()?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let threads = threads.clamp(1, cfg.scenes);
    let require_fg = cfg.kind == DatasetKind::Pretrain;
    let tiles: Vec<Result<Vec<(usize, usize)>>> = std::thread::scope(|s| {
        let workers: Vec<_> = (0..threads)
            .map(|w| {
                s.spawn(move || {
                    (w..cfg.scenes)
                        .step_by(threads)
                        .map(|i| {
                            let scene = generate_scene(&cfg.scene, &mut cfg.scene_rng(i))?;
                            write_scene(root, &scene_id(i), &scene)?;
                            tile_and_filter(&scene.building_mask, cfg.patch_size, require_fg).map(|t| (i, t))
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        let mut by_scene: Vec<Option<Result<Vec<(usize, usize)>>>> = (0..cfg.scenes).map(|_| None).collect();
        for w in workers {
            for r in w.join().expect("scene worker panicked") {
                match r {
                    Ok((i, t)) => by_scene[i] = Some(Ok(t)),
                    Err(e) => return vec![Err(e)],
                }
            }
        }
        by_scene.into_iter().map(|t| t.expect("every scene generated")).collect()
    });
    let mut records = Vec::new();
    for (i, t) in tiles.into_iter().enumerate() {
        let id = scene_id(i);
        let file = |name: &str| format!("scenes/{id}/{name}.png");
        for (y, x) in t? {
            records.push(PatchRecord {
                patch_id: format!("{id}_y{y:04}_x{x:04}"),
                scene_id: id.clone(),
                y,
                x,
                split: Split::Train,
                t1: file("t1"),
                t2: file("t2"),
                mask: file("mask"),
                change: file("change"),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(cfg.kind.stream_tag() << 48);
    let mut records = split(records, &cfg.split_fractions(), &mut rng)?;
    records.sort_by(|a, b| a.patch_id.cmp(&b.patch_id));
    let manifest = Manifest {
        header: ManifestHeader {
            dataset: cfg.kind,
            patch_size: cfg.patch_size,
            seed: cfg.seed,
            generator: cfg.clone(),
        },
        records,
        root: root.to_path_buf(),
    };
    manifest.save()?;
    Ok(manifest)
}
