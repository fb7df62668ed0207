//! Synthetic bitemporal scenes: value-noise terrain with rectangular
//! buildings, a global appearance shift between epochs and per-building
//! additions and removals. Unlabelled pseudo-changes (terrain drift and
//! elliptical ground-cover patches, some in roof colours) make raw
//! differencing insufficient.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Image, Mask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Scenes are square.
    pub size: usize,
    /// Inclusive range of building counts per 256×256 area.
    pub building_density: [f64; 2],
    /// Inclusive range of building side lengths in pixels.
    pub building_side: [f64; 2],
    pub rotated_fraction: f64,
    /// Per-channel gain spread and brightness offset applied to t2.
    pub appearance_shift: f32,
    /// Probability that a building exists in only one epoch.
    pub change_rate: f64,
    /// Per-pixel sensor noise, drawn independently for each epoch.
    pub pixel_noise: f32,
    /// Inclusive range of ground-cover patch counts per 256×256 area.
    pub distractor_density: [f64; 2],
    /// Inclusive range of patch semi-axes in pixels.
    pub distractor_radius: [f64; 2],
    /// Probability that a patch exists in only one epoch. Never labelled.
    pub distractor_change_rate: f64,
    /// Probability that a patch is painted from the roof palette.
    pub distractor_roof_colours: f64,
    /// Blend weight of an independent terrain field at t2.
    pub terrain_change: f32,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            size: 512,
            building_density: [14.0, 24.0],
            building_side: [6.0, 22.0],
            rotated_fraction: 0.5,
            appearance_shift: 0.15,
            change_rate: 0.25,
            pixel_noise: 0.02,
            distractor_density: [8.0, 16.0],
            distractor_radius: [4.0, 14.0],
            distractor_change_rate: 0.6,
            distractor_roof_colours: 0.5,
            terrain_change: 0.3,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigInvalid(format!("scene: {m}")));
        if self.size == 0 {
            return bad("size must be positive");
        }
        let [d0, d1] = self.building_density;
        if !(d0 >= 0.0 && d0 <= d1 && d1.is_finite()) {
            return bad("building_density must be an ordered non-negative range");
        }
        let [s0, s1] = self.building_side;
        if !(s0 >= 1.0 && s0 <= s1 && s1.is_finite()) {
            return bad("building_side must be an ordered range starting at 1 or more");
        }
        let [d0, d1] = self.distractor_density;
        if !(d0 >= 0.0 && d0 <= d1 && d1.is_finite()) {
            return bad("distractor_density must be an ordered non-negative range");
        }
        let [r0, r1] = self.distractor_radius;
        if !(r0 >= 1.0 && r0 <= r1 && r1.is_finite()) {
            return bad("distractor_radius must be an ordered range starting at 1 or more");
        }
        if !(0.0..=1.0).contains(&self.terrain_change) {
            return bad("terrain_change must lie in [0, 1]");
        }
        for (name, p) in [
            ("rotated_fraction", self.rotated_fraction),
            ("change_rate", self.change_rate),
            ("distractor_change_rate", self.distractor_change_rate),
            ("distractor_roof_colours", self.distractor_roof_colours),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&self.appearance_shift) || !(0.0..=0.5).contains(&self.pixel_noise) {
            return bad("appearance_shift must lie in [0, 1) and pixel_noise in [0, 0.5]");
        }
        Ok(())
    }

    /// Building count range for this scene size.
    pub fn building_count_range(&self) -> (usize, usize) {
        self.count_range(self.building_density)
    }

    pub fn distractor_count_range(&self) -> (usize, usize) {
        self.count_range(self.distractor_density)
    }

    fn count_range(&self, density: [f64; 2]) -> (usize, usize) {
        let area = (self.size * self.size) as f64 / (256.0 * 256.0);
        let lo = (density[0] * area).round() as usize;
        let hi = (density[1] * area).round() as usize;
        (lo, hi.max(lo))
    }
}

/// One rectangular building, centred at `(cx, cy)` in pixel units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Building {
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
    /// Radians.
    pub angle: f64,
    pub roof: [f32; 3],
    pub present_t1: bool,
    pub present_t2: bool,
}

impl Building {
    /// Whether the centre of pixel `(y, x)` lies inside the footprint.
    pub fn covers(&self, y: usize, x: usize) -> bool {
        let (dx, dy) = (x as f64 + 0.5 - self.cx, y as f64 + 0.5 - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        u.abs() <= self.width / 2.0 && v.abs() <= self.height / 2.0
    }

    pub fn changed(&self) -> bool {
        self.present_t1 != self.present_t2
    }

    /// Pixel bounding box `(y0, y1, x0, x1)`, half-open, clipped to `size`.
    fn bounds(&self, size: usize) -> (usize, usize, usize, usize) {
        let r = 0.5 * (self.width * self.width + self.height * self.height).sqrt() + 1.0;
        let clip = |v: f64| v.clamp(0.0, size as f64) as usize;
        (clip(self.cy - r), clip(self.cy + r + 1.0), clip(self.cx - r), clip(self.cx + r + 1.0))
    }
}

/// Axis-aligned elliptical ground-cover patch. Not part of any mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distractor {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub color: [f32; 3],
    pub present_t1: bool,
    pub present_t2: bool,
}

impl Distractor {
    pub fn covers(&self, y: usize, x: usize) -> bool {
        let u = (x as f64 + 0.5 - self.cx) / self.rx;
        let v = (y as f64 + 0.5 - self.cy) / self.ry;
        u * u + v * v <= 1.0
    }

    fn bounds(&self, size: usize) -> (usize, usize, usize, usize) {
        let clip = |v: f64| v.clamp(0.0, size as f64) as usize;
        (clip(self.cy - self.ry - 1.0), clip(self.cy + self.ry + 2.0), clip(self.cx - self.rx - 1.0), clip(self.cx + self.rx + 2.0))
    }
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub image_t1: Image,
    pub image_t2: Image,
    /// Buildings present at t1.
    pub building_mask: Mask,
    /// Pixels covered at exactly one epoch.
    pub change_mask: Mask,
    pub buildings: Vec<Building>,
    pub distractors: Vec<Distractor>,
}

impl Scene {
    pub fn changed_buildings(&self) -> usize {
        self.buildings.iter().filter(|b| b.changed()).count()
    }
}

/// Raster of the buildings present at one epoch.
pub fn rasterize(buildings: &[Building], size: usize, t2: bool) -> Mask {
    let mut mask = Mask::zeros(size, size);
    for b in buildings.iter().filter(|b| if t2 { b.present_t2 } else { b.present_t1 }) {
        let (y0, y1, x0, x1) = b.bounds(size);
        for y in y0..y1 {
            for x in x0..x1 {
                if b.covers(y, x) {
                    mask.data[y * size + x] = 1;
                }
            }
        }
    }
    mask
}

/// Multi-octave value noise in roughly `[0, 1]`, bilinear with smoothstep.
fn value_noise(rng: &mut impl Rng, size: usize, base_cell: usize, octaves: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; size * size];
    let mut amp = 1.0f32;
    let mut total = 0.0f32;
    let mut cell = base_cell.max(1);
    for _ in 0..octaves {
        let g = size / cell + 2;
        let lattice: Vec<f32> = (0..g * g).map(|_| rng.gen::<f32>()).collect();
        for y in 0..size {
            let fy = y as f32 / cell as f32;
            let (iy, ty) = (fy as usize, fy.fract());
            let sy = ty * ty * (3.0 - 2.0 * ty);
            for x in 0..size {
                let fx = x as f32 / cell as f32;
                let (ix, tx) = (fx as usize, fx.fract());
                let sx = tx * tx * (3.0 - 2.0 * tx);
                let l = |yy: usize, xx: usize| lattice[yy * g + xx];
                let top = l(iy, ix) + (l(iy, ix + 1) - l(iy, ix)) * sx;
                let bot = l(iy + 1, ix) + (l(iy + 1, ix + 1) - l(iy + 1, ix)) * sx;
                out[y * size + x] += amp * (top + (bot - top) * sy);
            }
        }
        total += amp;
        amp *= 0.5;
        cell = (cell / 2).max(1);
    }
    out.iter_mut().for_each(|v| *v /= total);
    out
}

const GROUND: [[f32; 3]; 2] = [[0.30, 0.42, 0.22], [0.55, 0.48, 0.36]];
const ROOFS: [[f32; 3]; 4] = [[0.78, 0.76, 0.74], [0.70, 0.32, 0.26], [0.45, 0.50, 0.60], [0.88, 0.84, 0.70]];
const COVER: [[f32; 3]; 4] = [[0.16, 0.30, 0.12], [0.62, 0.52, 0.34], [0.28, 0.28, 0.30], [0.40, 0.56, 0.24]];

fn tinted(palette: &[[f32; 3]], rng: &mut impl Rng) -> [f32; 3] {
    let base = palette[rng.gen_range(0..palette.len())];
    let tint = rng.gen_range(-0.06f32..0.06);
    base.map(|c| (c + tint).clamp(0.0, 1.0))
}

fn sample_distractor(cfg: &SceneConfig, rng: &mut impl Rng) -> Distractor {
    let r = |rng: &mut dyn rand::RngCore| rng.gen_range(cfg.distractor_radius[0]..=cfg.distractor_radius[1]);
    let (rx, ry) = (r(rng), r(rng));
    let s = cfg.size as f64;
    let (cx, cy) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
    let color = if rng.gen_bool(cfg.distractor_roof_colours) {
        tinted(&ROOFS, rng)
    } else {
        tinted(&COVER, rng)
    };
    let (present_t1, present_t2) = if rng.gen_bool(cfg.distractor_change_rate) {
        if rng.gen_bool(0.5) {
            (true, false)
        } else {
            (false, true)
        }
    } else {
        (true, true)
    };
    Distractor {
        cx,
        cy,
        rx,
        ry,
        color,
        present_t1,
        present_t2,
    }
}

fn sample_building(cfg: &SceneConfig, rng: &mut impl Rng) -> Building {
    let side = |rng: &mut dyn rand::RngCore| rng.gen_range(cfg.building_side[0]..=cfg.building_side[1]);
    let (width, height) = (side(rng), side(rng));
    let angle = if rng.gen_bool(cfg.rotated_fraction) {
        rng.gen_range(0.0..std::f64::consts::FRAC_PI_2)
    } else {
        0.0
    };
    let s = cfg.size as f64;
    let (cx, cy) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
    let roof = tinted(&ROOFS, rng);
    let (present_t1, present_t2) = if rng.gen_bool(cfg.change_rate) {
        if rng.gen_bool(0.5) {
            (true, false)
        } else {
            (false, true)
        }
    } else {
        (true, true)
    };
    Building {
        cx,
        cy,
        width,
        height,
        angle,
        roof,
        present_t1,
        present_t2,
    }
}

struct Layers<'a> {
    terrain: &'a [f32],
    /// Terrain field blended in at t2.
    drift: &'a [f32],
    grain: &'a [f32],
    buildings: &'a [Building],
    distractors: &'a [Distractor],
}

/// Paints terrain, ground cover, then the buildings present at the epoch, then noise.
fn render(cfg: &SceneConfig, layers: &Layers, t2: bool, rng: &mut impl Rng) -> Image {
    let Layers { terrain, drift, grain, buildings, distractors } = *layers;
    let n = cfg.size;
    let plane = n * n;
    let mut data = vec![0.0f32; 3 * plane];
    let w = if t2 { cfg.terrain_change } else { 0.0 };
    for p in 0..plane {
        let t = terrain[p] + w * (drift[p] - terrain[p]);
        for c in 0..3 {
            data[c * plane + p] = GROUND[0][c] + (GROUND[1][c] - GROUND[0][c]) * t + 0.12 * (grain[p] - 0.5);
        }
    }
    for d in distractors.iter().filter(|d| if t2 { d.present_t2 } else { d.present_t1 }) {
        let (y0, y1, x0, x1) = d.bounds(n);
        for y in y0..y1 {
            for x in x0..x1 {
                if d.covers(y, x) {
                    let p = y * n + x;
                    let g = 0.10 * (grain[p] - 0.5);
                    for c in 0..3 {
                        data[c * plane + p] = d.color[c] + g;
                    }
                }
            }
        }
    }
    for b in buildings.iter().filter(|b| if t2 { b.present_t2 } else { b.present_t1 }) {
        let (y0, y1, x0, x1) = b.bounds(n);
        for y in y0..y1 {
            for x in x0..x1 {
                if b.covers(y, x) {
                    let p = y * n + x;
                    // fine roof texture, weaker than the terrain grain
                    let g = 0.04 * (grain[p] - 0.5);
                    for c in 0..3 {
                        data[c * plane + p] = b.roof[c] + g;
                    }
                }
            }
        }
    }
    if t2 {
        let s = cfg.appearance_shift;
        let offset = rng.gen_range(-s / 2.0..=s / 2.0);
        let gains: Vec<f32> = (0..3).map(|_| 1.0 + rng.gen_range(-s..=s)).collect();
        for c in 0..3 {
            data[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v = *v * gains[c] + offset);
        }
    }
    if cfg.pixel_noise > 0.0 {
        let a = cfg.pixel_noise;
        data.iter_mut().for_each(|v| *v += rng.gen_range(-a..=a));
    }
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Image::new(3, n, n, data).expect("sized from config")
}

pub fn generate_scene(cfg: &SceneConfig, rng: &mut impl Rng) -> Result<Scene> {
    cfg.validate()?;
    let n = cfg.size;
    let (lo, hi) = cfg.building_count_range();
    let count = rng.gen_range(lo..=hi);
    let buildings: Vec<Building> = (0..count).map(|_| sample_building(cfg, rng)).collect();
    let terrain = value_noise(rng, n, 64, 4);
    let grain = value_noise(rng, n, 2, 1);
    let (lo, hi) = cfg.distractor_count_range();
    let count = rng.gen_range(lo..=hi);
    let distractors: Vec<Distractor> = (0..count).map(|_| sample_distractor(cfg, rng)).collect();
    let drift = value_noise(rng, n, 64, 4);
    let layers = Layers {
        terrain: &terrain,
        drift: &drift,
        grain: &grain,
        buildings: &buildings,
        distractors: &distractors,
    };
    let image_t1 = render(cfg, &layers, false, rng);
    let image_t2 = render(cfg, &layers, true, rng);
    let building_mask = rasterize(&buildings, n, false);
    let at_t2 = rasterize(&buildings, n, true);
    let change = building_mask.data.iter().zip(&at_t2.data).map(|(a, b)| a ^ b).collect();
    Ok(Scene {
        image_t1,
        image_t2,
        building_mask,
        change_mask: Mask::new(n, n, change)?,
        buildings,
        distractors,
    })
}
