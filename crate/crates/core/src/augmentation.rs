//! Paired view generation: flips move image and mask together, colour jitter
//! and blur touch the image only. There is no cropping, so views keep the
//! source resolution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Image, Mask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub jitter_prob: f64,
    /// Jitter factors are drawn from `[1 - s, 1 + s]`.
    pub jitter_strength: f32,
    pub blur_prob: f64,
    pub blur_sigma_min: f32,
    pub blur_sigma_max: f32,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            jitter_prob: 0.8,
            jitter_strength: 0.4,
            blur_prob: 0.5,
            blur_sigma_min: 0.1,
            blur_sigma_max: 2.0,
        }
    }
}

impl AugmentationConfig {
    /// Every view equals its source.
    pub fn none() -> Self {
        Self {
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            jitter_prob: 0.0,
            blur_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [self.hflip_prob, self.vflip_prob, self.jitter_prob, self.blur_prob];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::ConfigInvalid("augmentation: probabilities must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.jitter_strength) {
            return Err(Error::ConfigInvalid("augmentation: jitter_strength must lie in [0, 1)".into()));
        }
        if !(self.blur_sigma_min > 0.0 && self.blur_sigma_min <= self.blur_sigma_max) {
            return Err(Error::ConfigInvalid("augmentation: need 0 < blur_sigma_min <= blur_sigma_max".into()));
        }
        Ok(())
    }

    /// Draws one view's parameters. The number of draws is fixed, so the
    /// stream position never depends on earlier outcomes.
    pub fn sample_params(&self, rng: &mut impl Rng) -> AugmentationParams {
        let hflip = rng.gen_bool(self.hflip_prob);
        let vflip = rng.gen_bool(self.vflip_prob);
        let apply_jitter = rng.gen_bool(self.jitter_prob);
        let s = self.jitter_strength;
        let mut factor = || if s > 0.0 { rng.gen_range(1.0 - s..=1.0 + s) } else { 1.0 };
        let (brightness_factor, contrast_factor, saturation_factor) = (factor(), factor(), factor());
        let apply_blur = rng.gen_bool(self.blur_prob);
        let blur_sigma = rng.gen_range(self.blur_sigma_min..=self.blur_sigma_max);
        AugmentationParams {
            hflip,
            vflip,
            apply_jitter,
            brightness_factor,
            contrast_factor,
            saturation_factor,
            apply_blur,
            blur_sigma,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationParams {
    pub hflip: bool,
    pub vflip: bool,
    pub apply_jitter: bool,
    pub brightness_factor: f32,
    pub contrast_factor: f32,
    pub saturation_factor: f32,
    pub apply_blur: bool,
    pub blur_sigma: f32,
}

impl AugmentationParams {
    pub fn identity() -> Self {
        Self {
            hflip: false,
            vflip: false,
            apply_jitter: false,
            brightness_factor: 1.0,
            contrast_factor: 1.0,
            saturation_factor: 1.0,
            apply_blur: false,
            blur_sigma: 1.0,
        }
    }

    /// The same flips with photometric steps switched off.
    pub fn geometric_only(&self) -> Self {
        Self {
            hflip: self.hflip,
            vflip: self.vflip,
            ..Self::identity()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("params serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

pub fn flip_image(img: &Image, horizontal: bool) -> Image {
    let (h, w) = (img.height, img.width);
    let mut out = img.clone();
    for c in 0..img.channels {
        let src = img.plane(c);
        let dst = &mut out.data[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = if horizontal { (y, w - 1 - x) } else { (h - 1 - y, x) };
                dst[y * w + x] = src[sy * w + sx];
            }
        }
    }
    out
}

pub fn flip_mask(mask: &Mask, horizontal: bool) -> Mask {
    let (h, w) = (mask.height, mask.width);
    let mut out = mask.clone();
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = if horizontal { (y, w - 1 - x) } else { (h - 1 - y, x) };
            out.data[y * w + x] = mask.data[sy * w + sx];
        }
    }
    out
}

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

fn gray(img: &Image) -> Vec<f32> {
    let s = img.height * img.width;
    if img.channels != 3 {
        return img.plane(0).to_vec();
    }
    (0..s)
        .map(|p| LUMA[0] * img.data[p] + LUMA[1] * img.data[s + p] + LUMA[2] * img.data[2 * s + p])
        .collect()
}

fn clamp01(img: &mut Image) {
    img.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

/// Brightness, contrast, saturation in that order, clamping after each.
pub fn color_jitter(img: &Image, brightness: f32, contrast: f32, saturation: f32) -> Image {
    let mut out = img.clone();
    out.data.iter_mut().for_each(|v| *v *= brightness);
    clamp01(&mut out);

    let g = gray(&out);
    let mean = (g.iter().map(|&v| v as f64).sum::<f64>() / g.len() as f64) as f32;
    out.data.iter_mut().for_each(|v| *v = (*v - mean) * contrast + mean);
    clamp01(&mut out);

    if out.channels == 3 {
        let g = gray(&out);
        let s = out.height * out.width;
        for c in 0..3 {
            for (v, &gv) in out.data[c * s..(c + 1) * s].iter_mut().zip(&g) {
                *v = (*v - gv) * saturation + gv;
            }
        }
        clamp01(&mut out);
    }
    out
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

pub fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma as f64 * sigma as f64)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter().map(|v| (v / total) as f32).collect()
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_blur(img: &Image, sigma: f32) -> Image {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = (img.height, img.width);
    let mut out = img.clone();
    let mut tmp = vec![0.0f32; h * w];
    for c in 0..img.channels {
        let src = img.plane(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f32;
                for (t, &kv) in k.iter().enumerate() {
                    acc += kv * src[y * w + reflect(x as isize + t as isize - r, w)];
                }
                tmp[y * w + x] = acc;
            }
        }
        let dst = &mut out.data[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f32;
                for (t, &kv) in k.iter().enumerate() {
                    acc += kv * tmp[reflect(y as isize + t as isize - r, h) * w + x];
                }
                dst[y * w + x] = acc;
            }
        }
    }
    out
}

/// Applies `params` to an aligned image/mask pair.
pub fn apply(image: &Image, mask: &Mask, params: &AugmentationParams) -> Result<(Image, Mask)> {
    if image.height != mask.height || image.width != mask.width {
        return Err(Error::shape(
            "augment",
            format!("image {}x{} vs mask {}x{}", image.height, image.width, mask.height, mask.width),
        ));
    }
    let mut img = image.clone();
    let mut m = mask.clone();
    if params.hflip {
        img = flip_image(&img, true);
        m = flip_mask(&m, true);
    }
    if params.vflip {
        img = flip_image(&img, false);
        m = flip_mask(&m, false);
    }
    if params.apply_jitter {
        img = color_jitter(&img, params.brightness_factor, params.contrast_factor, params.saturation_factor);
    }
    if params.apply_blur {
        img = gaussian_blur(&img, params.blur_sigma);
    }
    clamp01(&mut img);
    Ok((img, m))
}

/// One pre-training example: a co-registered pair and the t1 building mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub t1: Image,
    pub t2: Image,
    pub mask: Mask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub image: Image,
    pub mask: Mask,
}

/// Two views of each temporal image, indexed `[temporal][view]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewBundle {
    pub views: [[View; 2]; 2],
    pub params: [[AugmentationParams; 2]; 2],
}

impl ViewBundle {
    pub fn params_json(&self) -> String {
        serde_json::to_string(&self.params).expect("params serialize")
    }
}

/// Draws four parameter sets (t1 view 1, t1 view 2, t2 view 1, t2 view 2)
/// and applies them. Both temporal images take their mask from `sample.mask`.
pub fn make_view_bundle(sample: &Sample, cfg: &AugmentationConfig, rng: &mut impl Rng) -> Result<ViewBundle> {
    let mut params = [[AugmentationParams::identity(); 2]; 2];
    for row in params.iter_mut() {
        for p in row.iter_mut() {
            *p = cfg.sample_params(rng);
        }
    }
    replay_bundle(sample, &params)
}

pub fn replay_bundle(sample: &Sample, params: &[[AugmentationParams; 2]; 2]) -> Result<ViewBundle> {
    let view = |img: &Image, p: &AugmentationParams| -> Result<View> {
        let (image, mask) = apply(img, &sample.mask, p)?;
        Ok(View { image, mask })
    };
    Ok(ViewBundle {
        views: [
            [view(&sample.t1, &params[0][0])?, view(&sample.t1, &params[0][1])?],
            [view(&sample.t2, &params[1][0])?, view(&sample.t2, &params[1][1])?],
        ],
        params: *params,
    })
}

pub fn bundle_params_from_json(s: &str) -> Result<[[AugmentationParams; 2]; 2]> {
    Ok(serde_json::from_str(s)?)
}

/// Independent stream for sample `index` of `epoch` under `seed`.
pub fn sample_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((epoch << 32) | (index & 0xffff_ffff));
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig, Strategy};

    fn random_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(3, h, w, (0..3 * h * w).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    fn random_mask(seed: u64, h: usize, w: usize) -> Mask {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mask::new(h, w, (0..h * w).map(|_| rng.gen_bool(0.3) as u8).collect()).unwrap()
    }

    #[test]
    fn sampling_is_reproducible() {
        let cfg = AugmentationConfig::default();
        let a = cfg.sample_params(&mut ChaCha8Rng::seed_from_u64(42));
        let b = cfg.sample_params(&mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(a, b);
    }

    #[test]
    fn hflip_frequency_is_near_one_half() {
        let cfg = AugmentationConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 10_000;
        let hits = (0..n).filter(|_| cfg.sample_params(&mut rng).hflip).count();
        let f = hits as f64 / n as f64;
        assert!((0.47..=0.53).contains(&f), "{f}");
    }

    #[test]
    fn factors_and_sigma_stay_in_range() {
        let cfg = AugmentationConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..2000 {
            let p = cfg.sample_params(&mut rng);
            for f in [p.brightness_factor, p.contrast_factor, p.saturation_factor] {
                assert!((0.6..=1.4).contains(&f));
            }
            assert!((0.1..=2.0).contains(&p.blur_sigma));
        }
    }

    #[test]
    fn identity_params_leave_inputs_unchanged() {
        let (img, mask) = (random_image(1, 9, 7), random_mask(2, 9, 7));
        let (i2, m2) = apply(&img, &mask, &AugmentationParams::identity()).unwrap();
        assert_eq!(i2, img);
        assert_eq!(m2, mask);
    }

    #[test]
    fn hflip_twice_is_identity() {
        let img = random_image(3, 6, 5);
        assert_eq!(flip_image(&flip_image(&img, true), true), img);
        let p = AugmentationParams {
            hflip: true,
            ..AugmentationParams::identity()
        };
        let mask = random_mask(4, 6, 5);
        let (once, m1) = apply(&img, &mask, &p).unwrap();
        let (twice, m2) = apply(&once, &m1, &p).unwrap();
        assert_eq!(twice, img);
        assert_eq!(m2, mask);
    }

    #[test]
    fn mask_follows_the_image_flip() {
        let (img, mask) = (random_image(5, 8, 8), random_mask(6, 8, 8));
        let p = AugmentationParams {
            hflip: true,
            apply_jitter: true,
            brightness_factor: 1.2,
            contrast_factor: 0.7,
            saturation_factor: 1.3,
            ..AugmentationParams::identity()
        };
        let (i2, m2) = apply(&img, &mask, &p).unwrap();
        // jitter statistics are global, so it commutes with a flip
        let expected = color_jitter(&flip_image(&img, true), 1.2, 0.7, 1.3);
        assert_eq!(i2, expected);
        // the mask oracle flips by explicit index arithmetic
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(m2.at(y, x), mask.at(y, 7 - x));
            }
        }
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let err = apply(&random_image(1, 4, 4), &Mask::zeros(4, 5), &AugmentationParams::identity());
        assert!(matches!(err, Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn blur_preserves_constants_and_smooths_impulses() {
        let flat = Image::filled(3, 7, 9, 0.25);
        let b = gaussian_blur(&flat, 1.3);
        assert!(b.data.iter().all(|v| (v - 0.25).abs() < 1e-6));

        let mut imp = Image::filled(1, 9, 9, 0.0);
        imp.data[4 * 9 + 4] = 1.0;
        let b = gaussian_blur(&imp, 1.0);
        let k = gaussian_kernel(1.0);
        assert_eq!(k.len(), 7);
        // separable blur of a centred impulse is the outer product of the kernel
        for y in 0..9 {
            for x in 0..9 {
                let (dy, dx) = (y as isize - 4 + 3, x as isize - 4 + 3);
                let want = if (0..7).contains(&dy) && (0..7).contains(&dx) {
                    k[dy as usize] * k[dx as usize]
                } else {
                    0.0
                };
                assert!((b.data[y * 9 + x] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn reflect_padding_mirrors_without_repeating_the_edge() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(9, 5), 1);
        assert_eq!(reflect(3, 1), 0);
    }

    #[test]
    fn zero_augmentation_bundle_reproduces_sources() {
        let s = Sample {
            t1: random_image(1, 8, 8),
            t2: random_image(2, 8, 8),
            mask: random_mask(3, 8, 8),
        };
        let b = make_view_bundle(&s, &AugmentationConfig::none(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for (i, src) in [&s.t1, &s.t2].into_iter().enumerate() {
            for v in &b.views[i] {
                assert_eq!(&v.image, src);
                assert_eq!(v.mask, s.mask);
            }
        }
    }

    #[test]
    fn bundle_views_differ_and_replay_is_bitwise() {
        let s = Sample {
            t1: random_image(1, 16, 16),
            t2: random_image(2, 16, 16),
            mask: random_mask(3, 16, 16),
        };
        let b = make_view_bundle(&s, &AugmentationConfig::default(), &mut sample_rng(5, 0, 3)).unwrap();
        assert_ne!(b.params[0][0], b.params[0][1]);
        assert_ne!(b.views[0][0].image, b.views[0][1].image);
        let params = bundle_params_from_json(&b.params_json()).unwrap();
        let again = replay_bundle(&s, &params).unwrap();
        assert_eq!(again, b);
    }

    #[test]
    fn sample_streams_are_distinct() {
        let a: u64 = sample_rng(1, 0, 0).gen();
        let b: u64 = sample_rng(1, 0, 1).gen();
        let c: u64 = sample_rng(1, 1, 0).gen();
        assert!(a != b && a != c && b != c);
        assert_eq!(a, sample_rng(1, 0, 0).gen::<u64>());
    }

    fn arb_params() -> impl Strategy<Value = AugmentationParams> {
        (any::<bool>(), any::<bool>(), any::<bool>(), 0.6f32..1.4, 0.6f32..1.4, 0.6f32..1.4, any::<bool>(), 0.1f32..2.0).prop_map(
            |(hflip, vflip, apply_jitter, b, c, s, apply_blur, sigma)| AugmentationParams {
                hflip,
                vflip,
                apply_jitter,
                brightness_factor: b,
                contrast_factor: c,
                saturation_factor: s,
                apply_blur,
                blur_sigma: sigma,
            },
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn geometry_moves_indicator_and_mask_together(seed in 0u64..1000, h in 1usize..12, w in 1usize..12, p in arb_params()) {
            let mask = random_mask(seed, h, w);
            let ind = Image::new(3, h, w, (0..3).flat_map(|_| mask.data.iter().map(|&v| v as f32)).collect()).unwrap();
            let (img, m) = apply(&ind, &mask, &p.geometric_only()).unwrap();
            for q in 0..h * w {
                prop_assert_eq!(img.data[q] > 0.0, m.data[q] == 1);
            }
            let (full, m_full) = apply(&ind, &mask, &p).unwrap();
            prop_assert_eq!(&m_full, &m);
            prop_assert_eq!((full.height, full.width), (h, w));
            prop_assert!(full.data.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(m_full.data.iter().all(|&v| v <= 1));
        }
    }
}
