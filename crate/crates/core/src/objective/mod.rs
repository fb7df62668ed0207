//! Region-decoupled pre-training objective.
//!
//! Dense features are pooled separately over the building and background
//! regions of a binary mask. Within a t1 view the two region vectors are
//! pushed apart with `cos(x_fg, x_bg) + 1`. Across the two views of each
//! temporal image, the predictor output of one view regresses the
//! stop-gradient projection of the other, per region.

use serde::{Deserialize, Serialize};

use crate::augmentation::ViewBundle;
use crate::error::{Error, Result};
use crate::nn::{Mode, SdrlNet};
use crate::raster::Mask;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

pub const BACKGROUND: usize = 0;
pub const FOREGROUND: usize = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveMode {
    /// Region-pooled embeddings with the dissimilarity term.
    #[default]
    Sdrl,
    /// One globally pooled embedding per view, no dissimilarity term.
    Global,
}

impl std::str::FromStr for ObjectiveMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sdrl" => Ok(Self::Sdrl),
            "global" => Ok(Self::Global),
            _ => Err(Error::ConfigInvalid(format!("unknown objective `{s}`"))),
        }
    }
}

/// How t2 views are pooled. The mask is registered to t1, so at t2 it may
/// not match the image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum T2MaskPolicy {
    /// Pool t2 views with the t1 mask under each view's flips.
    #[default]
    UseM,
    /// Pool t2 views globally; they then contribute a single similarity term.
    GlobalPool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub mode: ObjectiveMode,
    pub t2_mask_policy: T2MaskPolicy,
    /// Disabling this is a diagnostic for the collapse experiment only.
    pub stop_gradient: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            mode: ObjectiveMode::Sdrl,
            t2_mask_policy: T2MaskPolicy::UseM,
            stop_gradient: true,
        }
    }
}

/// Downsamples a binary mask by integer factors. An output cell is
/// foreground when at least half of its source block is.
pub fn resize_mask(mask: &Mask, ho: usize, wo: usize) -> Result<Mask> {
    let (h, w) = (mask.height, mask.width);
    if ho == 0 || wo == 0 || ho > h || wo > w || h % ho != 0 || w % wo != 0 {
        return Err(Error::NonIntegerRatio {
            from: (h, w),
            to: (ho, wo),
        });
    }
    if mask.data.iter().any(|&v| v > 1) {
        return Err(Error::NonBinaryMask);
    }
    let (fy, fx) = (h / ho, w / wo);
    let mut out = vec![0u8; ho * wo];
    for oy in 0..ho {
        for ox in 0..wo {
            let mut ones = 0usize;
            for y in oy * fy..(oy + 1) * fy {
                for x in ox * fx..(ox + 1) * fx {
                    ones += mask.data[y * w + x] as usize;
                }
            }
            out[oy * wo + ox] = (2 * ones >= fy * fx) as u8;
        }
    }
    Mask::new(ho, wo, out)
}

/// Per-region pooled vectors of one feature map, indexed by category.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticEmbeddings {
    pub vectors: Vec<Vec<f32>>,
    pub valid: Vec<bool>,
}

/// Binary indicator per category (background, foreground) at feature size.
pub fn region_masks(mask: &Mask, hf: usize, wf: usize) -> Result<[Mask; 2]> {
    let fg = resize_mask(mask, hf, wf)?;
    let bg = Mask {
        height: hf,
        width: wf,
        data: fg.data.iter().map(|&v| 1 - v).collect(),
    };
    Ok([bg, fg])
}

fn mask_tensor(masks: &[&Mask]) -> Tensor {
    let (h, w) = (masks[0].height, masks[0].width);
    let data = masks.iter().flat_map(|m| m.data.iter().map(|&v| v as f32)).collect();
    Tensor::new([masks.len(), h, w], data).expect("mask extents are positive")
}

/// Pools a `[c, h, w]` (or `[1, c, h, w]`) feature map over the two regions
/// of `mask`. Empty regions give zero vectors flagged invalid.
pub fn masked_pool(features: &Tensor, mask: &Mask) -> Result<SemanticEmbeddings> {
    let f = match features.ndim() {
        3 => {
            let s = features.shape();
            features.clone().reshaped([1, s[0], s[1], s[2]])?
        }
        4 if features.shape()[0] == 1 => features.clone(),
        _ => return Err(Error::shape("masked_pool", format!("features {:?}", features.shape()))),
    };
    let (hf, wf) = (f.shape()[2], f.shape()[3]);
    let regions = region_masks(mask, hf, wf)?;
    let mut tape = Tape::new();
    let x = tape.constant(f);
    let mut vectors = Vec::with_capacity(2);
    let mut valid = Vec::with_capacity(2);
    for r in &regions {
        let v = tape.masked_spatial_mean(x, &mask_tensor(&[r]))?;
        vectors.push(tape.value(v).data().to_vec());
        valid.push(r.count_ones() > 0);
    }
    Ok(SemanticEmbeddings { vectors, valid })
}

/// Row-wise `cos(x_fg, x_bg) + 1`, in `[0, 2]`.
pub fn semantic_dissimilarity_loss(tape: &mut Tape, x_fg: Var, x_bg: Var) -> Result<Var> {
    let c = tape.cosine_similarity(x_fg, x_bg)?;
    let one = tape.constant(Tensor::full(tape.value(c).shape().to_vec(), 1.0));
    tape.add(c, one)
}

/// Row-wise `1 - (cos(p1, sg(z2)) + cos(p2, sg(z1))) / 2`, in `[0, 2]`.
pub fn cross_view_similarity_loss(
    tape: &mut Tape,
    p1: Var,
    z2: Var,
    p2: Var,
    z1: Var,
    stop_gradient: bool,
) -> Result<Var> {
    let (z1, z2) = if stop_gradient {
        (tape.stop_gradient(z1)?, tape.stop_gradient(z2)?)
    } else {
        (z1, z2)
    };
    let a = tape.cosine_similarity(p1, z2)?;
    let b = tape.cosine_similarity(p2, z1)?;
    let s = tape.add(a, b)?;
    let s = tape.scalar_mul(s, -0.5)?;
    let one = tape.constant(Tensor::full(tape.value(s).shape().to_vec(), 1.0));
    tape.add(s, one)
}

/// Loss of one sample, or the mean over the samples of a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_sd: f64,
    pub l_s: f64,
    pub total: f64,
    pub sd_terms: usize,
    pub s_terms: usize,
}

pub struct BatchLoss {
    /// Scalar mean of the per-sample totals over non-skipped samples.
    pub loss: Var,
    pub mean: LossBreakdown,
    /// `None` for samples with no computable similarity term.
    pub samples: Vec<Option<LossBreakdown>>,
    pub skipped: usize,
    /// Projections fed to the similarity terms, `[rows, C']`.
    pub projections: Tensor,
    /// Category of each projection row.
    pub projection_categories: Vec<usize>,
}

/// Row of view `(i, j)` of sample `n` in the stacked batch.
fn row(n: usize, i: usize, j: usize) -> usize {
    n * 4 + i * 2 + j
}

/// Encodes all `4N` views of a batch in one pass and builds the objective.
/// Projector batch statistics are taken over the valid region rows only.
pub fn batch_loss(
    net: &SdrlNet,
    store: &mut ParamStore,
    tape: &mut Tape,
    bundles: &[ViewBundle],
    cfg: &ObjectiveConfig,
    mode: Mode,
) -> Result<BatchLoss> {
    if bundles.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let first = &bundles[0].views[0][0].image;
    let (ch, h, w) = (first.channels, first.height, first.width);
    let mut data = Vec::with_capacity(bundles.len() * 4 * ch * h * w);
    for b in bundles {
        for v in b.views.iter().flatten() {
            if (v.image.channels, v.image.height, v.image.width) != (ch, h, w) {
                return Err(Error::shape("batch_loss", "views differ in size"));
            }
            data.extend_from_slice(&v.image.data);
        }
    }
    let rows = bundles.len() * 4;
    let x = tape.constant(Tensor::new([rows, ch, h, w], data)?);
    let feats = net.encode(tape, store, x, mode)?;
    let (hf, wf) = {
        let s = tape.value(feats).shape();
        (s[2], s[3])
    };

    // pooled[k] is [rows, C]; valid[k][r] marks a non-empty region
    let mut pooled: Vec<Var> = Vec::new();
    let mut valid: Vec<Vec<bool>> = Vec::new();
    match cfg.mode {
        ObjectiveMode::Global => {
            pooled.push(tape.spatial_mean(feats)?);
            valid.push(vec![true; rows]);
        }
        ObjectiveMode::Sdrl => {
            let ones = Mask::ones(hf, wf);
            let empty = Mask::zeros(hf, wf);
            let mut per_cat: [Vec<Mask>; 2] = [Vec::with_capacity(rows), Vec::with_capacity(rows)];
            for b in bundles {
                for (i, views) in b.views.iter().enumerate() {
                    for v in views {
                        let [bg, fg] = if i == 1 && cfg.t2_mask_policy == T2MaskPolicy::GlobalPool {
                            [empty.clone(), ones.clone()]
                        } else {
                            region_masks(&v.mask, hf, wf)?
                        };
                        per_cat[BACKGROUND].push(bg);
                        per_cat[FOREGROUND].push(fg);
                    }
                }
            }
            for masks in &per_cat {
                let refs: Vec<&Mask> = masks.iter().collect();
                pooled.push(tape.masked_spatial_mean(feats, &mask_tensor(&refs))?);
                valid.push(masks.iter().map(|m| m.count_ones() > 0).collect());
            }
        }
    }
    let cats = pooled.len();

    let mut sd_rows = Vec::new();
    let mut sd_owner = Vec::new();
    if cfg.mode == ObjectiveMode::Sdrl {
        for n in 0..bundles.len() {
            for j in 0..2 {
                let r = row(n, 0, j);
                if valid[FOREGROUND][r] && valid[BACKGROUND][r] {
                    sd_rows.push(r);
                    sd_owner.push(n);
                }
            }
        }
    }

    // projector input: valid rows, category-major
    let mut position = vec![vec![usize::MAX; rows]; cats];
    let mut parts = Vec::new();
    let mut categories = Vec::new();
    for k in 0..cats {
        let idx: Vec<usize> = (0..rows).filter(|&r| valid[k][r]).collect();
        if idx.is_empty() {
            continue;
        }
        for (p, &r) in idx.iter().enumerate() {
            position[k][r] = categories.len() + p;
        }
        categories.extend(std::iter::repeat(k).take(idx.len()));
        parts.push(tape.select(pooled[k], &idx)?);
    }
    if parts.is_empty() {
        return Err(Error::AllRegionsInvalid);
    }
    let xs = if parts.len() == 1 { parts[0] } else { tape.concat(&parts, 0)? };
    let z = net.project(tape, store, xs, mode)?;
    let p = net.predict(tape, store, z, mode)?;

    let (mut first_view, mut second_view, mut s_owner) = (Vec::new(), Vec::new(), Vec::new());
    for n in 0..bundles.len() {
        for i in 0..2 {
            for k in 0..cats {
                let (r1, r2) = (row(n, i, 0), row(n, i, 1));
                if valid[k][r1] && valid[k][r2] {
                    first_view.push(position[k][r1]);
                    second_view.push(position[k][r2]);
                    s_owner.push(n);
                }
            }
        }
    }
    if s_owner.is_empty() {
        return Err(Error::AllRegionsInvalid);
    }

    let count = |owner: &[usize], n: usize| owner.iter().filter(|&&o| o == n).count();
    let used: Vec<bool> = (0..bundles.len()).map(|n| count(&s_owner, n) > 0).collect();
    let n_used = used.iter().filter(|&&u| u).count() as f64;

    let weights = |owner: &[usize]| -> Vec<f32> {
        owner
            .iter()
            .map(|&n| if used[n] { (1.0 / (count(owner, n) as f64 * n_used)) as f32 } else { 0.0 })
            .collect()
    };

    let p1 = tape.select(p, &first_view)?;
    let z2 = tape.select(z, &second_view)?;
    let p2 = tape.select(p, &second_view)?;
    let z1 = tape.select(z, &first_view)?;
    let s_terms = cross_view_similarity_loss(tape, p1, z2, p2, z1, cfg.stop_gradient)?;
    let w_s = tape.constant(Tensor::from_vec(weights(&s_owner)));
    let mut loss = tape.dot(s_terms, w_s)?;

    let sd_terms = if sd_rows.is_empty() {
        None
    } else {
        let fg = tape.select(pooled[FOREGROUND], &sd_rows)?;
        let bg = tape.select(pooled[BACKGROUND], &sd_rows)?;
        let t = semantic_dissimilarity_loss(tape, fg, bg)?;
        let w = tape.constant(Tensor::from_vec(weights(&sd_owner)));
        let l = tape.dot(t, w)?;
        loss = tape.add(loss, l)?;
        Some(t)
    };

    let s_vals = tape.value(s_terms).data().to_vec();
    let sd_vals = sd_terms.map(|t| tape.value(t).data().to_vec()).unwrap_or_default();
    let mut samples = Vec::with_capacity(bundles.len());
    let mut mean = LossBreakdown::default();
    for n in 0..bundles.len() {
        if !used[n] {
            samples.push(None);
            continue;
        }
        let avg = |owner: &[usize], vals: &[f32]| -> (f64, usize) {
            let picked: Vec<f64> = owner.iter().zip(vals).filter(|(&o, _)| o == n).map(|(_, &v)| v as f64).collect();
            if picked.is_empty() {
                (0.0, 0)
            } else {
                (picked.iter().sum::<f64>() / picked.len() as f64, picked.len())
            }
        };
        let (l_sd, sd_count) = avg(&sd_owner, &sd_vals);
        let (l_s, s_count) = avg(&s_owner, &s_vals);
        let b = LossBreakdown {
            l_sd,
            l_s,
            total: l_sd + l_s,
            sd_terms: sd_count,
            s_terms: s_count,
        };
        mean.l_sd += b.l_sd / n_used;
        mean.l_s += b.l_s / n_used;
        mean.sd_terms += sd_count;
        mean.s_terms += s_count;
        samples.push(Some(b));
    }
    mean.total = mean.l_sd + mean.l_s;

    Ok(BatchLoss {
        loss,
        mean,
        skipped: samples.iter().filter(|s| s.is_none()).count(),
        samples,
        projections: tape.value(z).clone(),
        projection_categories: categories,
    })
}

/// Loss of a single sample; [`Error::AllRegionsInvalid`] if no similarity
/// term exists.
pub fn sample_loss(
    net: &SdrlNet,
    store: &mut ParamStore,
    bundle: &ViewBundle,
    cfg: &ObjectiveConfig,
    mode: Mode,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let b = batch_loss(net, store, &mut tape, std::slice::from_ref(bundle), cfg, mode)?;
    Ok(b.mean)
}
