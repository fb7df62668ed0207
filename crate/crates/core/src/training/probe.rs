use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::collapse_statistic_by_category;
use crate::config::ExperimentConfig;
use crate::data::PatchSet;
use crate::error::{Error, Result};
use crate::nn::checkpoint::{encoder_digest, Checkpoint};
use crate::nn::{Mode, SdrlModel};
use crate::objective::{masked_pool, BACKGROUND, FOREGROUND};
use crate::tensor::{Tape, Tensor};

/// Representation diagnostics of a pre-trained model on unaugmented t1 images.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub patches: usize,
    /// Patches with both regions present.
    pub paired: usize,
    pub collapse_stat: f64,
    /// Mean angle in degrees between foreground and background pooled features.
    pub region_angle_deg: f64,
    /// The same angle after the projector.
    pub projection_angle_deg: f64,
}

fn angle_deg(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 90.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Restores a pre-training checkpoint (encoder and heads).
pub fn load_sdrl_model(cfg: &ExperimentConfig, path: &Path) -> Result<SdrlModel> {
    let mut model = SdrlModel::new(&cfg.encoder, &cfg.heads, 0)?;
    Checkpoint::load(path)?.load_into(&mut model.store, "", &encoder_digest(&cfg.encoder))?;
    Ok(model)
}

pub fn probe(model: &mut SdrlModel, set: &PatchSet, batch_size: usize) -> Result<ProbeReport> {
    let (mut pooled, mut cats, mut owner) = (Vec::new(), Vec::new(), Vec::new());
    let mut dim = 0;
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let patches: Vec<_> = chunk.iter().map(|&i| set.get(i)).collect();
        let t = &patches[0].t1;
        let data = patches.iter().flat_map(|p| p.t1.data.iter().copied()).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new([patches.len(), t.channels, t.height, t.width], data)?);
        let feats = model.encode(&mut tape, x, Mode::Eval)?;
        let f = tape.value(feats);
        let (c, plane) = (f.shape()[1], f.shape()[2] * f.shape()[3]);
        dim = c;
        for (n, p) in patches.iter().enumerate() {
            let one = Tensor::new([c, f.shape()[2], f.shape()[3]], f.data()[n * c * plane..(n + 1) * c * plane].to_vec())?;
            let e = masked_pool(&one, &p.mask)?;
            for k in [BACKGROUND, FOREGROUND] {
                if e.valid[k] {
                    pooled.extend_from_slice(&e.vectors[k]);
                    cats.push(k);
                    owner.push(chunk[n]);
                }
            }
        }
    }
    let rows = cats.len();
    if rows == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new([rows, dim], pooled.clone())?);
    let z = model.project(&mut tape, x, Mode::Eval)?;
    let z = tape.value(z).clone();
    let d = z.shape()[1];

    let (mut paired, mut region, mut projected) = (0, 0.0, 0.0);
    for r in 1..rows {
        if owner[r] == owner[r - 1] && cats[r - 1] == BACKGROUND && cats[r] == FOREGROUND {
            paired += 1;
            region += angle_deg(&pooled[(r - 1) * dim..r * dim], &pooled[r * dim..(r + 1) * dim]);
            projected += angle_deg(&z.data()[(r - 1) * d..r * d], &z.data()[r * d..(r + 1) * d]);
        }
    }
    let mean = |s: f64| if paired == 0 { f64::NAN } else { s / paired as f64 };
    Ok(ProbeReport {
        patches: set.len(),
        paired,
        collapse_stat: collapse_statistic_by_category(&z, &cats).unwrap_or(f64::NAN),
        region_angle_deg: mean(region),
        projection_angle_deg: mean(projected),
    })
}
