use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;

use super::metrics::collapse_statistic_by_category;
use super::optim::{poly_lr, sgd_step};
use super::record::{write_csv, PretrainEpochLog, RunRecord, StepLog};
use crate::augmentation::{make_view_bundle, sample_rng, AugmentationConfig, ViewBundle};
use crate::config::ExperimentConfig;
use crate::data::{Manifest, PatchSet, Split};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{encoder_digest, Checkpoint};
use crate::nn::{Mode, SdrlModel};
use crate::objective::{batch_loss, LossBreakdown};
use crate::tensor::{Tape, Tensor};

/// Epoch index used for the fixed validation views.
const VAL_EPOCH: u64 = 0x7fff_ffff;

/// Stream for the sample order of `epoch`, disjoint from the per-sample
/// augmentation streams.
pub(crate) fn shuffle_rng(seed: u64, epoch: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((1 << 63) | epoch);
    rng
}

pub struct PretrainOutcome {
    pub model: SdrlModel,
    pub record: RunRecord<PretrainEpochLog>,
    pub best_epoch: usize,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
}

struct Evaluation {
    mean: LossBreakdown,
    collapse: f64,
}

fn bundles(set: &PatchSet, idx: &[usize], aug: &AugmentationConfig, seed: u64, epoch: u64) -> Result<Vec<ViewBundle>> {
    idx.iter()
        .map(|&i| make_view_bundle(&set.get(i).sample(), aug, &mut sample_rng(seed, epoch, i as u64)))
        .collect()
}

fn evaluate(model: &mut SdrlModel, set: &PatchSet, cfg: &ExperimentConfig) -> Result<Evaluation> {
    let mut mean = LossBreakdown::default();
    let mut used = 0usize;
    let (mut rows, mut cats) = (Vec::new(), Vec::new());
    let mut dim = 0;
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(cfg.pretrain.batch_size) {
        let b = bundles(set, chunk, &cfg.augmentation, cfg.seed, VAL_EPOCH)?;
        let mut tape = Tape::new();
        let out = batch_loss(&model.net, &mut model.store, &mut tape, &b, &cfg.objective, Mode::Eval)?;
        let n = chunk.len() - out.skipped;
        mean.l_sd += out.mean.l_sd * n as f64;
        mean.l_s += out.mean.l_s * n as f64;
        used += n;
        dim = out.projections.shape()[1];
        rows.extend_from_slice(out.projections.data());
        cats.extend_from_slice(&out.projection_categories);
    }
    if used > 0 {
        mean.l_sd /= used as f64;
        mean.l_s /= used as f64;
    }
    mean.total = mean.l_sd + mean.l_s;
    let z = Tensor::new([cats.len(), dim.max(1)], rows)?;
    let collapse = collapse_statistic_by_category(&z, &cats).unwrap_or(f64::NAN);
    Ok(Evaluation { mean, collapse })
}

fn save_checkpoint(model: &SdrlModel, path: &Path) -> Result<()> {
    Checkpoint::from_store(&model.store, encoder_digest(model.encoder_config())).save(path)
}

/// Self-supervised pre-training on the train split of `manifest`. Writes
/// `metrics.csv` (per step), `epochs.csv` (per epoch validation),
/// `best.ckpt` (lowest validation loss), `last.ckpt`, `config.toml` and
/// `run.json` into `out`.
pub fn pretrain(cfg: &ExperimentConfig, manifest: &Manifest, out: &Path) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let train = PatchSet::load(manifest, manifest.records_in(Split::Train))?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let val = PatchSet::load(manifest, manifest.records_in(Split::Val))?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    cfg.save_resolved(out)?;

    let mut model = SdrlModel::new(&cfg.encoder, &cfg.heads, cfg.seed)?;
    let bs = cfg.pretrain.batch_size;
    let steps_per_epoch = train.len().div_ceil(bs);
    let max_steps = cfg.pretrain.epochs * steps_per_epoch;
    let opt = &cfg.optimizer;
    let (best_path, last_path) = (out.join("best.ckpt"), out.join("last.ckpt"));

    let mut steps = Vec::with_capacity(max_steps);
    let mut epochs = Vec::with_capacity(cfg.pretrain.epochs);
    let mut best: Option<(usize, f64)> = None;
    let mut step = 0;
    for epoch in 0..cfg.pretrain.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut shuffle_rng(cfg.seed, epoch as u64));
        let mut train_total = 0.0;
        for chunk in order.chunks(bs) {
            let b = bundles(&train, chunk, &cfg.augmentation, cfg.seed, epoch as u64)?;
            let mut tape = Tape::new();
            let out = batch_loss(&model.net, &mut model.store, &mut tape, &b, &cfg.objective, Mode::Train)?;
            let m = out.mean;
            if !(m.total.is_finite() && tape.value(out.loss).all_finite()) {
                return Err(Error::NonFiniteLoss {
                    step,
                    epoch,
                    detail: format!("l_sd {} l_s {} over {} samples ({} skipped)", m.l_sd, m.l_s, chunk.len(), out.skipped),
                });
            }
            let collapse_stat = collapse_statistic_by_category(&out.projections, &out.projection_categories).unwrap_or(f64::NAN);
            let grads = tape.backward(out.loss)?;
            let lr = poly_lr(step, max_steps, opt.base_lr, opt.poly_power);
            sgd_step(&mut model.store, &grads, lr, opt)?;
            steps.push(StepLog {
                step,
                epoch,
                lr,
                l_sd: m.l_sd,
                l_s: m.l_s,
                total: m.total,
                collapse_stat,
            });
            log::debug!("step {step} lr {lr:.5} total {:.4} collapse {collapse_stat:.4}", m.total);
            train_total += m.total / steps_per_epoch as f64;
            step += 1;
        }

        let eval = if val.is_empty() { None } else { Some(evaluate(&mut model, &val, cfg)?) };
        let (val_mean, val_collapse) = eval.map_or((LossBreakdown::default(), f64::NAN), |e| (e.mean, e.collapse));
        let log_row = PretrainEpochLog {
            epoch,
            train_total,
            val_l_sd: val_mean.l_sd,
            val_l_s: val_mean.l_s,
            val_total: val_mean.total,
            val_collapse_stat: val_collapse,
        };
        log::info!(
            "epoch {epoch}: train {train_total:.4} val {:.4} (l_sd {:.4}, l_s {:.4}) collapse {val_collapse:.4}",
            val_mean.total,
            val_mean.l_sd,
            val_mean.l_s
        );
        epochs.push(log_row);

        let score = if val.is_empty() { train_total } else { val_mean.total };
        if best.map_or(true, |(_, s)| score < s || s.is_nan()) {
            best = Some((epoch, score));
            save_checkpoint(&model, &best_path)?;
        }
    }
    save_checkpoint(&model, &last_path)?;
    if best.is_none() {
        save_checkpoint(&model, &best_path)?;
    }
    write_csv(&out.join("metrics.csv"), &steps)?;
    write_csv(&out.join("epochs.csv"), &epochs)?;

    let record = RunRecord {
        seed: cfg.seed,
        config: serde_json::to_value(cfg)?,
        steps,
        epochs,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    record.save(&out.join("run.json"))?;
    Ok(PretrainOutcome {
        model,
        record,
        best_epoch: best.map_or(0, |(e, _)| e),
        best_checkpoint: best_path,
        last_checkpoint: last_path,
    })
}
