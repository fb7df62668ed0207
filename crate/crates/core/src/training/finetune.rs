use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::Confusion;
use super::optim::{poly_lr, sgd_step, OptimizerConfig};
use super::pretrain::shuffle_rng;
use super::record::{write_csv, write_json, FinetuneEpochLog, RunRecord};
use crate::augmentation::{flip_image, flip_mask, sample_rng};
use crate::config::{ExperimentConfig, Init};
use crate::data::{label_fraction_subset, Manifest, Patch, PatchSet, Split};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{config_digest, encoder_digest, Checkpoint};
use crate::nn::{CdNet, CdNetConfig, Mode};
use crate::tensor::{Tape, Tensor};

/// Precision, recall and F1 of the change class plus the class-mean F1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub patches: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mean_f1: f64,
    pub confusion: Confusion,
}

impl EvalReport {
    fn from_confusion(c: Confusion, patches: usize) -> Self {
        let s = c.scores();
        Self {
            patches,
            precision: s.precision,
            recall: s.recall,
            f1: s.f1,
            mean_f1: c.mean_f1(),
            confusion: c,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub fraction: f64,
    pub seed: u64,
    pub init: Init,
    pub checkpoint: Option<PathBuf>,
    pub train_patches: usize,
    pub best_epoch: usize,
    pub best_val_mean_f1: f64,
    pub test: EvalReport,
}

pub struct FinetuneOutcome {
    pub model: CdNet,
    pub report: FinetuneReport,
    pub record: RunRecord<FinetuneEpochLog>,
}

pub fn cdnet_config(cfg: &ExperimentConfig) -> CdNetConfig {
    CdNetConfig {
        encoder: cfg.encoder.clone(),
        fpn_channels: cfg.finetune.fpn_channels,
        num_classes: 2,
    }
}

/// Stacks a batch of patches into `[n, 3, h, w]` pairs and flat labels.
fn stack(patches: &[Patch]) -> Result<(Tensor, Tensor, Vec<u8>)> {
    let p = &patches[0].t1;
    let shape = [patches.len(), p.channels, p.height, p.width];
    let t1 = patches.iter().flat_map(|x| x.t1.data.iter().copied()).collect();
    let t2 = patches.iter().flat_map(|x| x.t2.data.iter().copied()).collect();
    let labels = patches.iter().flat_map(|x| x.change.data.iter().copied()).collect();
    Ok((Tensor::new(shape, t1)?, Tensor::new(shape, t2)?, labels))
}

/// Confusion counts of `net` in eval mode over every patch of `set`.
pub fn evaluate_cd(net: &mut CdNet, set: &PatchSet, batch_size: usize) -> Result<EvalReport> {
    let mut total = Confusion::default();
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let patches: Vec<Patch> = chunk.iter().map(|&i| set.get(i)).collect();
        let (t1, t2, labels) = stack(&patches)?;
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(t1), tape.constant(t2));
        let out = net.forward(&mut tape, a, b, Mode::Eval)?;
        total.add(super::metrics::confusion(tape.value(out.logits), &labels)?);
    }
    Ok(EvalReport::from_confusion(total, set.len()))
}

/// Same flips on both images and the change mask.
fn joint_flip(mut p: Patch, rng: &mut impl Rng, hflip: f64, vflip: f64) -> Patch {
    for (prob, horizontal) in [(hflip, true), (vflip, false)] {
        if rng.gen_bool(prob) {
            p.t1 = flip_image(&p.t1, horizontal);
            p.t2 = flip_image(&p.t2, horizontal);
            p.change = flip_mask(&p.change, horizontal);
        }
    }
    p
}

/// `1 / (2·frequency)` per class; a class with no pixels keeps weight 1.
pub fn inverse_frequency_weights(set: &PatchSet) -> [f32; 2] {
    let mut counts = [0u64; 2];
    for i in 0..set.len() {
        let ones = set.get(i).change.count_ones() as u64;
        counts[1] += ones;
        counts[0] += (set.patch_size * set.patch_size) as u64 - ones;
    }
    let total = (counts[0] + counts[1]) as f64;
    counts.map(|c| if c == 0 { 1.0 } else { (total / (2.0 * c as f64)) as f32 })
}

/// Endless stream of subset indices: successive seeded shuffles of the
/// whole subset.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
    round: u64,
    seed: u64,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            round: 0,
            seed,
        }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            let mut rng: ChaCha8Rng = shuffle_rng(self.seed, self.round);
            self.order.sort_unstable();
            self.order.shuffle(&mut rng);
            self.round += 1;
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Builds the change-detection network, copying encoder weights from the
/// configured checkpoint when `init` is `checkpoint`.
pub fn init_cdnet(cfg: &ExperimentConfig) -> Result<CdNet> {
    let mut net = CdNet::new(&cdnet_config(cfg), cfg.seed)?;
    if cfg.finetune.init == Init::Checkpoint {
        let path = cfg
            .finetune
            .checkpoint
            .as_ref()
            .ok_or_else(|| Error::ConfigInvalid("init = checkpoint needs a checkpoint path".into()))?;
        let ckpt = Checkpoint::load(path)?;
        let n = ckpt.load_into(&mut net.store, "encoder.", &encoder_digest(&cfg.encoder))?;
        log::info!("loaded {n} encoder tensors from {}", path.display());
    }
    Ok(net)
}

/// Supervised change-detection training on a label fraction of the train
/// split. Keeps the epoch with the best validation mean F1 (ties go to the
/// later epoch) and reports its test scores. Writes `metrics.csv`,
/// `model.ckpt`, `report.json`, `config.toml` and `run.json` into `out`.
pub fn finetune(cfg: &ExperimentConfig, manifest: &Manifest, out: &Path) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let ft = &cfg.finetune;
    let subset = label_fraction_subset(&manifest.records_in(Split::Train), ft.fraction, cfg.seed)?;
    let train = PatchSet::load(manifest, subset)?;
    let val = PatchSet::load(manifest, manifest.records_in(Split::Val))?;
    let test = PatchSet::load(manifest, manifest.records_in(Split::Test))?;
    if val.is_empty() || test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    cfg.save_resolved(out)?;

    let mut net = init_cdnet(cfg)?;
    let weights = ft.class_weighting.then(|| inverse_frequency_weights(&train));
    let opt = OptimizerConfig {
        base_lr: ft.base_lr,
        ..cfg.optimizer.clone()
    };
    let steps_per_epoch = ft.samples_per_epoch.div_ceil(ft.batch_size);
    let max_steps = ft.epochs * steps_per_epoch;
    let mut sampler = Sampler::new(train.len(), cfg.seed);

    let mut epochs = Vec::with_capacity(ft.epochs);
    let mut best: Option<(usize, f64, CdNet)> = None;
    let mut step = 0;
    let mut drawn = 0u64;
    for epoch in 0..ft.epochs {
        let mut train_loss = 0.0;
        let mut remaining = ft.samples_per_epoch;
        let mut lr = opt.base_lr;
        while remaining > 0 {
            let n = remaining.min(ft.batch_size);
            remaining -= n;
            let patches: Vec<Patch> = (0..n)
                .map(|_| {
                    let i = sampler.next();
                    let mut rng = sample_rng(cfg.seed, epoch as u64, drawn);
                    drawn += 1;
                    joint_flip(train.get(i), &mut rng, ft.hflip_prob, ft.vflip_prob)
                })
                .collect();
            let (t1, t2, labels) = stack(&patches)?;
            let mut tape = Tape::new();
            let (a, b) = (tape.constant(t1), tape.constant(t2));
            let fwd = net.forward(&mut tape, a, b, Mode::Train)?;
            let loss = tape.softmax_cross_entropy(fwd.logits, &labels, weights.as_ref().map(|w| &w[..]))?;
            let value = tape.scalar_f64(loss)?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    epoch,
                    detail: format!("cross-entropy {value} on {n} patches"),
                });
            }
            let grads = tape.backward(loss)?;
            lr = poly_lr(step, max_steps, opt.base_lr, opt.poly_power);
            sgd_step(&mut net.store, &grads, lr, &opt)?;
            train_loss += value / steps_per_epoch as f64;
            step += 1;
        }

        let v = evaluate_cd(&mut net, &val, ft.batch_size)?;
        log::info!("epoch {epoch}: loss {train_loss:.4} val f1 {:.4} mean f1 {:.4}", v.f1, v.mean_f1);
        epochs.push(FinetuneEpochLog {
            epoch,
            lr,
            train_loss,
            val_precision: v.precision,
            val_recall: v.recall,
            val_f1: v.f1,
            mean_f1: v.mean_f1,
        });
        if best.as_ref().map_or(true, |(_, s, _)| v.mean_f1 >= *s) {
            best = Some((epoch, v.mean_f1, net.clone()));
        }
    }

    let (best_epoch, best_val, mut model) = best.expect("at least one epoch");
    let test_report = evaluate_cd(&mut model, &test, ft.batch_size)?;
    log::info!("best epoch {best_epoch}: test f1 {:.4}", test_report.f1);
    Checkpoint::from_store(&model.store, config_digest(&model.cfg)).save(&out.join("model.ckpt"))?;
    write_csv(&out.join("metrics.csv"), &epochs)?;

    let report = FinetuneReport {
        fraction: ft.fraction,
        seed: cfg.seed,
        init: ft.init,
        checkpoint: if ft.init == Init::Checkpoint { ft.checkpoint.clone() } else { None },
        train_patches: train.len(),
        best_epoch,
        best_val_mean_f1: best_val,
        test: test_report,
    };
    write_json(&out.join("report.json"), &report)?;
    let record = RunRecord {
        seed: cfg.seed,
        config: serde_json::to_value(cfg)?,
        steps: Vec::new(),
        epochs,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    record.save(&out.join("run.json"))?;
    Ok(FinetuneOutcome { model, report, record })
}

/// Loads a fine-tuned model checkpoint written by [`finetune`].
pub fn load_cdnet(cfg: &CdNetConfig, path: &Path) -> Result<CdNet> {
    let mut net = CdNet::new(cfg, 0)?;
    Checkpoint::load(path)?.load_into(&mut net.store, "", &config_digest(cfg))?;
    Ok(net)
}
