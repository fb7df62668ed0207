use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoder::{Encoder, EncoderConfig};
use super::layers::{BatchNorm, Conv2d, Mode};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tape, Var};

/// Siamese change-detection network: shared encoder, absolute feature
/// difference per stage, and a light FPN decoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CdNetConfig {
    pub encoder: EncoderConfig,
    pub fpn_channels: usize,
    pub num_classes: usize,
}

impl Default for CdNetConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            fpn_channels: 32,
            num_classes: 2,
        }
    }
}

impl CdNetConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.num_classes != 2 {
            return Err(Error::ConfigInvalid("cdnet: num_classes must be 2".into()));
        }
        if self.fpn_channels == 0 {
            return Err(Error::ConfigInvalid("cdnet: fpn_channels must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct CdNetModules {
    pub encoder: Encoder,
    laterals: Vec<Conv2d>,
    smooth: Conv2d,
    smooth_bn: BatchNorm,
    classifier: Conv2d,
}

/// Output of one forward pass; `diffs` are the fused per-stage features.
pub struct CdForward {
    pub logits: Var,
    pub diffs: Vec<Var>,
}

impl CdNetModules {
    /// Per-pixel logits `[n, 2, h, w]` for image batches `t1`, `t2` (`[n, 3, h, w]`).
    pub fn forward(&self, tape: &mut Tape, store: &mut ParamStore, t1: Var, t2: Var, mode: Mode) -> Result<CdForward> {
        let (s1, s2) = (tape.value(t1).shape().to_vec(), tape.value(t2).shape().to_vec());
        if s1 != s2 {
            return Err(Error::shape("cdnet", format!("t1 {s1:?} vs t2 {s2:?}")));
        }
        let n = s1[0];
        // one pass over both epochs so the two branches see identical weights
        let both = tape.concat(&[t1, t2], 0)?;
        let stages = self.encoder.forward_stages(tape, store, both, mode)?;
        let first: Vec<usize> = (0..n).collect();
        let second: Vec<usize> = (n..2 * n).collect();
        let mut diffs = Vec::with_capacity(stages.len());
        for s in &stages {
            let a = tape.select(*s, &first)?;
            let b = tape.select(*s, &second)?;
            let d = tape.sub(a, b)?;
            diffs.push(tape.abs(d)?);
        }
        let mut top: Option<Var> = None;
        for (lat, d) in self.laterals.iter().zip(&diffs).rev() {
            let l = lat.forward(tape, store, *d)?;
            top = Some(match top {
                Some(t) => {
                    let up = tape.upsample_nearest(t, 2)?;
                    tape.add(l, up)?
                }
                None => l,
            });
        }
        let p = top.expect("at least one stage");
        let h = self.smooth.forward(tape, store, p)?;
        let h = self.smooth_bn.forward(tape, store, h, mode)?;
        let h = tape.relu(h)?;
        let logits = self.classifier.forward(tape, store, h)?;
        let logits = tape.bilinear_upsample(logits, self.encoder.config().stage_strides()[0])?;
        Ok(CdForward { logits, diffs })
    }
}

#[derive(Clone, Debug)]
pub struct CdNet {
    pub cfg: CdNetConfig,
    pub net: CdNetModules,
    pub store: ParamStore,
}

impl CdNet {
    pub fn new(cfg: &CdNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &mut rng, "encoder", &cfg.encoder)?;
        let f = cfg.fpn_channels;
        let laterals = cfg
            .encoder
            .stage_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::new(&mut store, &mut rng, &format!("decoder.lateral{}", i + 1), c, f, 1, 1, 0, true))
            .collect::<Result<Vec<_>>>()?;
        let smooth = Conv2d::new(&mut store, &mut rng, "decoder.smooth", f, f, 3, 1, 1, false)?;
        let smooth_bn = BatchNorm::new(&mut store, "decoder.smooth_bn", f)?;
        let classifier = Conv2d::new(&mut store, &mut rng, "decoder.classifier", f, cfg.num_classes, 1, 1, 0, true)?;
        Ok(Self {
            cfg: cfg.clone(),
            net: CdNetModules {
                encoder,
                laterals,
                smooth,
                smooth_bn,
                classifier,
            },
            store,
        })
    }

    pub fn forward(&mut self, tape: &mut Tape, t1: Var, t2: Var, mode: Mode) -> Result<CdForward> {
        self.net.forward(tape, &mut self.store, t1, t2, mode)
    }
}
