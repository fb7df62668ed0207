use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, Conv2d, Mode};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tape, Var};

/// Residual dense encoder. The default is a narrow four-stage network;
/// `stage_channels = [64, 128, 256, 512]` with `out_channels = 512` gives the
/// ResNet-18 layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub output_upsample_factor: usize,
    pub out_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            stage_channels: vec![16, 32, 64, 64],
            blocks_per_stage: 2,
            output_upsample_factor: 4,
            out_channels: 64,
        }
    }
}

impl EncoderConfig {
    pub fn paper_scale() -> Self {
        Self {
            stage_channels: vec![64, 128, 256, 512],
            out_channels: 512,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigInvalid(format!("encoder: {m}")));
        if self.in_channels == 0 || self.blocks_per_stage == 0 || self.output_upsample_factor == 0 {
            return bad("extents must be positive");
        }
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return bad("stage_channels must be non-empty and positive");
        }
        if self.stage_channels.last() != Some(&self.out_channels) {
            return bad("out_channels must equal the last stage width");
        }
        if !self.backbone_stride().is_multiple_of(self.output_upsample_factor) {
            return bad("output_upsample_factor must divide the backbone stride");
        }
        Ok(())
    }

    /// Downsampling of the last stage relative to the input (32 for four stages).
    pub fn backbone_stride(&self) -> usize {
        4 << (self.stage_channels.len() - 1)
    }

    pub fn output_stride(&self) -> usize {
        self.backbone_stride() / self.output_upsample_factor
    }

    /// Stride of each stage output relative to the input.
    pub fn stage_strides(&self) -> Vec<usize> {
        (0..self.stage_channels.len()).map(|i| 4 << i).collect()
    }
}

#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    downsample: Option<(Conv2d, BatchNorm)>,
}

impl BasicBlock {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        let downsample = if stride != 1 || cin != cout {
            Some((
                Conv2d::new(store, rng, &format!("{name}.downsample.conv"), cin, cout, 1, stride, 0, false)?,
                BatchNorm::new(store, &format!("{name}.downsample.bn"), cout)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), cin, cout, 3, stride, 1, false)?,
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), cout)?,
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), cout, cout, 3, 1, 1, false)?,
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), cout)?,
            downsample,
        })
    }

    fn forward(&self, tape: &mut Tape, store: &mut ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let h = self.conv1.forward(tape, store, x)?;
        let h = self.bn1.forward(tape, store, h, mode)?;
        let h = tape.relu(h)?;
        let h = self.conv2.forward(tape, store, h)?;
        let h = self.bn2.forward(tape, store, h, mode)?;
        let skip = match &self.downsample {
            Some((conv, bn)) => {
                let s = conv.forward(tape, store, x)?;
                bn.forward(tape, store, s, mode)?
            }
            None => x,
        };
        let y = tape.add(h, skip)?;
        tape.relu(y)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    stem_conv: Conv2d,
    stem_bn: BatchNorm,
    stages: Vec<Vec<BasicBlock>>,
}

impl Encoder {
    /// Registers the encoder's parameters under `prefix` (normally `"encoder"`).
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let c0 = cfg.stage_channels[0];
        let stem_conv = Conv2d::new(store, rng, &format!("{prefix}.stem.conv"), cfg.in_channels, c0, 7, 2, 3, false)?;
        let stem_bn = BatchNorm::new(store, &format!("{prefix}.stem.bn"), c0)?;
        let mut stages = Vec::new();
        let mut cin = c0;
        for (s, &cout) in cfg.stage_channels.iter().enumerate() {
            let mut blocks = Vec::new();
            for b in 0..cfg.blocks_per_stage {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let name = format!("{prefix}.stage{}.block{b}", s + 1);
                blocks.push(BasicBlock::new(store, rng, &name, cin, cout, stride)?);
                cin = cout;
            }
            stages.push(blocks);
        }
        Ok(Self {
            cfg: cfg.clone(),
            stem_conv,
            stem_bn,
            stages,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let shape = tape.value(x).shape();
        let stride = self.cfg.backbone_stride();
        match *shape {
            [_, c, h, w] if c == self.cfg.in_channels && h % stride == 0 && w % stride == 0 => Ok(()),
            _ => Err(Error::shape(
                "encoder",
                format!(
                    "input {shape:?} must be [n, {}, h, w] with h, w divisible by {stride}",
                    self.cfg.in_channels
                ),
            )),
        }
    }

    /// Outputs of every residual stage, finest first.
    pub fn forward_stages(&self, tape: &mut Tape, store: &mut ParamStore, x: Var, mode: Mode) -> Result<Vec<Var>> {
        self.check_input(tape, x)?;
        let h = self.stem_conv.forward(tape, store, x)?;
        let h = self.stem_bn.forward(tape, store, h, mode)?;
        let h = tape.relu(h)?;
        let mut h = tape.max_pool2d(h, 3, 2, 1)?;
        let mut outs = Vec::with_capacity(self.stages.len());
        for blocks in &self.stages {
            for block in blocks {
                h = block.forward(tape, store, h, mode)?;
            }
            outs.push(h);
        }
        Ok(outs)
    }

    /// Dense features `[n, C, h / s, w / s]` with `s` the output stride.
    pub fn forward(&self, tape: &mut Tape, store: &mut ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let last = *self.forward_stages(tape, store, x, mode)?.last().expect("at least one stage");
        if self.cfg.output_upsample_factor == 1 {
            return Ok(last);
        }
        tape.bilinear_upsample(last, self.cfg.output_upsample_factor)
    }
}
