use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoder::{Encoder, EncoderConfig};
use super::layers::{Mlp, Mode};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tape, Var};

/// Projector and predictor widths. Desk defaults are 128/32/128; the
/// full-size heads are 1024/256/1024.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub projector_hidden: usize,
    pub predictor_hidden: usize,
    pub out_dim: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            projector_hidden: 128,
            predictor_hidden: 32,
            out_dim: 128,
        }
    }
}

impl HeadConfig {
    pub fn paper_scale() -> Self {
        Self {
            projector_hidden: 1024,
            predictor_hidden: 256,
            out_dim: 1024,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.projector_hidden == 0 || self.predictor_hidden == 0 || self.out_dim == 0 {
            return Err(Error::ConfigInvalid("heads: extents must be positive".into()));
        }
        Ok(())
    }
}

/// Parameter-free description of the pre-training network: encoder `f`,
/// projector `g` and predictor `h`. All parameters live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct SdrlNet {
    pub encoder: Encoder,
    pub projector: Mlp,
    pub predictor: Mlp,
    pub head_cfg: HeadConfig,
}

impl SdrlNet {
    pub fn encode(&self, tape: &mut Tape, store: &mut ParamStore, images: Var, mode: Mode) -> Result<Var> {
        self.encoder.forward(tape, store, images, mode)
    }

    /// `[n, C] -> [n, C']`, unnormalized.
    pub fn project(&self, tape: &mut Tape, store: &mut ParamStore, x: Var, mode: Mode) -> Result<Var> {
        self.projector.forward(tape, store, x, mode)
    }

    /// `[n, C'] -> [n, C']`, unnormalized.
    pub fn predict(&self, tape: &mut Tape, store: &mut ParamStore, z: Var, mode: Mode) -> Result<Var> {
        self.predictor.forward(tape, store, z, mode)
    }
}

/// Pre-training model: network plus the parameters it owns.
#[derive(Clone, Debug)]
pub struct SdrlModel {
    pub net: SdrlNet,
    pub store: ParamStore,
}

impl SdrlModel {
    pub fn new(encoder: &EncoderConfig, heads: &HeadConfig, seed: u64) -> Result<Self> {
        heads.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &mut rng, "encoder", encoder)?;
        let c = encoder.out_channels;
        let projector = Mlp::new(&mut store, &mut rng, "projector", c, heads.projector_hidden, heads.out_dim)?;
        let predictor = Mlp::new(&mut store, &mut rng, "predictor", heads.out_dim, heads.predictor_hidden, heads.out_dim)?;
        Ok(Self {
            net: SdrlNet {
                encoder: enc,
                projector,
                predictor,
                head_cfg: heads.clone(),
            },
            store,
        })
    }

    pub fn encoder_config(&self) -> &EncoderConfig {
        self.net.encoder.config()
    }

    pub fn encode(&mut self, tape: &mut Tape, images: Var, mode: Mode) -> Result<Var> {
        self.net.encode(tape, &mut self.store, images, mode)
    }

    pub fn project(&mut self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        self.net.project(tape, &mut self.store, x, mode)
    }

    pub fn predict(&mut self, tape: &mut Tape, z: Var, mode: Mode) -> Result<Var> {
        self.net.predict(tape, &mut self.store, z, mode)
    }
}
