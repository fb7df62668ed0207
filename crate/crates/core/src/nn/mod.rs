//! Network components: the dense Siamese encoder, projection heads, the
//! change-detection network and the checkpoint container.

pub mod checkpoint;
mod cdnet;
mod encoder;
mod heads;
mod layers;

pub use cdnet::{CdForward, CdNet, CdNetConfig, CdNetModules};
pub use encoder::{Encoder, EncoderConfig};
pub use heads::{HeadConfig, SdrlModel, SdrlNet};
pub use layers::{BatchNorm, Conv2d, Linear, Mlp, Mode, BN_EPS, BN_MOMENTUM};

#[cfg(test)]
mod tests;
