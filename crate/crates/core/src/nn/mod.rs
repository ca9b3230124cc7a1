//! Layers, parameter storage and the sub-network family.

pub mod conv;
pub mod layers;
pub mod networks;
pub mod params;

pub use layers::{Activation, NormKind};
pub use networks::{
    BackgroundEncoder, ConvDecoder, ConvEncoder, DiscOutput, ForegroundDecoder, FuseDecoder,
    LocalAutoencoder, MaskEncoder, MultiScaleDiscriminator, NetSpec, ParserNet, PatchDiscriminator,
};
pub use params::{Init, ParamBuilder, VarStore};
