//! Minimal differentiable network engine: dense, strided convolution and
//! transposed convolution layers with pointwise activations, a recorded
//! reverse pass and Adam.

mod adam;
mod arch;
mod conv;
mod layer;
mod network;

pub use adam::Adam;
pub use arch::{
    build_decoder, build_encoder, sample_latent, sample_latent_backward, ArchConfig, EncoderMode, EncoderOutput,
    HeadActivation,
};
pub use layer::{ConvGeometry, LayerSpec, Shape};
pub use network::{Network, Tape};
