//! Transformer building blocks.

mod attention;
mod layers;
mod positional;
mod transformer;

pub use attention::{scaled_dot_attention, AttentionInputs, AttentionMask, MultiHeadAttention, MASK_FILL};
pub use layers::{FeedForward, LayerNorm, Linear, LAYER_NORM_EPS};
pub use positional::sinusoidal_positions;
pub use transformer::{Decoder, DecoderLayer, Encoder, EncoderLayer, LayerDims};
