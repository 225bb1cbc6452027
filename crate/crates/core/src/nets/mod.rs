//! Minimal neural-network stack with hand-derived gradients.

mod adam;
mod encoding;
mod mlp;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use encoding::{positional_encoding, positional_encoding_backward, positional_encoding_batch};
pub use mlp::{Activation, LayerSpec, Mlp, MlpContext, MlpSpec, Mode};
