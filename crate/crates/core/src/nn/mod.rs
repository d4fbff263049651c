//! Reverse-mode differentiation over dense tensors and the two decoders
//! built on it.

mod decoder;
mod tape;
mod tensor;

pub use decoder::{
    decode_coarse, decode_fine, init_params, linear_weightnorm_forward, register_layers, CoarseField, DecoderParams,
    Decoders, FineField, Layer, LayerVars, NetConfig, CENTER_LIMIT, INIT_PRIMITIVE_SIZE, INIT_SHELL_RADIUS, N_LAYERS,
    SKIP_LAYER,
};
pub use tape::{coarse_loss_value, fine_loss_value, Tape, Var};
pub use tensor::{matmul_t, Tensor};
