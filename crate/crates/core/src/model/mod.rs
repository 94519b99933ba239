//! Per-client forecaster: patch encoder, prototype retrieval, decoder and
//! head, trained with hand-derived gradients.

mod client;
mod forecaster;
mod layers;
mod loss;
mod optim;
mod params;

pub use client::{
    metrics, ClientState, Hyperparams, InstanceSource, MetricScale, Metrics, RoundTrainStats,
};
pub use forecaster::{
    backward, batch_loss, compute_gradients, decode_and_project, decode_rows, encode, encode_rows,
    forward_batch, Batch, ForwardPass, Gradients, QuantizerMode,
};
pub use layers::{gelu, gelu_grad, Linear, MlpBlock};
pub use loss::{
    prediction_loss, smooth_l1, smooth_l1_grad, total_loss, LossBreakdown, SMOOTH_L1_BETA,
};
pub use optim::{AdamConfig, AdamState};
pub use params::{DecoderParams, EncoderParams, ModelConfig, ModelParams};
