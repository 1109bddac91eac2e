//! Embeddings, bidirectional LSTM encoder, attentional LSTM decoder and the
//! image-initialization pathway.

mod checkpoint;
mod config;
mod network;
mod params;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, model_from_bytes, round_to_f32, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use config::{ModelConfig, Variant, DECODER_LAYERS, ENCODER_LAYERS, INIT_RANGE};
pub use network::{DecoderState, EncoderStates, ImageStates, Model, StepOutput};
pub use params::{init_parameters, parameter_layout, AffineIds, ImageIds, LstmIds, ParamIds, StateProj};
