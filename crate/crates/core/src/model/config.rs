use serde::{Deserialize, Serialize};

use crate::data::{DEFAULT_IMAGE_DIM, NUM_RESERVED};
use crate::error::{Error, Result};

/// Image-conditioned (`osu1`) or text-only (`osu2`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Osu1,
    Osu2,
}

impl Variant {
    pub fn uses_image(self) -> bool {
        self == Variant::Osu1
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "osu1" => Ok(Variant::Osu1),
            "osu2" => Ok(Variant::Osu2),
            other => Err(Error::Config(format!("unknown variant {other:?} (expected osu1 or osu2)"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Osu1 => "osu1",
            Variant::Osu2 => "osu2",
        })
    }
}

/// Default initialization half-width.
pub const INIT_RANGE: f64 = 0.1;

pub const ENCODER_LAYERS: usize = 2;
pub const DECODER_LAYERS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub d_img: usize,
    pub dropout_rate: f64,
    /// Half-width of the uniform weight initialization.
    pub init_range: f64,
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Osu1,
            embed_dim: 500,
            hidden_dim: 500,
            encoder_layers: ENCODER_LAYERS,
            decoder_layers: DECODER_LAYERS,
            d_img: DEFAULT_IMAGE_DIM,
            dropout_rate: 0.6,
            init_range: INIT_RANGE,
            src_vocab_size: 0,
            tgt_vocab_size: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.d_img == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.encoder_layers != ENCODER_LAYERS || self.decoder_layers != DECODER_LAYERS {
            return Err(Error::Config(format!(
                "encoder and decoder depth are fixed at {ENCODER_LAYERS}/{DECODER_LAYERS}"
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout rate {} not in [0, 1)", self.dropout_rate)));
        }
        if !self.init_range.is_finite() || self.init_range <= 0.0 {
            return Err(Error::Config(format!("init range must be positive, got {}", self.init_range)));
        }
        if self.src_vocab_size <= NUM_RESERVED || self.tgt_vocab_size <= NUM_RESERVED {
            return Err(Error::Config("vocabulary sizes must exceed the reserved symbols".into()));
        }
        Ok(())
    }

    pub fn keep_prob(&self) -> f64 {
        1.0 - self.dropout_rate
    }
}
