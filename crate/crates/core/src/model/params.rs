use rand::Rng as _;

use crate::error::{Error, Result};
use crate::model::config::{ModelConfig, Variant};
use crate::numcore::{stream_rng, ParamId, Parameters, Stream, Tensor};

pub const DIRECTIONS: [&str; 2] = ["fwd", "bwd"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmIds {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AffineIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Affine maps producing an initial `(h, c)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateProj {
    pub h: AffineIds,
    pub c: AffineIds,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageIds {
    /// `[layer][direction]`
    pub encoder: Vec<[StateProj; 2]>,
    pub decoder: Vec<StateProj>,
}

/// Handles to every parameter of the network, resolved by name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamIds {
    pub src_embedding: ParamId,
    pub tgt_embedding: ParamId,
    /// `[layer][direction]`
    pub encoder: Vec<[LstmIds; 2]>,
    pub decoder: Vec<LstmIds>,
    pub bridge: Vec<StateProj>,
    /// Bilinear score matrix, stored as `[2H, H]` so keys are `annotations · w_a`.
    pub attention: ParamId,
    pub combine: AffineIds,
    pub output: AffineIds,
    pub image: Option<ImageIds>,
}

/// Expected `(name, shape)` of every parameter, in creation order.
pub fn parameter_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (e, h) = (cfg.embed_dim, cfg.hidden_dim);
    let mut out = vec![
        ("src_embedding".to_string(), vec![cfg.src_vocab_size, e]),
        ("tgt_embedding".to_string(), vec![cfg.tgt_vocab_size, e]),
    ];
    let lstm = |out: &mut Vec<(String, Vec<usize>)>, prefix: String, input: usize| {
        out.push((format!("{prefix}.w_ih"), vec![input, 4 * h]));
        out.push((format!("{prefix}.w_hh"), vec![h, 4 * h]));
        out.push((format!("{prefix}.bias"), vec![4 * h]));
    };
    let affine = |out: &mut Vec<(String, Vec<usize>)>, prefix: String, input: usize, output: usize| {
        out.push((format!("{prefix}.weight"), vec![input, output]));
        out.push((format!("{prefix}.bias"), vec![output]));
    };
    for l in 0..cfg.encoder_layers {
        let input = if l == 0 { e } else { 2 * h };
        for d in DIRECTIONS {
            lstm(&mut out, format!("encoder.l{l}.{d}"), input);
        }
    }
    for l in 0..cfg.decoder_layers {
        let input = if l == 0 { e + h } else { h };
        lstm(&mut out, format!("decoder.l{l}"), input);
    }
    for l in 0..cfg.decoder_layers {
        affine(&mut out, format!("bridge.l{l}.h"), 2 * h, h);
        affine(&mut out, format!("bridge.l{l}.c"), 2 * h, h);
    }
    out.push(("attention.w_a".to_string(), vec![2 * h, h]));
    affine(&mut out, "attention.combine".to_string(), 3 * h, h);
    affine(&mut out, "output".to_string(), h, cfg.tgt_vocab_size);
    if cfg.variant == Variant::Osu1 {
        for l in 0..cfg.encoder_layers {
            for d in DIRECTIONS {
                affine(&mut out, format!("img.encoder.l{l}.{d}.h"), cfg.d_img, h);
                affine(&mut out, format!("img.encoder.l{l}.{d}.c"), cfg.d_img, h);
            }
        }
        for l in 0..cfg.decoder_layers {
            affine(&mut out, format!("img.decoder.l{l}.h"), cfg.d_img, h);
            affine(&mut out, format!("img.decoder.l{l}.c"), cfg.d_img, h);
        }
    }
    out
}

impl ParamIds {
    pub fn resolve(cfg: &ModelConfig, params: &Parameters) -> Result<Self> {
        let get = |name: String| params.id(&name).ok_or_else(|| Error::Config(format!("missing parameter {name}")));
        let lstm = |prefix: String| -> Result<LstmIds> {
            Ok(LstmIds {
                w_ih: get(format!("{prefix}.w_ih"))?,
                w_hh: get(format!("{prefix}.w_hh"))?,
                bias: get(format!("{prefix}.bias"))?,
            })
        };
        let affine = |prefix: String| -> Result<AffineIds> {
            Ok(AffineIds { weight: get(format!("{prefix}.weight"))?, bias: get(format!("{prefix}.bias"))? })
        };
        let proj = |prefix: String| -> Result<StateProj> {
            Ok(StateProj { h: affine(format!("{prefix}.h"))?, c: affine(format!("{prefix}.c"))? })
        };
        let encoder = (0..cfg.encoder_layers)
            .map(|l| Ok([lstm(format!("encoder.l{l}.fwd"))?, lstm(format!("encoder.l{l}.bwd"))?]))
            .collect::<Result<Vec<_>>>()?;
        let decoder = (0..cfg.decoder_layers).map(|l| lstm(format!("decoder.l{l}"))).collect::<Result<Vec<_>>>()?;
        let bridge = (0..cfg.decoder_layers).map(|l| proj(format!("bridge.l{l}"))).collect::<Result<Vec<_>>>()?;
        let image = if cfg.variant == Variant::Osu1 {
            let encoder = (0..cfg.encoder_layers)
                .map(|l| Ok([proj(format!("img.encoder.l{l}.fwd"))?, proj(format!("img.encoder.l{l}.bwd"))?]))
                .collect::<Result<Vec<_>>>()?;
            let decoder =
                (0..cfg.decoder_layers).map(|l| proj(format!("img.decoder.l{l}"))).collect::<Result<Vec<_>>>()?;
            Some(ImageIds { encoder, decoder })
        } else {
            None
        };
        Ok(ParamIds {
            src_embedding: get("src_embedding".into())?,
            tgt_embedding: get("tgt_embedding".into())?,
            encoder,
            decoder,
            bridge,
            attention: get("attention.w_a".into())?,
            combine: affine("attention.combine".into())?,
            output: affine("output".into())?,
            image,
        })
    }
}

/// `Uniform(-init_range, init_range)` matrices; zero biases, except 1.0 on LSTM forget-gate slices.
pub fn init_parameters(cfg: &ModelConfig, seed: u64) -> Result<Parameters> {
    let mut rng = stream_rng(seed, Stream::Init, 0);
    let mut params = Parameters::new();
    for (name, shape) in parameter_layout(cfg) {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = if shape.len() == 2 {
            (0..n).map(|_| rng.gen_range(-cfg.init_range..cfg.init_range)).collect()
        } else if is_lstm_bias(&name) {
            let h = n / 4;
            (0..n).map(|i| if (h..2 * h).contains(&i) { 1.0 } else { 0.0 }).collect()
        } else {
            vec![0.0; n]
        };
        params.insert(name, Tensor::new(shape, data)?)?;
    }
    Ok(params)
}

fn is_lstm_bias(name: &str) -> bool {
    (name.starts_with("encoder.") || name.starts_with("decoder.")) && name.ends_with(".bias")
}
