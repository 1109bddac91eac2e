use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::config::{ModelConfig, Variant};
use crate::model::params::{init_parameters, parameter_layout, AffineIds, LstmIds, ParamIds, StateProj};
use crate::numcore::{Parameters, Rng, Tape, Tensor, Var};

/// Initial `(h, c)` derived from the image for every encoder layer/direction and decoder layer.
#[derive(Debug, Clone)]
pub struct ImageStates {
    pub encoder: Vec<[(Var, Var); 2]>,
    pub decoder: Vec<(Var, Var)>,
}

#[derive(Debug, Clone)]
pub struct EncoderStates {
    /// `[B, S, 2H]`: top-layer forward and backward outputs, concatenated.
    pub annotations: Var,
    /// `[B, S, H]`: annotations already multiplied by the attention matrix.
    pub keys: Var,
    /// `[B * S]`, true on real source positions.
    pub mask: Vec<bool>,
    /// Final `(h, c)` per `[layer][direction]`.
    pub finals: Vec<[(Var, Var); 2]>,
    /// Per layer, per position: `[B, 2H]` concatenated direction outputs.
    pub layer_outputs: Vec<Vec<Var>>,
}

#[derive(Debug, Clone)]
pub struct DecoderState {
    pub layers: Vec<(Var, Var)>,
    /// Previous attentional vector, fed into the next step's input.
    pub feed: Var,
}

/// Output of one decoder step before the vocabulary projection.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub attentional: Var,
    pub state: DecoderState,
    pub weights: Var,
}

/// Network weights together with their configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Parameters,
    ids: ParamIds,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_parameters(&config, seed)?;
        let ids = ParamIds::resolve(&config, &params)?;
        Ok(Model { config, params, ids })
    }

    /// Wraps existing parameters, checking names and shapes against the config.
    pub fn from_parameters(config: ModelConfig, params: Parameters) -> Result<Self> {
        config.validate()?;
        let layout = parameter_layout(&config);
        if layout.len() != params.len() {
            return Err(Error::Config(format!("expected {} parameters, found {}", layout.len(), params.len())));
        }
        for (name, shape) in &layout {
            let p = params.by_name(name).ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            if p.value.shape() != &shape[..] {
                return Err(Error::Config(format!("{name}: shape {:?}, expected {shape:?}", p.value.shape())));
            }
        }
        let ids = ParamIds::resolve(&config, &params)?;
        Ok(Model { config, params, ids })
    }

    pub fn ids(&self) -> &ParamIds {
        &self.ids
    }

    fn hidden(&self) -> usize {
        self.config.hidden_dim
    }

    fn affine(&self, tape: &mut Tape, ids: AffineIds, x: Var) -> Result<Var> {
        let w = tape.param(&self.params, ids.weight);
        let b = tape.param(&self.params, ids.bias);
        let xw = tape.matmul(x, w)?;
        tape.add(xw, b)
    }

    fn tanh_state(&self, tape: &mut Tape, proj: StateProj, x_h: Var, x_c: Var) -> Result<(Var, Var)> {
        let h = self.affine(tape, proj.h, x_h)?;
        let c = self.affine(tape, proj.c, x_c)?;
        Ok((tape.tanh(h), tape.tanh(c)))
    }

    pub fn lstm_cell(&self, tape: &mut Tape, ids: LstmIds, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let n = self.hidden();
        let w_ih = tape.param(&self.params, ids.w_ih);
        let w_hh = tape.param(&self.params, ids.w_hh);
        let bias = tape.param(&self.params, ids.bias);
        let xi = tape.matmul(x, w_ih)?;
        let hh = tape.matmul(h, w_hh)?;
        let pre = tape.add(xi, hh)?;
        let gates = tape.add(pre, bias)?;
        let i = tape.slice_last(gates, 0, n)?;
        let f = tape.slice_last(gates, n, n)?;
        let g = tape.slice_last(gates, 2 * n, n)?;
        let o = tape.slice_last(gates, 3 * n, n)?;
        let (i, f, g, o) = (tape.sigmoid(i), tape.sigmoid(f), tape.tanh(g), tape.sigmoid(o));
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c_new = tape.add(fc, ig)?;
        let tc = tape.tanh(c_new);
        let h_new = tape.mul(o, tc)?;
        Ok((h_new, c_new))
    }

    /// `tanh(W · image + b)` for each recurrent state that the image initializes.
    pub fn image_to_init_states(&self, tape: &mut Tape, images: Var) -> Result<ImageStates> {
        let ids = self
            .ids
            .image
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("text-only model has no image pathway".into()))?;
        let d = tape.shape(images);
        if d.len() != 2 || d[1] != self.config.d_img {
            return Err(Error::Shape { op: "image_to_init_states", shapes: vec![d.to_vec(), vec![self.config.d_img]] });
        }
        let mut encoder = Vec::with_capacity(ids.encoder.len());
        for layer in &ids.encoder {
            encoder.push([
                self.tanh_state(tape, layer[0], images, images)?,
                self.tanh_state(tape, layer[1], images, images)?,
            ]);
        }
        let mut decoder = Vec::with_capacity(ids.decoder.len());
        for &proj in &ids.decoder {
            decoder.push(self.tanh_state(tape, proj, images, images)?);
        }
        Ok(ImageStates { encoder, decoder })
    }

    /// Two-layer bidirectional encoder over a padded `[B, S]` id matrix.
    ///
    /// Encoder states start from `image` when given, zeros otherwise. Past a
    /// row's length its recurrent state is carried through unchanged.
    pub fn encode(
        &self,
        tape: &mut Tape,
        source: &[usize],
        lengths: &[usize],
        image: Option<&ImageStates>,
        rng: &mut Rng,
    ) -> Result<EncoderStates> {
        let b = lengths.len();
        if b == 0 || !source.len().is_multiple_of(b) || lengths.iter().any(|&l| l == 0 || l * b > source.len()) {
            return Err(Error::Shape { op: "encode", shapes: vec![vec![source.len()], vec![b]] });
        }
        let s = source.len() / b;
        let n = self.hidden();
        let live: Vec<Vec<bool>> = (0..s).map(|t| lengths.iter().map(|&l| t < l).collect()).collect();

        let src_emb = tape.param(&self.params, self.ids.src_embedding);
        let mut inputs = Vec::with_capacity(s);
        for t in 0..s {
            let col: Vec<usize> = (0..b).map(|r| source[r * s + t]).collect();
            inputs.push(tape.embedding(src_emb, &col)?);
        }

        let mut finals = Vec::with_capacity(self.ids.encoder.len());
        let mut layer_outputs: Vec<Vec<Var>> = Vec::with_capacity(self.ids.encoder.len());
        for (l, layer) in self.ids.encoder.iter().enumerate() {
            let init = |tape: &mut Tape, dir: usize| match image {
                Some(img) => img.encoder[l][dir],
                None => {
                    let z = tape.constant(Tensor::zeros(&[b, n]));
                    (z, z)
                }
            };
            let mut fwd = Vec::with_capacity(s);
            let (mut h, mut c) = init(tape, 0);
            for t in 0..s {
                (h, c) = self.masked_cell(tape, layer[0], inputs[t], h, c, &live[t])?;
                fwd.push(h);
            }
            let fwd_final = (h, c);
            let mut bwd = vec![h; s];
            let (mut h, mut c) = init(tape, 1);
            for t in (0..s).rev() {
                (h, c) = self.masked_cell(tape, layer[1], inputs[t], h, c, &live[t])?;
                bwd[t] = h;
            }
            finals.push([fwd_final, (h, c)]);
            let outputs = (0..s).map(|t| tape.concat(&[fwd[t], bwd[t]])).collect::<Result<Vec<_>>>()?;
            if l + 1 < self.ids.encoder.len() {
                let keep = self.config.keep_prob();
                inputs = outputs.iter().map(|&o| tape.dropout(o, keep, rng)).collect::<Result<Vec<_>>>()?;
            }
            layer_outputs.push(outputs);
        }
        let annotations = tape.stack(layer_outputs.last().unwrap())?;
        let flat = tape.reshape(annotations, &[b * s, 2 * n])?;
        let w_a = tape.param(&self.params, self.ids.attention);
        let keys = tape.matmul(flat, w_a)?;
        let keys = tape.reshape(keys, &[b, s, n])?;
        let mask = live_mask(lengths, s);
        Ok(EncoderStates { annotations, keys, mask, finals, layer_outputs })
    }

    fn masked_cell(
        &self,
        tape: &mut Tape,
        ids: LstmIds,
        x: Var,
        h: Var,
        c: Var,
        live: &[bool],
    ) -> Result<(Var, Var)> {
        let (h2, c2) = self.lstm_cell(tape, ids, x, h, c)?;
        if live.iter().all(|&k| k) {
            return Ok((h2, c2));
        }
        Ok((tape.select_rows(live, h2, h)?, tape.select_rows(live, c2, c)?))
    }

    /// Decoder initial state: `tanh(bridge(final encoder states))` per layer,
    /// plus the image-derived states for the image-conditioned variant.
    pub fn decode_init(&self, tape: &mut Tape, enc: &EncoderStates, image: Option<&ImageStates>) -> Result<DecoderState> {
        match (self.config.variant, image.is_some()) {
            (Variant::Osu1, false) => return Err(Error::InvalidArgument("image-conditioned model needs an image".into())),
            (Variant::Osu2, true) => return Err(Error::InvalidArgument("text-only model takes no image".into())),
            _ => {}
        }
        let mut layers = Vec::with_capacity(self.ids.bridge.len());
        for (l, &proj) in self.ids.bridge.iter().enumerate() {
            let [(hf, cf), (hb, cb)] = enc.finals[l];
            let hcat = tape.concat(&[hf, hb])?;
            let ccat = tape.concat(&[cf, cb])?;
            let (mut h, mut c) = self.tanh_state(tape, proj, hcat, ccat)?;
            if let Some(img) = image {
                let (ih, ic) = img.decoder[l];
                h = tape.add(h, ih)?;
                c = tape.add(c, ic)?;
            }
            layers.push((h, c));
        }
        let b = tape.shape(layers[0].0)[0];
        let feed = tape.constant(Tensor::zeros(&[b, self.hidden()]));
        Ok(DecoderState { layers, feed })
    }

    /// Global attention with the bilinear ("general") score `h_tᵀ W_a h̄_s`.
    pub fn attention_step(&self, tape: &mut Tape, query: Var, enc: &EncoderStates) -> Result<(Var, Var)> {
        let scores = tape.batched_dot(query, enc.keys)?;
        let weights = tape.softmax(scores, Some(&enc.mask))?;
        let context = tape.weighted_sum(weights, enc.annotations)?;
        Ok((context, weights))
    }

    /// One input-fed decoder step up to the attentional vector `tanh(W_c [c_t; h_t] + b)`.
    pub fn decoder_step(
        &self,
        tape: &mut Tape,
        prev_tokens: &[usize],
        state: &DecoderState,
        enc: &EncoderStates,
        rng: &mut Rng,
    ) -> Result<StepOutput> {
        let tgt_emb = tape.param(&self.params, self.ids.tgt_embedding);
        let emb = tape.embedding(tgt_emb, prev_tokens)?;
        let mut x = tape.concat(&[emb, state.feed])?;
        let mut layers = Vec::with_capacity(state.layers.len());
        for (l, (&ids, &(h, c))) in self.ids.decoder.iter().zip(&state.layers).enumerate() {
            if l > 0 {
                x = tape.dropout(x, self.config.keep_prob(), rng)?;
            }
            let (h2, c2) = self.lstm_cell(tape, ids, x, h, c)?;
            layers.push((h2, c2));
            x = h2;
        }
        let (context, weights) = self.attention_step(tape, x, enc)?;
        let joined = tape.concat(&[context, x])?;
        let pre = self.affine(tape, self.ids.combine, joined)?;
        let attentional = tape.tanh(pre);
        Ok(StepOutput { attentional, state: DecoderState { layers, feed: attentional }, weights })
    }

    /// Vocabulary logits from attentional vectors, with dropout in front of the projection.
    pub fn project(&self, tape: &mut Tape, attentional: Var, rng: &mut Rng) -> Result<Var> {
        let x = tape.dropout(attentional, self.config.keep_prob(), rng)?;
        self.affine(tape, self.ids.output, x)
    }

    /// Single step returning `(logits, new state, attention weights)`.
    pub fn decode_step(
        &self,
        tape: &mut Tape,
        prev_tokens: &[usize],
        state: &DecoderState,
        enc: &EncoderStates,
        rng: &mut Rng,
    ) -> Result<(Var, DecoderState, Var)> {
        let out = self.decoder_step(tape, prev_tokens, state, enc, rng)?;
        let logits = self.project(tape, out.attentional, rng)?;
        Ok((logits, out.state, out.weights))
    }

    fn image_input(&self, tape: &mut Tape, batch: &Batch) -> Result<Option<ImageStates>> {
        if !self.config.variant.uses_image() {
            return Ok(None);
        }
        let images = batch
            .images
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("image-conditioned model needs image features".into()))?;
        let v = tape.constant(images.clone());
        Ok(Some(self.image_to_init_states(tape, v)?))
    }

    /// Teacher-forced cross-entropy, averaged over real (non-PAD) target tokens.
    pub fn loss(&self, tape: &mut Tape, batch: &Batch, rng: &mut Rng) -> Result<Var> {
        let image = self.image_input(tape, batch)?;
        let enc = self.encode(tape, &batch.source, &batch.source_lengths, image.as_ref(), rng)?;
        let mut state = self.decode_init(tape, &enc, image.as_ref())?;
        let mut attentional = Vec::with_capacity(batch.max_tgt);
        for t in 0..batch.max_tgt {
            let out = self.decoder_step(tape, &batch.target_in_column(t), &state, &enc, rng)?;
            attentional.push(out.attentional);
            state = out.state;
        }
        let stacked = tape.stack(&attentional)?;
        let flat = tape.reshape(stacked, &[batch.size() * batch.max_tgt, self.hidden()])?;
        let logits = self.project(tape, flat, rng)?;
        tape.cross_entropy(logits, &batch.target_out, &batch.target_mask)
    }
}

fn live_mask(lengths: &[usize], s: usize) -> Vec<bool> {
    lengths.iter().flat_map(|&l| (0..s).map(move |t| t < l)).collect()
}
