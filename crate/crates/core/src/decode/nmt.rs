use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{Vocabulary, BOS, EOS};
use crate::decode::{beam_search, greedy_decode, BeamConfig, Hypothesis, StepModel};
use crate::error::{Error, Result};
use crate::metrics::{bleu_corpus, length_ratio};
use crate::model::{DecoderState, EncoderStates, Model};
use crate::numcore::{log_softmax, stream_rng, Rng, Stream, Tape, Tensor};

/// One sentence to translate: source ids and, for the image-conditioned
/// variant, its image feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSentence {
    pub ids: Vec<usize>,
    pub image: Option<Vec<f64>>,
}

/// Decoder state of one hypothesis: `(h, c)` per layer plus the input-feeding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct NmtState {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
    pub feed: Vec<f64>,
}

/// [`StepModel`] view of a trained network for a single source sentence.
///
/// The source is encoded once. Each step runs the decoder for all live
/// hypotheses as one batch on an inference tape that is rewound afterwards.
pub struct NmtScorer<'m> {
    model: &'m Model,
    tape: Tape,
    mark: usize,
    annotations: Tensor,
    keys: Tensor,
    src_len: usize,
    initial: NmtState,
    rng: Rng,
}

fn repeat_rows(t: &Tensor, k: usize) -> Tensor {
    let mut shape = t.shape().to_vec();
    shape[0] = k;
    let mut data = Vec::with_capacity(t.numel() * k);
    for _ in 0..k {
        data.extend_from_slice(t.data());
    }
    Tensor::new(shape, data).expect("repeated rows keep the shape consistent")
}

fn stack_rows(rows: &[&[f64]]) -> Tensor {
    let width = rows.first().map_or(0, |r| r.len());
    Tensor::new(vec![rows.len(), width], rows.concat()).expect("rows have equal width")
}

impl<'m> NmtScorer<'m> {
    pub fn new(model: &'m Model, source: &[usize], image: Option<&[f64]>) -> Result<Self> {
        if source.is_empty() {
            return Err(Error::InvalidArgument("cannot translate an empty source sentence".into()));
        }
        if let Some(&bad) = source.iter().find(|&&t| t >= model.config.src_vocab_size) {
            return Err(Error::OutOfRange { what: "source token", index: bad, size: model.config.src_vocab_size });
        }
        let mut tape = Tape::inference();
        for id in model.params.ids() {
            tape.param(&model.params, id);
        }
        let mark = tape.mark();
        let mut rng = stream_rng(0, Stream::Dropout, 0);
        let img_states = if model.config.variant.uses_image() {
            let img = image.ok_or_else(|| Error::InvalidArgument("image-conditioned model needs an image".into()))?;
            if img.len() != model.config.d_img {
                return Err(Error::Shape { op: "image_features", shapes: vec![vec![img.len()], vec![model.config.d_img]] });
            }
            let v = tape.constant(Tensor::new(vec![1, img.len()], img.to_vec())?);
            Some(model.image_to_init_states(&mut tape, v)?)
        } else {
            None
        };
        let enc = model.encode(&mut tape, source, &[source.len()], img_states.as_ref(), &mut rng)?;
        let init = model.decode_init(&mut tape, &enc, img_states.as_ref())?;
        let initial = NmtState {
            layers: init
                .layers
                .iter()
                .map(|&(h, c)| (tape.value(h).data().to_vec(), tape.value(c).data().to_vec()))
                .collect(),
            feed: tape.value(init.feed).data().to_vec(),
        };
        let annotations = tape.value(enc.annotations).clone();
        let keys = tape.value(enc.keys).clone();
        tape.rewind(mark);
        Ok(NmtScorer { model, tape, mark, annotations, keys, src_len: source.len(), initial, rng })
    }

    pub fn source_len(&self) -> usize {
        self.src_len
    }
}

impl StepModel for NmtScorer<'_> {
    type State = NmtState;

    fn vocab_size(&self) -> usize {
        self.model.config.tgt_vocab_size
    }

    fn eos(&self) -> usize {
        EOS
    }

    fn start_token(&self) -> usize {
        BOS
    }

    fn initial_state(&mut self) -> Result<NmtState> {
        Ok(self.initial.clone())
    }

    fn step(&mut self, items: &[(&NmtState, usize)]) -> Result<Vec<(Vec<f64>, NmtState)>> {
        let k = items.len();
        if k == 0 {
            return Ok(Vec::new());
        }
        let tape = &mut self.tape;
        let annotations = tape.constant(repeat_rows(&self.annotations, k));
        let keys = tape.constant(repeat_rows(&self.keys, k));
        let enc = EncoderStates {
            annotations,
            keys,
            mask: vec![true; k * self.src_len],
            finals: Vec::new(),
            layer_outputs: Vec::new(),
        };
        let n_layers = items[0].0.layers.len();
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let hs: Vec<&[f64]> = items.iter().map(|(s, _)| s.layers[l].0.as_slice()).collect();
            let cs: Vec<&[f64]> = items.iter().map(|(s, _)| s.layers[l].1.as_slice()).collect();
            layers.push((tape.constant(stack_rows(&hs)), tape.constant(stack_rows(&cs))));
        }
        let feeds: Vec<&[f64]> = items.iter().map(|(s, _)| s.feed.as_slice()).collect();
        let feed = tape.constant(stack_rows(&feeds));
        let prev: Vec<usize> = items.iter().map(|&(_, t)| t).collect();
        let state = DecoderState { layers, feed };
        let (logits, next, _) = self.model.decode_step(tape, &prev, &state, &enc, &mut self.rng)?;

        let logits = tape.value(logits);
        let out = (0..k)
            .map(|r| {
                let lp = log_softmax(logits.row(r));
                let st = NmtState {
                    layers: next
                        .layers
                        .iter()
                        .map(|&(h, c)| (tape.value(h).row(r).to_vec(), tape.value(c).row(r).to_vec()))
                        .collect(),
                    feed: tape.value(next.feed).row(r).to_vec(),
                };
                (lp, st)
            })
            .collect();
        self.tape.rewind(self.mark);
        Ok(out)
    }
}

/// Beam search for one sentence.
pub fn translate(model: &Model, src: &SourceSentence, cfg: &BeamConfig) -> Result<Hypothesis> {
    let mut scorer = NmtScorer::new(model, &src.ids, src.image.as_deref())?;
    beam_search(&mut scorer, src.ids.len(), cfg)
}

/// Greedy decoding for one sentence, capped at `max_len` tokens.
pub fn translate_greedy(model: &Model, src: &SourceSentence, max_len: usize) -> Result<Vec<usize>> {
    let mut scorer = NmtScorer::new(model, &src.ids, src.image.as_deref())?;
    greedy_decode(&mut scorer, max_len)
}

/// Applies `f` to every item on up to `workers` threads, preserving order.
pub fn parallel_map<T: Sync, U: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(&T) -> Result<U> + Sync,
) -> Result<Vec<U>> {
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    let parts: Vec<Result<Vec<U>>> = std::thread::scope(|s| {
        let handles: Vec<_> =
            items.chunks(chunk).map(|part| s.spawn(move || part.iter().map(f).collect::<Result<Vec<U>>>())).collect();
        handles.into_iter().map(|h| h.join().expect("decode worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Default worker count: available parallelism.
pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Beam-decodes a corpus. Sentences are independent, so the result does
/// not depend on `workers`.
pub fn translate_corpus(
    model: &Model,
    sources: &[SourceSentence],
    cfg: &BeamConfig,
    workers: usize,
) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    parallel_map(sources, workers, |s| translate(model, s, cfg))
}

/// Maps output ids to words. Reserved ids other than UNK are dropped.
pub fn detokenize(vocab: &Vocabulary, ids: &[usize]) -> Result<Vec<String>> {
    let kept: Vec<usize> = ids.iter().copied().filter(|&t| t != EOS && t != BOS && t != crate::data::PAD).collect();
    vocab.decode(&kept)
}

/// One cell of a beam-size × reward grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub beam: usize,
    pub reward: f64,
    pub bleu: f64,
    pub length_ratio: f64,
    pub seconds: f64,
}

/// Decodes the corpus for every `(beam, reward)` pair and scores it against `references`.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    model: &Model,
    sources: &[SourceSentence],
    references: &[Vec<String>],
    tgt_vocab: &Vocabulary,
    beams: &[usize],
    rewards: &[f64],
    base: &BeamConfig,
    workers: usize,
) -> Result<Vec<SweepRecord>> {
    if sources.len() != references.len() {
        return Err(Error::Alignment(format!("{} sources vs {} references", sources.len(), references.len())));
    }
    if beams.is_empty() || rewards.is_empty() {
        return Err(Error::Config("sweep needs at least one beam size and one reward".into()));
    }
    let mut records = Vec::with_capacity(beams.len() * rewards.len());
    for &beam in beams {
        for &reward in rewards {
            let cfg = BeamConfig { beam_size: beam, reward, ..base.clone() };
            let start = Instant::now();
            let hyps = translate_corpus(model, sources, &cfg, workers)?;
            let seconds = start.elapsed().as_secs_f64();
            let words = hyps.iter().map(|h| detokenize(tgt_vocab, &h.tokens)).collect::<Result<Vec<_>>>()?;
            records.push(SweepRecord {
                beam,
                reward,
                bleu: bleu_corpus(&words, references)?,
                length_ratio: length_ratio(&words, references)?,
                seconds,
            });
        }
    }
    Ok(records)
}

/// CSV with header `beam,reward,bleu,length_ratio,seconds`.
pub fn sweep_csv(records: &[SweepRecord]) -> String {
    let mut s = String::from("beam,reward,bleu,length_ratio,seconds\n");
    for r in records {
        s.push_str(&format!("{},{},{:.4},{:.4},{:.3}\n", r.beam, r.reward, r.bleu, r.length_ratio, r.seconds));
    }
    s
}
