//! Teacher-forced SGD training with dev-set model selection and early stopping.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{make_batches, Batch, CaptionTriple};
use crate::decode::{greedy_decode, parallel_map, NmtScorer};
use crate::error::{Error, Result};
use crate::metrics::bleu_corpus;
use crate::model::{Model, ModelConfig};
use crate::numcore::{sgd_step, stream_rng, Stream, Tape};

/// Dev-set criterion used to pick the returned model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    DevLoss,
    DevBleu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Overrides the model config's rate.
    pub dropout_rate: f64,
    pub max_epochs: usize,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
    pub selection: Selection,
    /// Greedy-decode cap used when selecting by dev BLEU.
    pub bleu_max_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1.0,
            batch_size: 64,
            dropout_rate: 0.6,
            max_epochs: 15,
            clip_norm: Some(5.0),
            seed: 1,
            patience: 3,
            selection: Selection::DevLoss,
            bleu_max_len: 50,
        }
    }
}

impl TrainConfig {
    /// `learning_rate == 0` is accepted and skips the update entirely.
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout rate must be in [0, 1), got {}", self.dropout_rate)));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max epochs must be at least 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::Config(format!("clip norm must be positive, got {c}")));
            }
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.bleu_max_len == 0 {
            return Err(Error::Config("bleu_max_len must be at least 1".into()));
        }
        Ok(())
    }
}

/// One line of the training report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean per-token NLL over the epoch's training batches (dropout on).
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_perplexity: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_bleu: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch of the returned model.
    pub selected_epoch: usize,
    pub stopped_early: bool,
    /// Wall-clock seconds per epoch; kept out of the JSON lines so reruns compare equal.
    #[serde(skip)]
    pub epoch_seconds: Vec<f64>,
}

impl TrainReport {
    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for e in &self.epochs {
            s.push_str(&serde_json::to_string(e)?);
            s.push('\n');
        }
        Ok(s)
    }

    /// One JSON object per epoch with its wall-clock seconds.
    pub fn timings_jsonl(&self) -> String {
        self.epoch_seconds
            .iter()
            .enumerate()
            .map(|(i, s)| format!("{{\"epoch\":{},\"seconds\":{}}}\n", i + 1, s))
            .collect()
    }
}

fn check_vocab(model: &Model, corpus: &[CaptionTriple]) -> Result<()> {
    let (sv, tv) = (model.config.src_vocab_size, model.config.tgt_vocab_size);
    for (i, t) in corpus.iter().enumerate() {
        if let Some(&bad) = t.source.iter().find(|&&x| x >= sv) {
            return Err(Error::VocabMismatch(format!("pair {i}: source id {bad} outside vocabulary of {sv}")));
        }
        if let Some(&bad) = t.target.iter().find(|&&x| x >= tv) {
            return Err(Error::VocabMismatch(format!("pair {i}: target id {bad} outside vocabulary of {tv}")));
        }
        if model.config.variant.uses_image() {
            match &t.image {
                Some(img) if img.len() == model.config.d_img => {}
                Some(img) => {
                    return Err(Error::VocabMismatch(format!(
                        "pair {i}: image has {} features, model expects {}",
                        img.len(),
                        model.config.d_img
                    )))
                }
                None => return Err(Error::InvalidArgument(format!("pair {i}: image-conditioned model needs an image"))),
            }
        }
    }
    Ok(())
}

const DEV_BATCH: usize = 32;

/// Mean per-token NLL of `corpus` in inference mode.
pub fn dev_loss(model: &Model, corpus: &[CaptionTriple]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    check_vocab(model, corpus)?;
    let chunks: Vec<Vec<usize>> =
        (0..corpus.len()).collect::<Vec<_>>().chunks(DEV_BATCH).map(<[usize]>::to_vec).collect();
    let per_batch = parallel_map(&chunks, crate::decode::default_workers(), |idx| {
        let batch = Batch::from_triples(corpus, idx)?;
        let mut tape = Tape::inference();
        let mut rng = stream_rng(0, Stream::Dropout, 0);
        let loss = model.loss(&mut tape, &batch, &mut rng)?;
        Ok((tape.value(loss).item() * batch.num_target_tokens(), batch.num_target_tokens()))
    })?;
    let (sum, tokens) = per_batch.iter().fold((0.0, 0.0), |(s, n), &(a, b)| (s + a, n + b));
    Ok(sum / tokens)
}

/// Corpus BLEU of greedy outputs against the target ids, both rendered as id strings.
pub fn dev_bleu(model: &Model, corpus: &[CaptionTriple], max_len: usize) -> Result<f64> {
    check_vocab(model, corpus)?;
    let hyps = parallel_map(corpus, crate::decode::default_workers(), |t| {
        let mut scorer = NmtScorer::new(model, &t.source, t.image.as_deref())?;
        let out = greedy_decode(&mut scorer, max_len)?;
        Ok(out.iter().map(usize::to_string).collect::<Vec<_>>())
    })?;
    let refs: Vec<Vec<String>> = corpus.iter().map(|t| t.target.iter().map(usize::to_string).collect()).collect();
    bleu_corpus(&hyps, &refs)
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_add((epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Trains from a fresh initialization and returns the dev-selected model.
///
/// `progress` sees each epoch record as soon as it is complete.
pub fn train(
    model_config: &ModelConfig,
    train_set: &[CaptionTriple],
    dev_set: &[CaptionTriple],
    cfg: &TrainConfig,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let model_config = ModelConfig { dropout_rate: cfg.dropout_rate, ..model_config.clone() };
    let mut model = Model::new(model_config, cfg.seed)?;
    check_vocab(&model, train_set)?;
    check_vocab(&model, dev_set)?;

    let mut report = TrainReport { epochs: Vec::new(), selected_epoch: 0, stopped_early: false, epoch_seconds: Vec::new() };
    let mut best: Option<(f64, crate::numcore::Parameters)> = None;
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        let batches = make_batches(train_set, cfg.batch_size, epoch_seed(cfg.seed, epoch))?;
        let (mut loss_sum, mut tokens) = (0.0, 0.0);
        for (b, batch) in batches.iter().enumerate() {
            let mut rng = stream_rng(cfg.seed, Stream::Dropout, ((epoch as u64) << 32) | b as u64);
            let mut tape = Tape::training();
            let loss = model.loss(&mut tape, batch, &mut rng)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, batch: b + 1 });
            }
            loss_sum += value * batch.num_target_tokens();
            tokens += batch.num_target_tokens();
            if cfg.learning_rate > 0.0 {
                tape.backward(loss, &mut model.params)?;
                sgd_step(&mut model.params, cfg.learning_rate, cfg.clip_norm)
                    .map_err(|e| match e {
                        Error::NonFinite(_) => Error::Diverged { epoch, batch: b + 1 },
                        other => other,
                    })?;
                model.params.zero_grads();
            }
        }
        let dev = dev_loss(&model, dev_set)?;
        if !dev.is_finite() {
            return Err(Error::Diverged { epoch, batch: 0 });
        }
        let bleu = match cfg.selection {
            Selection::DevBleu => Some(dev_bleu(&model, dev_set, cfg.bleu_max_len)?),
            Selection::DevLoss => None,
        };
        let record = EpochRecord { epoch, train_loss: loss_sum / tokens, dev_loss: dev, dev_perplexity: dev.exp(), dev_bleu: bleu };
        progress(&record);
        report.epochs.push(record);
        report.epoch_seconds.push(start.elapsed().as_secs_f64());

        // lower is better for both criteria after negating BLEU
        let key = match bleu {
            Some(b) => -b,
            None => dev,
        };
        if best.as_ref().is_none_or(|(k, _)| key < *k) {
            best = Some((key, model.params.clone()));
            report.selected_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                report.stopped_early = epoch < cfg.max_epochs;
                break;
            }
        }
    }
    let (_, params) = best.expect("at least one epoch ran");
    let model = Model::from_parameters(model.config.clone(), params)?;
    Ok((model, report))
}
