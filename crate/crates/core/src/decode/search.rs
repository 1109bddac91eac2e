use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A left-to-right scorer that search procedures can drive.
///
/// `step` receives a batch of `(state, previous token)` pairs and returns, for
/// each, the log-probabilities of every next token and the successor state.
/// The first step of a sequence is given `start_token()` as previous token.
pub trait StepModel {
    type State: Clone;

    fn vocab_size(&self) -> usize;
    fn eos(&self) -> usize;
    fn start_token(&self) -> usize;
    fn initial_state(&mut self) -> Result<Self::State>;
    fn step(&mut self, items: &[(&Self::State, usize)]) -> Result<Vec<(Vec<f64>, Self::State)>>;
}

/// Search settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub beam_size: usize,
    /// Per-word reward `r`.
    pub reward: f64,
    /// `ρ` in the length bound `B = min(ceil(ρ·|x|), max_len)`.
    pub bound_ratio: f64,
    /// Hard cap on generated tokens, EOS included.
    pub max_len: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig { beam_size: 5, reward: 0.1, bound_ratio: 1.5, max_len: 100 }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam size must be at least 1".into()));
        }
        if !self.reward.is_finite() || self.reward < 0.0 {
            return Err(Error::Config(format!("reward must be finite and non-negative, got {}", self.reward)));
        }
        if !self.bound_ratio.is_finite() || self.bound_ratio <= 0.0 {
            return Err(Error::Config(format!("bound ratio must be positive, got {}", self.bound_ratio)));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max length must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of words eligible for the reward given the source length.
    pub fn length_bound(&self, source_len: usize) -> usize {
        ((self.bound_ratio * source_len as f64).ceil() as usize).min(self.max_len)
    }
}

/// A finished (or cap-truncated) output. `tokens` excludes EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub score: f64,
    /// False when the length cap cut the sequence before EOS.
    pub finished: bool,
}

/// Bounded length-rewarded score `log p + r·min(len, bound)`.
pub fn rewarded_score(log_prob: f64, len: usize, reward: f64, bound: usize) -> f64 {
    log_prob + reward * len.min(bound) as f64
}

/// Higher score first, then shorter, then lexicographically smaller.
fn rank(a_score: f64, a_tokens: &[usize], b_score: f64, b_tokens: &[usize]) -> Ordering {
    b_score
        .partial_cmp(&a_score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a_tokens.len().cmp(&b_tokens.len()))
        .then_with(|| a_tokens.cmp(b_tokens))
}

fn best_of(pool: Vec<Hypothesis>) -> Option<Hypothesis> {
    pool.into_iter().min_by(|a, b| rank(a.score, &a.tokens, b.score, &b.tokens))
}

struct Live<S> {
    tokens: Vec<usize>,
    log_prob: f64,
    state: S,
}

struct Candidate {
    parent: usize,
    token: usize,
    tokens: Vec<usize>,
    log_prob: f64,
    score: f64,
    eos: bool,
}

/// Beam search under the bounded word reward.
///
/// Each step keeps the `beam_size` best expansions overall; those ending in
/// EOS move to a finished pool. Search stops once no live hypothesis can
/// still beat the best finished one (its score plus the reward it could
/// still collect up to the bound), when the beam empties, or at `max_len`,
/// where live hypotheses join the pool unfinished. Returns the pool's best.
pub fn beam_search<M: StepModel>(model: &mut M, source_len: usize, cfg: &BeamConfig) -> Result<Hypothesis> {
    best_of(beam_search_pool(model, source_len, cfg)?)
        .ok_or_else(|| Error::NonFinite("every continuation had a non-finite log-probability".into()))
}

/// The whole finished pool [`beam_search`] chooses from, in insertion order.
pub fn beam_search_pool<M: StepModel>(model: &mut M, source_len: usize, cfg: &BeamConfig) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let bound = cfg.length_bound(source_len);
    let eos = model.eos();
    let vocab = model.vocab_size();
    let mut beam = vec![Live { tokens: Vec::new(), log_prob: 0.0, state: model.initial_state()? }];
    let mut pool: Vec<Hypothesis> = Vec::new();

    for _ in 0..cfg.max_len {
        if beam.is_empty() {
            break;
        }
        let items: Vec<(&M::State, usize)> =
            beam.iter().map(|h| (&h.state, h.tokens.last().copied().unwrap_or(model.start_token()))).collect();
        let outs = model.step(&items)?;
        if outs.len() != beam.len() {
            return Err(Error::InvalidArgument(format!("step returned {} rows for {} inputs", outs.len(), beam.len())));
        }
        let mut cands: Vec<Candidate> = Vec::new();
        for (parent, (h, (lps, _))) in beam.iter().zip(&outs).enumerate() {
            if lps.len() != vocab {
                return Err(Error::Shape { op: "beam_step", shapes: vec![vec![lps.len()], vec![vocab]] });
            }
            let mut local: Vec<Candidate> = Vec::new();
            for (token, &lp) in lps.iter().enumerate() {
                let log_prob = h.log_prob + lp;
                if !log_prob.is_finite() {
                    continue;
                }
                let is_eos = token == eos;
                let mut tokens = h.tokens.clone();
                if !is_eos {
                    tokens.push(token);
                }
                let score = rewarded_score(log_prob, tokens.len(), cfg.reward, bound);
                local.push(Candidate { parent, token, tokens, log_prob, score, eos: is_eos });
            }
            // only the best `beam_size` children of one parent can survive overall
            local.sort_by(cand_order);
            local.truncate(cfg.beam_size);
            cands.extend(local);
        }
        cands.sort_by(cand_order);
        cands.truncate(cfg.beam_size);

        let states: Vec<M::State> = outs.into_iter().map(|(_, s)| s).collect();
        beam = Vec::with_capacity(cands.len());
        for c in cands {
            if c.eos {
                pool.push(Hypothesis { tokens: c.tokens, log_prob: c.log_prob, score: c.score, finished: true });
            } else {
                beam.push(Live { tokens: c.tokens, log_prob: c.log_prob, state: states[c.parent].clone() });
            }
        }

        if let Some(best) = pool.iter().map(|h| h.score).reduce(f64::max) {
            let hope = beam.iter().map(|h| {
                let len = h.tokens.len();
                rewarded_score(h.log_prob, len, cfg.reward, bound) + cfg.reward * bound.saturating_sub(len) as f64
            });
            if hope.into_iter().all(|u| u < best) {
                beam.clear();
                break;
            }
        }
    }
    for h in beam {
        let score = rewarded_score(h.log_prob, h.tokens.len(), cfg.reward, bound);
        pool.push(Hypothesis { tokens: h.tokens, log_prob: h.log_prob, score, finished: false });
    }
    Ok(pool)
}

/// Score, then full length, then the emitted sequence (EOS included) in
/// lexicographic order, so siblings tie-break to the lowest token id.
fn cand_order(a: &Candidate, b: &Candidate) -> Ordering {
    let la = a.tokens.len() + usize::from(a.eos);
    let lb = b.tokens.len() + usize::from(b.eos);
    let ea = a.tokens.iter().copied().chain(a.eos.then_some(a.token));
    let eb = b.tokens.iter().copied().chain(b.eos.then_some(b.token));
    b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal).then_with(|| la.cmp(&lb)).then_with(|| ea.cmp(eb))
}

/// Arg-max decoding, ties to the lowest token id. Returns tokens without EOS.
pub fn greedy_decode<M: StepModel>(model: &mut M, max_len: usize) -> Result<Vec<usize>> {
    if max_len == 0 {
        return Err(Error::Config("max length must be at least 1".into()));
    }
    let eos = model.eos();
    let mut state = model.initial_state()?;
    let mut prev = model.start_token();
    let mut out = Vec::new();
    for _ in 0..max_len {
        let (lps, next) = model.step(&[(&state, prev)])?.pop().ok_or(Error::EmptyCorpus)?;
        let mut best: Option<(usize, f64)> = None;
        for (t, &lp) in lps.iter().enumerate() {
            if lp.is_finite() && best.is_none_or(|(_, b)| lp > b) {
                best = Some((t, lp));
            }
        }
        let (token, _) = best.ok_or_else(|| Error::NonFinite("no finite log-probability".into()))?;
        if token == eos {
            break;
        }
        out.push(token);
        state = next;
        prev = token;
    }
    Ok(out)
}
