use std::collections::HashMap;

use rand::Rng as _;

use crate::decode::StepModel;
use crate::error::{Error, Result};
use crate::numcore::{log_softmax, stream_rng, Stream};

/// Toy scorer with an explicit next-token distribution for every prefix.
///
/// Tokens are `0..vocab_size`, the last id is EOS. Every prefix of exactly
/// `max_len` content tokens puts all mass on EOS, so the sequence space is
/// finite and can be enumerated.
#[derive(Debug, Clone)]
pub struct TabularModel {
    vocab_size: usize,
    max_len: usize,
    table: HashMap<Vec<usize>, Vec<f64>>,
}

impl TabularModel {
    /// Random distributions from `log_softmax(scale · u)`, `u ~ U(-1, 1)`.
    pub fn random(vocab_size: usize, max_len: usize, scale: f64, seed: u64) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::InvalidArgument("tabular model needs at least one token besides EOS".into()));
        }
        let mut rng = stream_rng(seed, Stream::Synth, 0);
        let eos = vocab_size - 1;
        let mut table = HashMap::new();
        let mut frontier: Vec<Vec<usize>> = vec![Vec::new()];
        while let Some(prefix) = frontier.pop() {
            let row = if prefix.len() == max_len {
                (0..vocab_size).map(|t| if t == eos { 0.0 } else { f64::NEG_INFINITY }).collect()
            } else {
                let logits: Vec<f64> = (0..vocab_size).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
                for t in 0..eos {
                    let mut next = prefix.clone();
                    next.push(t);
                    frontier.push(next);
                }
                log_softmax(&logits)
            };
            table.insert(prefix, row);
        }
        Ok(TabularModel { vocab_size, max_len, table })
    }

    /// Builds from explicit rows. Every prefix reachable by a finite
    /// non-EOS log-probability must have a row.
    pub fn from_table(vocab_size: usize, max_len: usize, table: HashMap<Vec<usize>, Vec<f64>>) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::InvalidArgument("tabular model needs at least one token besides EOS".into()));
        }
        if let Some(bad) = table.values().find(|r| r.len() != vocab_size) {
            return Err(Error::Shape { op: "tabular_row", shapes: vec![vec![bad.len()], vec![vocab_size]] });
        }
        if !table.contains_key(&Vec::new()) {
            return Err(Error::InvalidArgument("tabular model has no row for the empty prefix".into()));
        }
        Ok(TabularModel { vocab_size, max_len, table })
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Next-token log-probabilities after `prefix`.
    pub fn row(&self, prefix: &[usize]) -> Option<&[f64]> {
        self.table.get(prefix).map(Vec::as_slice)
    }
}

impl StepModel for TabularModel {
    type State = Vec<usize>;

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn eos(&self) -> usize {
        self.vocab_size - 1
    }

    fn start_token(&self) -> usize {
        self.eos()
    }

    fn initial_state(&mut self) -> Result<Vec<usize>> {
        Ok(Vec::new())
    }

    fn step(&mut self, items: &[(&Vec<usize>, usize)]) -> Result<Vec<(Vec<f64>, Vec<usize>)>> {
        items
            .iter()
            .map(|&(prefix, prev)| {
                let mut state = prefix.clone();
                if !(prefix.is_empty() && prev == self.start_token()) {
                    state.push(prev);
                }
                let row = self.table.get(&state).ok_or_else(|| {
                    Error::InvalidArgument(format!("tabular model has no row for prefix {state:?}"))
                })?;
                Ok((row.clone(), state))
            })
            .collect()
    }
}
