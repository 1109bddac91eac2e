//! Greedy and beam search with a bounded per-word reward, a toy tabular
//! scorer for exact checks, and corpus-level decoding of trained models.

mod nmt;
mod search;
mod tabular;

pub use nmt::{
    default_workers, detokenize, parallel_map, sweep, sweep_csv, translate, translate_corpus, translate_greedy,
    NmtScorer, NmtState, SourceSentence, SweepRecord,
};
pub use search::{beam_search, beam_search_pool, greedy_decode, rewarded_score, BeamConfig, Hypothesis, StepModel};
pub use tabular::TabularModel;

#[cfg(test)]
mod tests;
