//! Corpus BLEU, TER and length ratio over tokenized sentences.

mod bleu;
mod ter;

use serde::{Deserialize, Serialize};

pub use bleu::{bleu_corpus, sentence_bleu_smoothed, BleuStats, MAX_ORDER};
pub use ter::{edit_distance, ter_corpus, ter_edits, wer_corpus, MAX_SHIFT_LEN};

use crate::error::{Error, Result};

/// Total hypothesis tokens over total reference tokens.
pub fn length_ratio<S>(hypotheses: &[Vec<S>], references: &[Vec<S>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::Alignment(format!(
            "{} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let r: usize = references.iter().map(Vec::len).sum();
    if r == 0 {
        return Err(Error::EmptyCorpus);
    }
    let h: usize = hypotheses.iter().map(Vec::len).sum();
    Ok(h as f64 / r as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu: f64,
    pub ter: f64,
    pub length_ratio: f64,
    pub n: usize,
}

pub fn evaluate<S: AsRef<str> + PartialEq + Clone>(hypotheses: &[Vec<S>], references: &[Vec<S>]) -> Result<EvalReport> {
    Ok(EvalReport {
        bleu: bleu_corpus(hypotheses, references)?,
        ter: ter_corpus(hypotheses, references)?,
        length_ratio: length_ratio(hypotheses, references)?,
        n: hypotheses.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn ratio_cases() {
        let r = vec![toks("a b c d"), toks("e f")];
        assert_eq!(length_ratio(&r, &r).unwrap(), 1.0);
        let half = vec![toks("a b"), toks("e")];
        assert_eq!(length_ratio(&half, &r).unwrap(), 0.5);
        // 2 + 3 + 0 hyp tokens over 3 + 1 + 2 ref tokens
        let h = vec![toks("x y"), toks("x y z"), vec![]];
        let r = vec![toks("a b c"), toks("d"), toks("e f")];
        assert!((length_ratio(&h, &r).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert!(length_ratio(&h, &[vec![], vec![], vec![]]).is_err());
    }

    #[test]
    fn evaluate_self() {
        let r = vec![toks("a man rides a horse"), toks("a dog")];
        let rep = evaluate(&r, &r).unwrap();
        assert_eq!(rep, EvalReport { bleu: 100.0, ter: 0.0, length_ratio: 1.0, n: 2 });
    }
}
