use std::collections::HashMap;

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

/// Pooled clipped n-gram statistics for orders 1..=4 plus lengths.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BleuStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

impl BleuStats {
    pub fn add_sentence<S: AsRef<str>>(&mut self, hyp: &[S], reference: &[S]) {
        self.hyp_len += hyp.len();
        self.ref_len += reference.len();
        for n in 1..=MAX_ORDER {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            self.matches[n - 1] += h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum::<usize>();
            self.totals[n - 1] += hyp.len().saturating_sub(n - 1);
        }
    }

    /// Corpus BLEU on a 0..100 scale; 0 when any order has no matches.
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 || self.matches.contains(&0) {
            return 0.0;
        }
        let log_prec: f64 =
            self.matches.iter().zip(&self.totals).map(|(&m, &t)| (m as f64 / t as f64).ln()).sum::<f64>()
                / MAX_ORDER as f64;
        let bp = if self.hyp_len < self.ref_len { (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp() } else { 1.0 };
        100.0 * bp * log_prec.exp()
    }

    /// Add-one smoothed score, for per-sentence debugging output only.
    pub fn smoothed_score(&self) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let log_prec: f64 = self
            .matches
            .iter()
            .zip(&self.totals)
            .enumerate()
            .map(|(i, (&m, &t))| if i == 0 { (m.max(1) as f64 / t as f64).ln() } else { ((m + 1) as f64 / (t + 1) as f64).ln() })
            .sum::<f64>()
            / MAX_ORDER as f64;
        let bp = if self.hyp_len < self.ref_len { (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp() } else { 1.0 };
        100.0 * bp * log_prec.exp()
    }
}

/// Corpus-level BLEU-4 with a single reference per hypothesis, no smoothing.
pub fn bleu_corpus<S: AsRef<str>>(hypotheses: &[Vec<S>], references: &[Vec<S>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::Alignment(format!(
            "{} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut stats = BleuStats::default();
    for (h, r) in hypotheses.iter().zip(references) {
        stats.add_sentence(h, r);
    }
    Ok(stats.score())
}

/// Add-one smoothed sentence BLEU. Debugging aid; not comparable to corpus BLEU.
pub fn sentence_bleu_smoothed<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> f64 {
    let mut stats = BleuStats::default();
    stats.add_sentence(hyp, reference);
    stats.smoothed_score()
}
