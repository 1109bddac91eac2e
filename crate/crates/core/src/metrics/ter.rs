use crate::error::{Error, Result};

/// Longest block considered for a shift.
pub const MAX_SHIFT_LEN: usize = 10;

/// Word-level Levenshtein distance (unit insert/delete/substitute).
pub fn edit_distance<S: PartialEq>(hyp: &[S], reference: &[S]) -> usize {
    let mut prev: Vec<usize> = (0..=reference.len()).collect();
    let mut cur = vec![0; reference.len() + 1];
    for (i, h) in hyp.iter().enumerate() {
        cur[0] = i + 1;
        for (j, r) in reference.iter().enumerate() {
            let sub = prev[j] + usize::from(h != r);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[reference.len()]
}

/// For each hyp position, whether one optimal alignment pairs it with an identical ref word.
fn matched_positions<S: PartialEq>(hyp: &[S], reference: &[S]) -> Vec<bool> {
    let (n, m) = (hyp.len(), reference.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, cell) in d[0].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(hyp[i - 1] != reference[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut matched = vec![false; n];
    let (mut i, mut j) = (n, m);
    while i > 0 && j > 0 {
        let same = hyp[i - 1] == reference[j - 1];
        if d[i][j] == d[i - 1][j - 1] + usize::from(!same) {
            matched[i - 1] = same;
            i -= 1;
            j -= 1;
        } else if d[i][j] == d[i - 1][j] + 1 {
            i -= 1;
        } else {
            j -= 1;
        }
    }
    matched
}

fn occurs_in<S: PartialEq>(block: &[S], reference: &[S]) -> bool {
    reference.windows(block.len()).any(|w| w == block)
}

fn apply_shift<S: Clone>(words: &[S], start: usize, len: usize, dest: usize) -> Vec<S> {
    let mut rest: Vec<S> = Vec::with_capacity(words.len());
    rest.extend_from_slice(&words[..start]);
    rest.extend_from_slice(&words[start + len..]);
    let mut out = Vec::with_capacity(words.len());
    out.extend_from_slice(&rest[..dest]);
    out.extend_from_slice(&words[start..start + len]);
    out.extend_from_slice(&rest[dest..]);
    out
}

/// Edit count for one sentence pair: greedy block shifts, then edit distance.
///
/// Each round applies the shift giving the lowest remaining edit distance
/// (ties: leftmost start, then shortest block, then leftmost destination), as
/// long as it lowers the total of shifts plus edits. A candidate block must
/// occur verbatim in the reference and contain a word not already matched.
pub fn ter_edits<S: PartialEq + Clone>(hyp: &[S], reference: &[S]) -> usize {
    let mut cur = hyp.to_vec();
    let mut cur_ed = edit_distance(&cur, reference);
    let mut shifts = 0;
    loop {
        if cur_ed <= 1 {
            break;
        }
        let matched = matched_positions(&cur, reference);
        let n = cur.len();
        let mut best: Option<(usize, Vec<S>)> = None;
        for start in 0..n {
            for len in 1..=MAX_SHIFT_LEN.min(n - start) {
                let block = &cur[start..start + len];
                if matched[start..start + len].iter().all(|&m| m) || !occurs_in(block, reference) {
                    continue;
                }
                for dest in 0..=n - len {
                    if dest == start {
                        continue;
                    }
                    let cand = apply_shift(&cur, start, len, dest);
                    let e = edit_distance(&cand, reference);
                    if best.as_ref().is_none_or(|(b, _)| e < *b) {
                        best = Some((e, cand));
                    }
                }
            }
        }
        match best {
            Some((e, cand)) if e + 1 < cur_ed => {
                cur = cand;
                cur_ed = e;
                shifts += 1;
            }
            _ => break,
        }
    }
    shifts + cur_ed
}

/// Corpus TER: total edits over total reference words, ×100.
pub fn ter_corpus<S: PartialEq + Clone>(hypotheses: &[Vec<S>], references: &[Vec<S>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::Alignment(format!(
            "{} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let ref_words: usize = references.iter().map(Vec::len).sum();
    if ref_words == 0 {
        return Err(Error::EmptyCorpus);
    }
    let edits: usize = hypotheses.iter().zip(references).map(|(h, r)| ter_edits(h, r)).sum();
    Ok(100.0 * edits as f64 / ref_words as f64)
}

/// Word error rate without shifts, on the same ×100 scale.
pub fn wer_corpus<S: PartialEq>(hypotheses: &[Vec<S>], references: &[Vec<S>]) -> Result<f64> {
    let ref_words: usize = references.iter().map(Vec::len).sum();
    if ref_words == 0 || hypotheses.len() != references.len() {
        return Err(Error::EmptyCorpus);
    }
    let edits: usize = hypotheses.iter().zip(references).map(|(h, r)| edit_distance(h, r)).sum();
    Ok(100.0 * edits as f64 / ref_words as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn identity_is_zero() {
        let c = vec![toks("a b c"), toks("x")];
        assert_eq!(ter_corpus(&c, &c).unwrap(), 0.0);
    }

    #[test]
    fn single_swap_is_one_shift() {
        let h = vec![toks("a c b d")];
        let r = vec![toks("a b c d")];
        assert_eq!(ter_corpus(&h, &r).unwrap(), 25.0);
    }

    #[test]
    fn empty_hypothesis_is_all_deletions() {
        let h = vec![vec![]];
        let r = vec![toks("a b")];
        assert_eq!(ter_corpus(&h, &r).unwrap(), 100.0);
    }

    #[test]
    fn block_shift_beats_edits() {
        // moving "d e f" to the front costs one shift instead of six edits
        assert_eq!(ter_edits(&toks("a b c d e f"), &toks("d e f a b c")), 1);
    }

    #[test]
    fn levenshtein_basics() {
        assert_eq!(edit_distance(&toks("kitten"), &toks("sitting")), 1);
        assert_eq!(edit_distance(&toks("a b c"), &toks("a x c d")), 2);
        assert_eq!(edit_distance::<&str>(&[], &toks("a b")), 2);
    }

    #[test]
    fn empty_reference_corpus_rejected() {
        let h = vec![toks("a")];
        let r: Vec<Vec<&str>> = vec![vec![]];
        assert!(ter_corpus(&h, &r).is_err());
    }
}
