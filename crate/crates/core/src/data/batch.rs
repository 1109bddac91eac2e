use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::data::vocab::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::numcore::{stream_rng, Stream, Tensor};

/// Width of source-length buckets used before batching.
pub const BUCKET_WIDTH: usize = 4;

/// One aligned (source, target, image) example, as vocabulary ids.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionTriple {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
    pub image: Option<Vec<f64>>,
}

impl CaptionTriple {
    pub fn new(source: Vec<usize>, target: Vec<usize>, image: Option<Vec<f64>>) -> Result<Self> {
        if source.is_empty() || target.is_empty() {
            return Err(Error::EmptySegment);
        }
        if source.contains(&PAD) || target.contains(&PAD) {
            return Err(Error::InvalidArgument("PAD id inside a sequence".into()));
        }
        if let Some(img) = &image {
            if img.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("image feature".into()));
            }
        }
        Ok(CaptionTriple { source, target, image })
    }
}

/// Padded mini-batch. Matrices are row-major with one row per sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[size, max_src]`, PAD-filled.
    pub source: Vec<usize>,
    pub source_lengths: Vec<usize>,
    pub max_src: usize,
    /// `[size, max_tgt]`: BOS followed by the target.
    pub target_in: Vec<usize>,
    /// `[size, max_tgt]`: the target followed by EOS.
    pub target_out: Vec<usize>,
    /// 1.0 on real target_out tokens (including EOS), 0.0 on PAD.
    pub target_mask: Vec<f64>,
    pub max_tgt: usize,
    /// `[size, d_img]` when the corpus carries images.
    pub images: Option<Tensor>,
    /// Corpus positions of the members, in row order.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn from_triples(corpus: &[CaptionTriple], indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let members: Vec<&CaptionTriple> = indices.iter().map(|&i| &corpus[i]).collect();
        let n = members.len();
        let max_src = members.iter().map(|t| t.source.len()).max().unwrap();
        let max_tgt = members.iter().map(|t| t.target.len()).max().unwrap() + 1;
        let mut source = vec![PAD; n * max_src];
        let mut target_in = vec![PAD; n * max_tgt];
        let mut target_out = vec![PAD; n * max_tgt];
        let mut target_mask = vec![0.0; n * max_tgt];
        for (r, t) in members.iter().enumerate() {
            source[r * max_src..r * max_src + t.source.len()].copy_from_slice(&t.source);
            let row = r * max_tgt;
            target_in[row] = BOS;
            target_in[row + 1..row + 1 + t.target.len()].copy_from_slice(&t.target);
            target_out[row..row + t.target.len()].copy_from_slice(&t.target);
            target_out[row + t.target.len()] = EOS;
            target_mask[row..row + t.target.len() + 1].iter_mut().for_each(|m| *m = 1.0);
        }
        let with_image = members.iter().filter(|t| t.image.is_some()).count();
        let images = if with_image == 0 {
            None
        } else if with_image == n {
            let d = members[0].image.as_ref().unwrap().len();
            let mut data = Vec::with_capacity(n * d);
            for t in &members {
                let img = t.image.as_ref().unwrap();
                if img.len() != d {
                    return Err(Error::InvalidArgument("image dimension varies within corpus".into()));
                }
                data.extend_from_slice(img);
            }
            Some(Tensor::new(vec![n, d], data)?)
        } else {
            return Err(Error::InvalidArgument("corpus mixes triples with and without images".into()));
        };
        Ok(Batch {
            source,
            source_lengths: members.iter().map(|t| t.source.len()).collect(),
            max_src,
            target_in,
            target_out,
            target_mask,
            max_tgt,
            images,
            indices: indices.to_vec(),
        })
    }

    pub fn size(&self) -> usize {
        self.source_lengths.len()
    }

    /// Source ids at time step `t` for every row.
    pub fn source_column(&self, t: usize) -> Vec<usize> {
        (0..self.size()).map(|r| self.source[r * self.max_src + t]).collect()
    }

    pub fn target_in_column(&self, t: usize) -> Vec<usize> {
        (0..self.size()).map(|r| self.target_in[r * self.max_tgt + t]).collect()
    }

    /// Whether each row still has a real source token at step `t`.
    pub fn source_live(&self, t: usize) -> Vec<bool> {
        self.source_lengths.iter().map(|&l| t < l).collect()
    }

    /// `[size * max_src]` attention mask: true on real source positions.
    pub fn source_mask(&self) -> Vec<bool> {
        let mut m = Vec::with_capacity(self.source.len());
        for &l in &self.source_lengths {
            m.extend((0..self.max_src).map(|t| t < l));
        }
        m
    }

    pub fn num_target_tokens(&self) -> f64 {
        self.target_mask.iter().sum()
    }
}

/// Groups the corpus by source length (buckets of [`BUCKET_WIDTH`]), shuffles
/// within and across buckets with the given seed, then cuts consecutive
/// batches. Every triple lands in exactly one batch; only the last may be short.
pub fn make_batches(corpus: &[CaptionTriple], batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let mut rng = stream_rng(seed, Stream::Shuffle, 0);
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, t) in corpus.iter().enumerate() {
        buckets.entry((t.source.len().max(1) - 1) / BUCKET_WIDTH).or_default().push(i);
    }
    let mut buckets: Vec<Vec<usize>> = buckets.into_values().collect();
    for b in &mut buckets {
        b.shuffle(&mut rng);
    }
    buckets.shuffle(&mut rng);
    let order: Vec<usize> = buckets.into_iter().flatten().collect();
    order.chunks(batch_size).map(|chunk| Batch::from_triples(corpus, chunk)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triple(src: &[usize], tgt: &[usize]) -> CaptionTriple {
        CaptionTriple::new(src.to_vec(), tgt.to_vec(), None).unwrap()
    }

    fn toy(n: usize) -> Vec<CaptionTriple> {
        (0..n).map(|i| triple(&vec![4 + i % 3; 1 + i % 6], &vec![5; 1 + (i * 7) % 5])).collect()
    }

    #[test]
    fn five_by_two() {
        let corpus: Vec<_> = (0..5).map(|i| triple(&[4 + i], &[4])).collect();
        let mut sizes: Vec<usize> = make_batches(&corpus, 2, 1).unwrap().iter().map(Batch::size).collect();
        sizes.sort();
        assert_eq!(sizes, [1, 2, 2]);
    }

    #[test]
    fn every_triple_once_and_deterministic() {
        let corpus = toy(37);
        let a = make_batches(&corpus, 4, 9).unwrap();
        let mut seen: Vec<usize> = a.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort();
        assert_eq!(seen, (0..37).collect::<Vec<_>>());
        assert_eq!(a, make_batches(&corpus, 4, 9).unwrap());
    }

    #[test]
    fn layout_of_single_row() {
        let corpus = vec![triple(&[7, 8], &[9, 10, 11]), triple(&[4], &[5])];
        let b = Batch::from_triples(&corpus, &[1, 0]).unwrap();
        assert_eq!(b.max_src, 2);
        assert_eq!(b.max_tgt, 4);
        assert_eq!(b.source, [4, PAD, 7, 8]);
        assert_eq!(b.target_in, [BOS, 5, PAD, PAD, BOS, 9, 10, 11]);
        assert_eq!(b.target_out, [5, EOS, PAD, PAD, 9, 10, 11, EOS]);
        assert_eq!(b.target_mask, [1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(b.source_mask(), [true, false, true, true]);
    }

    #[test]
    fn mask_total_counts_targets_plus_eos() {
        let corpus = toy(23);
        let total: f64 = make_batches(&corpus, 5, 3).unwrap().iter().map(Batch::num_target_tokens).sum();
        let expected: usize = corpus.iter().map(|t| t.target.len() + 1).sum();
        assert_eq!(total, expected as f64);
    }

    #[test]
    fn zero_batch_size_rejected() {
        assert!(make_batches(&toy(3), 0, 0).is_err());
    }

    #[test]
    fn triple_validation() {
        assert!(CaptionTriple::new(vec![], vec![4], None).is_err());
        assert!(CaptionTriple::new(vec![4, PAD], vec![4], None).is_err());
    }
}
