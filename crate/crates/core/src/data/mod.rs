//! Preprocessing, vocabularies, image features and batching.

mod batch;
mod features;
mod text;
mod vocab;

use std::fs;
use std::path::Path;

pub use batch::{make_batches, Batch, CaptionTriple, BUCKET_WIDTH};
pub use features::{load_image_features, FeatureStore, IMGF_MAGIC, IMGF_VERSION};
pub use text::{normalize_punctuation, preprocess_line};
pub use vocab::{Vocabulary, BOS, EOS, NUM_RESERVED, PAD, RESERVED, UNK};

use crate::error::{Error, Result};

/// Default pooled image feature width.
pub const DEFAULT_IMAGE_DIM: usize = 2048;

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Runs [`preprocess_line`] over every line; an empty line is an error naming its position.
pub fn preprocess_file(path: &Path) -> Result<Vec<Vec<String>>> {
    read_lines(path)?
        .iter()
        .enumerate()
        .map(|(i, line)| {
            preprocess_line(line).map_err(|_| Error::Format {
                path: path.into(),
                message: format!("line {} is empty", i + 1),
            })
        })
        .collect()
}

/// Reads an already tokenized file (space-separated tokens).
pub fn read_tokenized(path: &Path) -> Result<Vec<Vec<String>>> {
    read_lines(path)?
        .iter()
        .enumerate()
        .map(|(i, line)| {
            let toks: Vec<String> = line.split_whitespace().map(str::to_string).collect();
            if toks.is_empty() {
                Err(Error::Format { path: path.into(), message: format!("line {} is empty", i + 1) })
            } else {
                Ok(toks)
            }
        })
        .collect()
}

pub fn write_tokenized(path: &Path, lines: &[Vec<String>]) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(&l.join(" "));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Encodes aligned token lists (and optional features) into triples.
pub fn build_triples(
    source: &[Vec<String>],
    target: &[Vec<String>],
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    features: Option<&FeatureStore>,
) -> Result<Vec<CaptionTriple>> {
    if source.len() != target.len() {
        return Err(Error::Alignment(format!("source has {} lines, target has {}", source.len(), target.len())));
    }
    if let Some(f) = features {
        if f.len() != source.len() {
            return Err(Error::Alignment(format!("text has {} lines, features have {} rows", source.len(), f.len())));
        }
    }
    source
        .iter()
        .zip(target)
        .enumerate()
        .map(|(i, (s, t))| {
            CaptionTriple::new(src_vocab.encode(s), tgt_vocab.encode(t), features.map(|f| f.feature(i)))
        })
        .collect()
}
