//! Synthetic grounding corpus: one source word whose translation depends
//! only on which of two image clusters accompanies the sentence.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::FeatureStore;
use crate::error::{Error, Result};
use crate::numcore::{stream_rng, Rng, Stream};

/// Source word with two image-dependent translations.
pub const AMBIGUOUS_SOURCE: &str = "bat";
/// Translation for cluster 0 (the animal).
pub const TARGET_A: &str = "fledermaus";
/// Translation for cluster 1 (the club).
pub const TARGET_B: &str = "schlaeger";

const SUBJECTS: [(&str, &str); 6] =
    [("man", "mann"), ("woman", "frau"), ("child", "kind"), ("boy", "junge"), ("girl", "maedchen"), ("dog", "hund")];
const VERBS: [(&str, &str); 5] =
    [("holds", "haelt"), ("sees", "sieht"), ("finds", "findet"), ("watches", "beobachtet"), ("grabs", "greift")];
const DETS: [(&str, &str); 2] = [("a", "ein"), ("the", "der")];
const PLACES: [(&str, &str); 4] = [("park", "park"), ("garden", "garten"), ("street", "strasse"), ("field", "feld")];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub d_img: usize,
    /// Distance of each cluster mean from the origin.
    pub separation: f64,
    /// Per-coordinate standard deviation around the cluster mean.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { train: 500, dev: 100, test: 100, d_img: 16, separation: 3.0, noise: 0.5, seed: 1 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train == 0 || self.dev == 0 {
            return Err(Error::Config("synthetic train and dev sizes must be positive".into()));
        }
        if self.d_img == 0 {
            return Err(Error::Config("synthetic image dimension must be positive".into()));
        }
        if !(self.separation > 0.0) || !(self.noise >= 0.0) || !self.separation.is_finite() || !self.noise.is_finite() {
            return Err(Error::Config("separation must be > 0 and noise >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthPair {
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub image: Vec<f32>,
    /// 0 selects [`TARGET_A`], 1 selects [`TARGET_B`].
    pub cluster: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub train: Vec<SynthPair>,
    pub dev: Vec<SynthPair>,
    pub test: Vec<SynthPair>,
}

fn cluster_mean(d: usize, separation: f64, cluster: usize) -> Vec<f64> {
    // ±separation along a fixed unit direction with alternating signs
    let scale = separation / (d as f64).sqrt();
    let sign = if cluster == 0 { 1.0 } else { -1.0 };
    (0..d).map(|i| sign * scale * if i % 2 == 0 { 1.0 } else { -1.0 }).collect()
}

fn sentence(rng: &mut Rng, cluster: usize) -> (Vec<String>, Vec<String>) {
    let mut src = Vec::new();
    let mut tgt = Vec::new();
    let mut push = |pair: (&str, &str)| {
        src.push(pair.0.to_string());
        tgt.push(pair.1.to_string());
    };
    let amb = (AMBIGUOUS_SOURCE, if cluster == 0 { TARGET_A } else { TARGET_B });
    let det = *DETS.choose(rng).unwrap();
    if rng.gen_bool(0.5) {
        // "<det> <subject> <verb> <det> bat"
        push(det);
        push(*SUBJECTS.choose(rng).unwrap());
        push(*VERBS.choose(rng).unwrap());
        push(*DETS.choose(rng).unwrap());
        push(amb);
    } else {
        // "<det> bat <verb> <det> <subject>"
        push(det);
        push(amb);
        push(*VERBS.choose(rng).unwrap());
        push(*DETS.choose(rng).unwrap());
        push(*SUBJECTS.choose(rng).unwrap());
    }
    if rng.gen_bool(0.5) {
        push(("in", "im"));
        push(*PLACES.choose(rng).unwrap());
    }
    (src, tgt)
}

fn split(rng: &mut Rng, n: usize, cfg: &SynthConfig) -> Result<Vec<SynthPair>> {
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(e.to_string()))?;
    let means = [cluster_mean(cfg.d_img, cfg.separation, 0), cluster_mean(cfg.d_img, cfg.separation, 1)];
    // balanced clusters in random order
    let mut clusters: Vec<usize> = (0..n).map(|i| i % 2).collect();
    clusters.shuffle(rng);
    Ok(clusters
        .into_iter()
        .map(|cluster| {
            let (source, target) = sentence(rng, cluster);
            let image = means[cluster].iter().map(|&m| (m + noise.sample(rng)) as f32).collect();
            SynthPair { source, target, image, cluster }
        })
        .collect())
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, Stream::Synth, 0);
    let train = split(&mut rng, cfg.train, cfg)?;
    let dev = split(&mut rng, cfg.dev, cfg)?;
    let test = split(&mut rng, cfg.test, cfg)?;
    Ok(SynthCorpus { train, dev, test })
}

/// Writes `{name}.src`, `{name}.tgt` and `{name}.img` (IMGF).
pub fn write_split(dir: &Path, name: &str, pairs: &[SynthPair]) -> Result<()> {
    let join = |f: fn(&SynthPair) -> &Vec<String>| -> String {
        pairs.iter().map(|p| f(p).join(" ") + "\n").collect()
    };
    let src = dir.join(format!("{name}.src"));
    std::fs::write(&src, join(|p| &p.source)).map_err(|e| Error::io(&src, e))?;
    let tgt = dir.join(format!("{name}.tgt"));
    std::fs::write(&tgt, join(|p| &p.target)).map_err(|e| Error::io(&tgt, e))?;
    if let Some(first) = pairs.first() {
        let store = FeatureStore::new(first.image.len(), pairs.iter().map(|p| p.image.clone()).collect())?;
        store.save(&dir.join(format!("{name}.img")))?;
    }
    Ok(())
}

/// Whether an output resolves the ambiguous word for `cluster`: it contains
/// the right translation and not the other one.
pub fn resolves<S: AsRef<str>>(output: &[S], cluster: usize) -> bool {
    let (right, wrong) = if cluster == 0 { (TARGET_A, TARGET_B) } else { (TARGET_B, TARGET_A) };
    output.iter().any(|w| w.as_ref() == right) && !output.iter().any(|w| w.as_ref() == wrong)
}

/// Fraction of outputs that resolve the ambiguous word.
pub fn grounding_accuracy<S: AsRef<str>>(outputs: &[Vec<S>], clusters: &[usize]) -> Result<f64> {
    if outputs.len() != clusters.len() {
        return Err(Error::Alignment(format!("{} outputs vs {} labels", outputs.len(), clusters.len())));
    }
    if outputs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let hits = outputs.iter().zip(clusters).filter(|(o, &c)| resolves(o, c)).count();
    Ok(hits as f64 / outputs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_sized() {
        let cfg = SynthConfig::default();
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.train.len(), a.dev.len(), a.test.len()), (500, 100, 100));
        assert!(a.train.iter().all(|p| p.image.len() == 16 && p.source.len() == p.target.len()));
    }

    #[test]
    fn ambiguous_word_follows_cluster_only() {
        let c = generate(&SynthConfig::default()).unwrap();
        for p in c.train.iter().chain(&c.dev) {
            assert_eq!(p.source.iter().filter(|w| *w == AMBIGUOUS_SOURCE).count(), 1);
            let expected = if p.cluster == 0 { TARGET_A } else { TARGET_B };
            let i = p.source.iter().position(|w| w == AMBIGUOUS_SOURCE).unwrap();
            assert_eq!(p.target[i], expected);
        }
        let ones = c.train.iter().filter(|p| p.cluster == 1).count();
        assert_eq!(ones, 250);
    }

    #[test]
    fn clusters_are_separated() {
        let c = generate(&SynthConfig::default()).unwrap();
        // the projection on the mean direction classifies every image
        let dir = cluster_mean(16, 1.0, 0);
        for p in &c.train {
            let proj: f64 = p.image.iter().zip(&dir).map(|(&x, d)| x as f64 * d).sum();
            assert_eq!(proj > 0.0, p.cluster == 0);
        }
    }

    #[test]
    fn accuracy_rule() {
        assert!(resolves(&["ein", "fledermaus"], 0));
        assert!(!resolves(&["ein", "fledermaus", "schlaeger"], 0));
        assert!(!resolves(&["ein"], 1));
        let acc = grounding_accuracy(&[vec!["schlaeger"], vec!["schlaeger"]], &[1, 0]).unwrap();
        assert_eq!(acc, 0.5);
    }
}
