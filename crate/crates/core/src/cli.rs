//! Command-line surface: argument types, run configuration, manifests and
//! the command implementations behind the `mmt` binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    build_triples, load_image_features, preprocess_file, preprocess_line, read_lines, write_tokenized, FeatureStore,
    Vocabulary,
};
use crate::decode::{
    default_workers, detokenize, parallel_map, sweep, sweep_csv, translate_corpus, translate_greedy, BeamConfig,
    SourceSentence,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport};
use crate::model::{load_checkpoint, save_checkpoint, Model, ModelConfig, Variant, INIT_RANGE};
use crate::synth::{generate, write_split, SynthConfig};
use crate::train::{train, Selection, TrainConfig};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const SRC_VOCAB_FILE: &str = "vocab.src";
pub const TGT_VOCAB_FILE: &str = "vocab.tgt";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";

/// Everything a training run needs, as one flat JSON object.
///
/// Relative paths are resolved against the directory of the file the
/// config was loaded from, so the echoed copy holds absolute paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train_src: PathBuf,
    pub train_tgt: PathBuf,
    pub train_img: Option<PathBuf>,
    pub dev_src: PathBuf,
    pub dev_tgt: PathBuf,
    pub dev_img: Option<PathBuf>,
    pub test_src: Option<PathBuf>,
    pub test_tgt: Option<PathBuf>,
    pub test_img: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: u64,

    pub variant: Variant,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub d_img: usize,
    pub init_range: f64,

    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout_rate: f64,
    pub max_epochs: usize,
    pub clip_norm: Option<f64>,
    pub patience: usize,
    pub selection: Selection,

    pub beam_size: usize,
    pub reward: f64,
    pub bound_ratio: f64,
    pub max_len: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        let b = BeamConfig::default();
        RunConfig {
            train_src: PathBuf::new(),
            train_tgt: PathBuf::new(),
            train_img: None,
            dev_src: PathBuf::new(),
            dev_tgt: PathBuf::new(),
            dev_img: None,
            test_src: None,
            test_tgt: None,
            test_img: None,
            output_dir: PathBuf::from("run"),
            seed: t.seed,
            variant: m.variant,
            embed_dim: m.embed_dim,
            hidden_dim: m.hidden_dim,
            d_img: m.d_img,
            init_range: INIT_RANGE,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            dropout_rate: t.dropout_rate,
            max_epochs: t.max_epochs,
            clip_norm: t.clip_norm,
            patience: t.patience,
            selection: t.selection,
            beam_size: b.beam_size,
            reward: b.reward,
            bound_ratio: b.bound_ratio,
            max_len: b.max_len,
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() && !p.as_os_str().is_empty() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    /// Loads a config file, or the `config` member of a manifest.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let value = match value.get("config") {
            Some(inner) if value.get("config_sha256").is_some() => inner.clone(),
            _ => value,
        };
        let mut cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let base = if base.as_os_str().is_empty() { PathBuf::from(".") } else { base };
        let base = base.canonicalize().map_err(|e| Error::io(&base, e))?;
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.train_src, &mut self.train_tgt, &mut self.dev_src, &mut self.dev_tgt, &mut self.output_dir] {
            resolve(base, p);
        }
        for p in [&mut self.train_img, &mut self.dev_img, &mut self.test_src, &mut self.test_tgt, &mut self.test_img]
            .into_iter()
            .flatten()
        {
            resolve(base, p);
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            dropout_rate: self.dropout_rate,
            max_epochs: self.max_epochs,
            clip_norm: self.clip_norm,
            seed: self.seed,
            patience: self.patience,
            selection: self.selection,
            bleu_max_len: self.max_len,
        }
    }

    pub fn model_config(&self, src_vocab_size: usize, tgt_vocab_size: usize) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            d_img: self.d_img,
            dropout_rate: self.dropout_rate,
            init_range: self.init_range,
            src_vocab_size,
            tgt_vocab_size,
            ..ModelConfig::default()
        }
    }

    pub fn beam_config(&self) -> BeamConfig {
        BeamConfig { beam_size: self.beam_size, reward: self.reward, bound_ratio: self.bound_ratio, max_len: self.max_len }
    }

    /// Checks settings and that every referenced input exists.
    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.beam_config().validate()?;
        let probe = self.model_config(crate::data::NUM_RESERVED + 1, crate::data::NUM_RESERVED + 1);
        probe.validate()?;
        let mut required = vec![("train_src", &self.train_src), ("train_tgt", &self.train_tgt)];
        required.push(("dev_src", &self.dev_src));
        required.push(("dev_tgt", &self.dev_tgt));
        for (name, p) in required {
            if p.as_os_str().is_empty() {
                return Err(Error::Config(format!("{name} is not set")));
            }
            if !p.is_file() {
                return Err(Error::Config(format!("{name} {} does not exist", p.display())));
            }
        }
        let optional =
            [("train_img", &self.train_img), ("dev_img", &self.dev_img), ("test_src", &self.test_src), ("test_tgt", &self.test_tgt), ("test_img", &self.test_img)];
        for (name, p) in optional {
            if let Some(p) = p {
                if !p.is_file() {
                    return Err(Error::Config(format!("{name} {} does not exist", p.display())));
                }
            }
        }
        if self.variant.uses_image() {
            if self.train_img.is_none() || self.dev_img.is_none() {
                return Err(Error::Config("variant osu1 needs train_img and dev_img".into()));
            }
            if self.test_src.is_some() && self.test_img.is_none() {
                return Err(Error::Config("variant osu1 needs test_img to translate test_src".into()));
            }
        }
        if self.test_tgt.is_some() && self.test_src.is_none() {
            return Err(Error::Config("test_tgt given without test_src".into()));
        }
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Self-description written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub config_sha256: String,
    /// Output file name → SHA-256 of its contents.
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new<C: Serialize>(command: &str, config: &C, seed: Option<u64>) -> Result<Self> {
        let canonical = serde_json::to_string(config)?;
        Ok(Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config: serde_json::from_str(&canonical)?,
            config_sha256: sha256_hex(canonical.as_bytes()),
            outputs: BTreeMap::new(),
        })
    }

    /// Records the hash of a file already written under `dir`.
    pub fn record(&mut self, dir: &Path, name: &str) -> Result<()> {
        let p = dir.join(name);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        self.outputs.insert(name.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, serde_json::to_string_pretty(self)? + "\n")
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Tokenizes a raw or already tokenized file; blank lines become empty sentences.
pub fn read_sentences(path: &Path) -> Result<Vec<Vec<String>>> {
    read_lines(path)?.iter().map(|l| if l.trim().is_empty() { Ok(Vec::new()) } else { preprocess_line(l) }).collect()
}

fn load_features(path: Option<&Path>, lines: usize, d_img: Option<usize>) -> Result<Option<FeatureStore>> {
    let Some(path) = path else { return Ok(None) };
    let store = load_image_features(path)?;
    if store.len() != lines {
        return Err(Error::Alignment(format!(
            "{} has {} feature rows for {} text lines",
            path.display(),
            store.len(),
            lines
        )));
    }
    if let Some(d) = d_img {
        if store.dim() != d {
            return Err(Error::Config(format!("{} has dimension {}, config says d_img = {d}", path.display(), store.dim())));
        }
    }
    Ok(Some(store))
}

fn check_aligned(a: &Path, na: usize, b: &Path, nb: usize) -> Result<()> {
    if na != nb {
        return Err(Error::Alignment(format!("{} has {na} lines but {} has {nb}", a.display(), b.display())));
    }
    Ok(())
}

#[derive(Debug, Parser)]
#[command(name = "mmt", version, about = "Image-initialized attentional NMT: train, decode and score")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic grounding corpus and a ready-to-train config.
    Synth(SynthArgs),
    /// Tokenize parallel text, build vocabularies and report line counts and OOV rates.
    Preprocess(PreprocessArgs),
    /// Train a model from a run config.
    Train(TrainArgs),
    /// Translate a source file with a trained model.
    Translate(TranslateArgs),
    /// Score hypotheses against references (BLEU, TER, length ratio).
    Evaluate(EvaluateArgs),
    /// Decode a dev set over a beam-size by reward grid and write a CSV.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 500)]
    pub train: usize,
    #[arg(long, default_value_t = 100)]
    pub dev: usize,
    #[arg(long, default_value_t = 100)]
    pub test: usize,
    #[arg(long, default_value_t = 16)]
    pub d_img: usize,
    /// Variant written into the generated run config.
    #[arg(long, default_value = "osu1")]
    pub variant: Variant,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub train_src: PathBuf,
    #[arg(long)]
    pub train_tgt: PathBuf,
    #[arg(long)]
    pub dev_src: Option<PathBuf>,
    #[arg(long)]
    pub dev_tgt: Option<PathBuf>,
    #[arg(long)]
    pub test_src: Option<PathBuf>,
    #[arg(long)]
    pub test_tgt: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run config, or a manifest from an earlier run.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub dropout_rate: Option<f64>,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub reward: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DecodeFlags {
    #[arg(long, default_value_t = 5)]
    pub beam: usize,
    #[arg(long, default_value_t = 0.1)]
    pub reward: f64,
    #[arg(long, default_value_t = 1.5)]
    pub bound_ratio: f64,
    #[arg(long, default_value_t = 100)]
    pub max_len: usize,
    /// Decoding threads (0 = all available). Output does not depend on it.
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
}

impl DecodeFlags {
    fn beam_config(&self) -> BeamConfig {
        BeamConfig { beam_size: self.beam, reward: self.reward, bound_ratio: self.bound_ratio, max_len: self.max_len }
    }

    fn workers(&self) -> usize {
        if self.workers == 0 {
            default_workers()
        } else {
            self.workers
        }
    }
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    /// Directory holding model.ckpt, vocab.src and vocab.tgt.
    #[arg(long)]
    pub model_dir: PathBuf,
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub img: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
    /// Arg-max decoding instead of beam search.
    #[arg(long)]
    pub greedy: bool,
    #[command(flatten)]
    pub decode: DecodeFlags,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub hyp: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Also write the report here.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub model_dir: PathBuf,
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub img: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,5,10")]
    pub beams: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.3")]
    pub rewards: Vec<f64>,
    #[arg(long, default_value_t = 1.5)]
    pub bound_ratio: f64,
    #[arg(long, default_value_t = 100)]
    pub max_len: usize,
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a).map(|_| ()),
        Command::Preprocess(a) => {
            let report = cmd_preprocess(&a)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::Train(a) => {
            let mut cfg = RunConfig::load(&a.config)?;
            apply_overrides(&mut cfg, &a);
            cmd_train(&cfg, |e| {
                eprintln!(
                    "epoch {:>3}  train {:.4}  dev {:.4}  ppl {:.2}",
                    e.epoch, e.train_loss, e.dev_loss, e.dev_perplexity
                )
            })
            .map(|_| ())
        }
        Command::Translate(a) => cmd_translate(&a),
        Command::Evaluate(a) => {
            let report = cmd_evaluate(&a)?;
            println!("{}", serde_json::to_string(&report)?);
            Ok(())
        }
        Command::Sweep(a) => {
            let csv = cmd_sweep(&a)?;
            print!("{csv}");
            Ok(())
        }
    }
}

fn apply_overrides(cfg: &mut RunConfig, a: &TrainArgs) {
    if let Some(v) = &a.output_dir {
        cfg.output_dir = std::env::current_dir().map(|d| d.join(v)).unwrap_or_else(|_| v.clone());
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.variant {
        cfg.variant = v;
    }
    if let Some(v) = a.max_epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.dropout_rate {
        cfg.dropout_rate = v;
    }
    if let Some(v) = a.beam {
        cfg.beam_size = v;
    }
    if let Some(v) = a.reward {
        cfg.reward = v;
    }
}

/// Settings the generated run config uses for the synthetic task.
pub fn synthetic_run_config(variant: Variant, d_img: usize, seed: u64) -> RunConfig {
    RunConfig {
        train_src: "train.src".into(),
        train_tgt: "train.tgt".into(),
        train_img: Some("train.img".into()),
        dev_src: "dev.src".into(),
        dev_tgt: "dev.tgt".into(),
        dev_img: Some("dev.img".into()),
        test_src: Some("test.src".into()),
        test_tgt: Some("test.tgt".into()),
        test_img: Some("test.img".into()),
        output_dir: format!("run-{variant}").into(),
        seed,
        variant,
        embed_dim: 32,
        hidden_dim: 64,
        d_img,
        init_range: 0.3,
        learning_rate: 1.0,
        batch_size: 16,
        dropout_rate: 0.1,
        max_epochs: 20,
        clip_norm: Some(5.0),
        patience: 5,
        selection: Selection::DevLoss,
        beam_size: 5,
        reward: 0.1,
        bound_ratio: 1.5,
        max_len: 30,
    }
}

/// Writes the three splits and `run.json`; returns the config path.
pub fn cmd_synth(a: &SynthArgs) -> Result<PathBuf> {
    let cfg = SynthConfig { train: a.train, dev: a.dev, test: a.test, d_img: a.d_img, seed: a.seed, ..SynthConfig::default() };
    let corpus = generate(&cfg)?;
    create_dir(&a.out_dir)?;
    write_split(&a.out_dir, "train", &corpus.train)?;
    write_split(&a.out_dir, "dev", &corpus.dev)?;
    if a.test > 0 {
        write_split(&a.out_dir, "test", &corpus.test)?;
    }
    let labels: String = corpus.dev.iter().map(|p| format!("{}\n", p.cluster)).collect();
    write_file(&a.out_dir.join("dev.cluster"), labels)?;
    let labels: String = corpus.test.iter().map(|p| format!("{}\n", p.cluster)).collect();
    write_file(&a.out_dir.join("test.cluster"), labels)?;

    let mut run = synthetic_run_config(a.variant, a.d_img, a.seed);
    if a.test == 0 {
        run.test_src = None;
        run.test_tgt = None;
        run.test_img = None;
    }
    let run_path = a.out_dir.join("run.json");
    write_file(&run_path, run.to_json()? + "\n")?;

    let mut manifest = Manifest::new("synth", &cfg, Some(a.seed))?;
    let mut names: Vec<String> = ["train", "dev", "test"]
        .iter()
        .filter(|s| **s != "test" || a.test > 0)
        .flat_map(|s| ["src", "tgt", "img"].map(|e| format!("{s}.{e}")))
        .collect();
    names.extend(["dev.cluster".into(), "test.cluster".into(), "run.json".into()]);
    for n in &names {
        manifest.record(&a.out_dir, n)?;
    }
    manifest.save(&a.out_dir.join(MANIFEST_FILE))?;
    Ok(run_path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessReport {
    /// Training pairs.
    pub line_count: usize,
    pub dev_line_count: Option<usize>,
    pub test_line_count: Option<usize>,
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    /// Share of dev tokens missing from the training vocabulary.
    pub dev_src_oov_rate: Option<f64>,
    pub dev_tgt_oov_rate: Option<f64>,
}

fn oov_rate(vocab: &Vocabulary, lines: &[Vec<String>]) -> f64 {
    let total: usize = lines.iter().map(Vec::len).sum();
    let oov = lines.iter().flatten().filter(|t| !vocab.contains(t)).count();
    if total == 0 {
        0.0
    } else {
        oov as f64 / total as f64
    }
}

type TokenizedPair = (PathBuf, PathBuf, Vec<Vec<String>>, Vec<Vec<String>>);

fn pair(name: &str, src: &Option<PathBuf>, tgt: &Option<PathBuf>) -> Result<Option<TokenizedPair>> {
    match (src, tgt) {
        (None, None) => Ok(None),
        (Some(s), Some(t)) => {
            let sl = preprocess_file(s)?;
            let tl = preprocess_file(t)?;
            check_aligned(s, sl.len(), t, tl.len())?;
            Ok(Some((s.clone(), t.clone(), sl, tl)))
        }
        _ => Err(Error::Config(format!("{name} needs both a source and a target file"))),
    }
}

pub fn cmd_preprocess(a: &PreprocessArgs) -> Result<PreprocessReport> {
    let train_src = preprocess_file(&a.train_src)?;
    let train_tgt = preprocess_file(&a.train_tgt)?;
    check_aligned(&a.train_src, train_src.len(), &a.train_tgt, train_tgt.len())?;
    let dev = pair("dev", &a.dev_src, &a.dev_tgt)?;
    let test = pair("test", &a.test_src, &a.test_tgt)?;

    let src_vocab = Vocabulary::build(&train_src)?;
    let tgt_vocab = Vocabulary::build(&train_tgt)?;
    create_dir(&a.out_dir)?;
    let mut outputs = vec!["train.src", "train.tgt", SRC_VOCAB_FILE, TGT_VOCAB_FILE];
    write_tokenized(&a.out_dir.join("train.src"), &train_src)?;
    write_tokenized(&a.out_dir.join("train.tgt"), &train_tgt)?;
    src_vocab.save(&a.out_dir.join(SRC_VOCAB_FILE))?;
    tgt_vocab.save(&a.out_dir.join(TGT_VOCAB_FILE))?;
    if let Some((_, _, s, t)) = &dev {
        write_tokenized(&a.out_dir.join("dev.src"), s)?;
        write_tokenized(&a.out_dir.join("dev.tgt"), t)?;
        outputs.extend(["dev.src", "dev.tgt"]);
    }
    if let Some((_, _, s, t)) = &test {
        write_tokenized(&a.out_dir.join("test.src"), s)?;
        write_tokenized(&a.out_dir.join("test.tgt"), t)?;
        outputs.extend(["test.src", "test.tgt"]);
    }
    let report = PreprocessReport {
        line_count: train_src.len(),
        dev_line_count: dev.as_ref().map(|d| d.2.len()),
        test_line_count: test.as_ref().map(|d| d.2.len()),
        src_vocab_size: src_vocab.len(),
        tgt_vocab_size: tgt_vocab.len(),
        dev_src_oov_rate: dev.as_ref().map(|d| oov_rate(&src_vocab, &d.2)),
        dev_tgt_oov_rate: dev.as_ref().map(|d| oov_rate(&tgt_vocab, &d.3)),
    };
    write_file(&a.out_dir.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    outputs.push("report.json");

    let echo = serde_json::json!({
        "train_src": a.train_src, "train_tgt": a.train_tgt,
        "dev_src": a.dev_src, "dev_tgt": a.dev_tgt,
        "test_src": a.test_src, "test_tgt": a.test_tgt,
    });
    let mut manifest = Manifest::new("preprocess", &echo, None)?;
    for n in outputs {
        manifest.record(&a.out_dir, n)?;
    }
    manifest.save(&a.out_dir.join(MANIFEST_FILE))?;
    Ok(report)
}

/// Files and scores produced by [`cmd_train`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub output_dir: PathBuf,
    pub selected_epoch: usize,
    pub test_report: Option<EvalReport>,
}

/// Trains, saves the selected model and vocabularies, and when the config
/// names a test set, translates it (and scores it if references are given).
pub fn cmd_train(cfg: &RunConfig, progress: impl FnMut(&crate::train::EpochRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_src = read_sentences_strict(&cfg.train_src)?;
    let train_tgt = read_sentences_strict(&cfg.train_tgt)?;
    check_aligned(&cfg.train_src, train_src.len(), &cfg.train_tgt, train_tgt.len())?;
    let dev_src = read_sentences_strict(&cfg.dev_src)?;
    let dev_tgt = read_sentences_strict(&cfg.dev_tgt)?;
    check_aligned(&cfg.dev_src, dev_src.len(), &cfg.dev_tgt, dev_tgt.len())?;

    let use_img = cfg.variant.uses_image();
    let d_img = Some(cfg.d_img);
    let train_img = if use_img { load_features(cfg.train_img.as_deref(), train_src.len(), d_img)? } else { None };
    let dev_img = if use_img { load_features(cfg.dev_img.as_deref(), dev_src.len(), d_img)? } else { None };

    let src_vocab = Vocabulary::build(&train_src)?;
    let tgt_vocab = Vocabulary::build(&train_tgt)?;
    let train_set = build_triples(&train_src, &train_tgt, &src_vocab, &tgt_vocab, train_img.as_ref())?;
    let dev_set = build_triples(&dev_src, &dev_tgt, &src_vocab, &tgt_vocab, dev_img.as_ref())?;

    let model_cfg = cfg.model_config(src_vocab.len(), tgt_vocab.len());
    let (model, report) = train(&model_cfg, &train_set, &dev_set, &cfg.train_config(), progress)?;

    let out = &cfg.output_dir;
    create_dir(out)?;
    save_checkpoint(&model, &out.join(CHECKPOINT_FILE))?;
    src_vocab.save(&out.join(SRC_VOCAB_FILE))?;
    tgt_vocab.save(&out.join(TGT_VOCAB_FILE))?;
    write_file(&out.join("train_report.jsonl"), report.to_jsonl()?)?;
    write_file(&out.join("timings.jsonl"), report.timings_jsonl())?;
    write_file(&out.join(CONFIG_FILE), cfg.to_json()? + "\n")?;
    let mut outputs = vec![CHECKPOINT_FILE, SRC_VOCAB_FILE, TGT_VOCAB_FILE, "train_report.jsonl", CONFIG_FILE];

    let mut test_report = None;
    if let Some(test_src) = &cfg.test_src {
        // decode with the saved (f32-rounded) weights so reloading reproduces the file
        let saved = load_checkpoint(&out.join(CHECKPOINT_FILE))?;
        let lines = read_sentences(test_src)?;
        let img = if use_img { load_features(cfg.test_img.as_deref(), lines.len(), d_img)? } else { None };
        let sources = sources_from(test_src, &src_vocab, &lines, img.as_ref())?;
        let hyps = translate_corpus(&saved, &sources, &cfg.beam_config(), default_workers())?;
        let words = hyps.iter().map(|h| detokenize(&tgt_vocab, &h.tokens)).collect::<Result<Vec<_>>>()?;
        write_file(&out.join("test.translations.txt"), join_lines(&words))?;
        outputs.push("test.translations.txt");
        if let Some(test_tgt) = &cfg.test_tgt {
            let refs = read_sentences(test_tgt)?;
            check_aligned(test_src, lines.len(), test_tgt, refs.len())?;
            let rep = evaluate(&words, &refs)?;
            write_file(&out.join("test.eval.json"), serde_json::to_string_pretty(&rep)? + "\n")?;
            outputs.push("test.eval.json");
            test_report = Some(rep);
        }
    }

    let mut manifest = Manifest::new("train", cfg, Some(cfg.seed))?;
    for n in outputs {
        manifest.record(out, n)?;
    }
    manifest.save(&out.join(MANIFEST_FILE))?;
    Ok(TrainOutcome { output_dir: out.clone(), selected_epoch: report.selected_epoch, test_report })
}

fn read_sentences_strict(path: &Path) -> Result<Vec<Vec<String>>> {
    preprocess_file(path)
}

fn join_lines(lines: &[Vec<String>]) -> String {
    lines.iter().map(|l| l.join(" ") + "\n").collect()
}

fn sources_from(
    path: &Path,
    vocab: &Vocabulary,
    lines: &[Vec<String>],
    img: Option<&FeatureStore>,
) -> Result<Vec<SourceSentence>> {
    lines
        .iter()
        .enumerate()
        .map(|(i, l)| {
            if l.is_empty() {
                return Err(Error::Format { path: path.into(), message: format!("line {} is empty", i + 1) });
            }
            Ok(SourceSentence { ids: vocab.encode(l), image: img.map(|f| f.feature(i)) })
        })
        .collect()
}

/// A trained model with its vocabularies.
pub struct LoadedModel {
    pub model: Model,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
}

pub fn load_model_dir(dir: &Path) -> Result<LoadedModel> {
    let model = load_checkpoint(&dir.join(CHECKPOINT_FILE))?;
    let src_vocab = Vocabulary::load(&dir.join(SRC_VOCAB_FILE))?;
    let tgt_vocab = Vocabulary::load(&dir.join(TGT_VOCAB_FILE))?;
    if src_vocab.len() != model.config.src_vocab_size || tgt_vocab.len() != model.config.tgt_vocab_size {
        return Err(Error::VocabMismatch(format!(
            "vocabularies have {}/{} entries, checkpoint expects {}/{}",
            src_vocab.len(),
            tgt_vocab.len(),
            model.config.src_vocab_size,
            model.config.tgt_vocab_size
        )));
    }
    Ok(LoadedModel { model, src_vocab, tgt_vocab })
}

fn load_sources(m: &LoadedModel, src: &Path, img: Option<&Path>) -> Result<Vec<SourceSentence>> {
    let lines = read_sentences(src)?;
    let img = if m.model.config.variant.uses_image() {
        let p = img.ok_or_else(|| Error::Config("variant osu1 needs --img".into()))?;
        load_features(Some(p), lines.len(), Some(m.model.config.d_img))?
    } else {
        None
    };
    sources_from(src, &m.src_vocab, &lines, img.as_ref())
}

fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn output_parent(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

pub fn cmd_translate(a: &TranslateArgs) -> Result<()> {
    let m = load_model_dir(&a.model_dir)?;
    let sources = load_sources(&m, &a.src, a.img.as_deref())?;
    let beam = a.decode.beam_config();
    beam.validate()?;
    let ids: Vec<Vec<usize>> = if a.greedy {
        parallel_map(&sources, a.decode.workers(), |s| translate_greedy(&m.model, s, beam.max_len))?
    } else {
        translate_corpus(&m.model, &sources, &beam, a.decode.workers())?.into_iter().map(|h| h.tokens).collect()
    };
    let words = ids.iter().map(|t| detokenize(&m.tgt_vocab, t)).collect::<Result<Vec<_>>>()?;
    write_file(&a.output, join_lines(&words))?;

    let ckpt = fs::read(a.model_dir.join(CHECKPOINT_FILE)).map_err(|e| Error::io(a.model_dir.join(CHECKPOINT_FILE), e))?;
    let echo = serde_json::json!({
        "model_dir": a.model_dir, "checkpoint_sha256": sha256_hex(&ckpt),
        "src": a.src, "img": a.img, "greedy": a.greedy, "beam": beam,
    });
    let mut manifest = Manifest::new("translate", &echo, None)?;
    manifest.record(&output_parent(&a.output), &file_name(&a.output))?;
    manifest.save(&manifest_path(&a.output))
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<EvalReport> {
    let hyp = read_sentences(&a.hyp)?;
    let reference = read_sentences(&a.reference)?;
    check_aligned(&a.hyp, hyp.len(), &a.reference, reference.len())?;
    let report = evaluate(&hyp, &reference)?;
    if let Some(out) = &a.output {
        write_file(out, serde_json::to_string_pretty(&report)? + "\n")?;
        let echo = serde_json::json!({ "hyp": a.hyp, "ref": a.reference });
        let mut manifest = Manifest::new("evaluate", &echo, None)?;
        manifest.record(&output_parent(out), &file_name(out))?;
        manifest.save(&manifest_path(out))?;
    }
    Ok(report)
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<String> {
    let m = load_model_dir(&a.model_dir)?;
    let sources = load_sources(&m, &a.src, a.img.as_deref())?;
    let refs = read_sentences(&a.reference)?;
    check_aligned(&a.src, sources.len(), &a.reference, refs.len())?;
    let base = BeamConfig { beam_size: 1, reward: 0.0, bound_ratio: a.bound_ratio, max_len: a.max_len };
    let workers = if a.workers == 0 { default_workers() } else { a.workers };
    let records = sweep(&m.model, &sources, &refs, &m.tgt_vocab, &a.beams, &a.rewards, &base, workers)?;
    let csv = sweep_csv(&records);
    write_file(&a.output, &csv)?;
    let echo = serde_json::json!({
        "model_dir": a.model_dir, "src": a.src, "ref": a.reference, "img": a.img,
        "beams": a.beams, "rewards": a.rewards, "bound_ratio": a.bound_ratio, "max_len": a.max_len,
    });
    let mut manifest = Manifest::new("sweep", &echo, None)?;
    manifest.record(&output_parent(&a.output), &file_name(&a.output))?;
    manifest.save(&manifest_path(&a.output))?;
    Ok(csv)
}

/// Reads a run directory's echoed config back.
pub fn load_run_config(dir: &Path) -> Result<RunConfig> {
    let cfg: RunConfig = read_json(&dir.join(CONFIG_FILE))?;
    Ok(cfg)
}
