//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

use std::collections::HashMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use mmt::cli::{
    cmd_synth, cmd_sweep, cmd_train, cmd_translate, read_sentences, DecodeFlags, RunConfig, SweepArgs, SynthArgs,
    TranslateArgs, MANIFEST_FILE,
};
use mmt::data::{Batch, CaptionTriple};
use mmt::decode::{
    beam_search, greedy_decode, translate, translate_greedy, BeamConfig, SourceSentence, StepModel, TabularModel,
};
use mmt::metrics::{bleu_corpus, ter_corpus, ter_edits};
use mmt::model::{Model, ModelConfig, Variant};
use mmt::numcore::{finite_difference_report, stream_rng, Stream};
use mmt::synth::grounding_accuracy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 1

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig {
        variant: Variant::Osu1,
        embed_dim: 8,
        hidden_dim: 8,
        d_img: 6,
        dropout_rate: 0.3,
        src_vocab_size: 12,
        tgt_vocab_size: 12,
        ..ModelConfig::default()
    };
    let mut worst = 0.0f64;
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = || Some((0..6).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>());
        let corpus = vec![
            CaptionTriple::new(vec![4, 5, 6, 7, 8], vec![9, 10, 11, 4], img()).unwrap(),
            CaptionTriple::new(vec![11, 9, 5], vec![6, 7], img()).unwrap(),
        ];
        let batch = Batch::from_triples(&corpus, &[0, 1]).unwrap();
        let model = Model::new(cfg.clone(), seed).unwrap();
        let mut params = model.params.clone();
        let report = finite_difference_report(&mut params, 1e-3, 20, seed, |ps, tape| {
            let m = Model::from_parameters(cfg.clone(), ps.clone())?;
            let mut drop = stream_rng(seed, Stream::Dropout, 0);
            m.loss(tape, &batch, &mut drop)
        })
        .map_err(|e| e.to_string())?;
        worst = worst.max(report.max_relative_error);
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst < 1e-4 && secs < 30.0, format!("max relative error {worst:.2e} (< 1e-4) over 3 models, {secs:.1} s (< 30 s)"))
}

// ---------------------------------------------------------------- 2, 3, 5

/// Every EOS-terminated sequence of a tabular model with its log-probability.
fn all_sequences(m: &TabularModel) -> Vec<(Vec<usize>, f64)> {
    let eos = m.vocab_size() - 1;
    let mut out = Vec::new();
    let mut stack = vec![(Vec::new(), 0.0)];
    while let Some((prefix, lp)) = stack.pop() {
        for (t, &l) in m.row(&prefix).unwrap().iter().enumerate() {
            if l == f64::NEG_INFINITY {
                continue;
            }
            let mut next: Vec<usize> = prefix.clone();
            if t == eos {
                out.push((next, lp + l));
            } else {
                next.push(t);
                stack.push((next, lp + l));
            }
        }
    }
    out
}

fn brute_force_argmax(m: &TabularModel) -> Vec<usize> {
    let mut seqs = all_sequences(m);
    seqs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.len().cmp(&b.0.len())).then(a.0.cmp(&b.0)));
    seqs.swap_remove(0).0
}

fn exhaustive_cfg(reward: f64) -> BeamConfig {
    // 4^4 prefixes bound every frontier of a |V| = 4, length-4 model
    BeamConfig { beam_size: 256, reward, bound_ratio: 1.0, max_len: 5 }
}

fn oracle_decoding() -> Outcome {
    let start = Instant::now();
    let mut hits = 0;
    for seed in 0..100 {
        let mut m = TabularModel::random(4, 4, 3.0, 1000 + seed).unwrap();
        let got = beam_search(&mut m, 4, &exhaustive_cfg(0.0)).unwrap();
        if got.tokens == brute_force_argmax(&m) {
            hits += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(hits == 100 && secs < 60.0, format!("{hits}/100 equal to brute-force argmax, {secs:.2} s (< 60 s)"))
}

fn greedy_equivalence() -> Outcome {
    let one = |max_len| BeamConfig { beam_size: 1, reward: 0.0, bound_ratio: 1.5, max_len };
    let mut tab_hits = 0;
    for seed in 0..100u64 {
        let vocab = 3 + (seed % 5) as usize;
        let mut m = TabularModel::random(vocab, 5, 2.0, 2000 + seed).unwrap();
        let g = greedy_decode(&mut m, 6).unwrap();
        if beam_search(&mut m, 3, &one(6)).unwrap().tokens == g {
            tab_hits += 1;
        }
    }
    let mut nmt_hits = 0;
    for seed in 0..100u64 {
        let cfg = ModelConfig {
            variant: if seed % 2 == 0 { Variant::Osu1 } else { Variant::Osu2 },
            embed_dim: 6,
            hidden_dim: 6,
            d_img: 4,
            dropout_rate: 0.0,
            init_range: 0.5,
            src_vocab_size: 10,
            tgt_vocab_size: 10,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg, 3000 + seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<usize> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(4..10)).collect();
        let image = (seed % 2 == 0).then(|| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let src = SourceSentence { ids, image };
        let g = translate_greedy(&model, &src, 8).unwrap();
        if translate(&model, &src, &one(8)).unwrap().tokens == g {
            nmt_hits += 1;
        }
    }
    check(
        tab_hits == 100 && nmt_hits == 100,
        format!("token-identical on {tab_hits}/100 tabular and {nmt_hits}/100 network models"),
    )
}

fn reward_length() -> Outcome {
    let rewards = [0.0, 0.05, 0.1, 0.2, 0.4];
    let mut totals = vec![0usize; rewards.len()];
    let mut per_model_ok = true;
    for seed in 0..100 {
        let mut m = TabularModel::random(4, 4, 3.0, 4000 + seed).unwrap();
        let lens: Vec<usize> =
            rewards.iter().map(|&r| beam_search(&mut m, 4, &exhaustive_cfg(r)).unwrap().tokens.len()).collect();
        per_model_ok &= lens.windows(2).all(|w| w[0] <= w[1]);
        for (t, l) in totals.iter_mut().zip(&lens) {
            *t += l;
        }
    }
    let means: Vec<f64> = totals.iter().map(|&t| t as f64 / 100.0).collect();
    let monotone = means.windows(2).all(|w| w[0] <= w[1]);
    check(
        monotone && per_model_ok,
        format!("mean lengths {means:?} over r = {rewards:?}; per-model monotone: {per_model_ok}"),
    )
}

// ---------------------------------------------------------------- 6

/// Corpus BLEU by direct n-gram enumeration and pairwise comparison.
fn reference_bleu(hyps: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut hl, mut rl) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        hl += h.len();
        rl += r.len();
        for n in 1..=4 {
            let hg: Vec<&[String]> = if h.len() >= n { h.windows(n).collect() } else { vec![] };
            let rg: Vec<&[String]> = if r.len() >= n { r.windows(n).collect() } else { vec![] };
            total[n - 1] += hg.len();
            let mut used = vec![false; rg.len()];
            for g in &hg {
                if let Some(j) = (0..rg.len()).find(|&j| !used[j] && rg[j] == *g) {
                    used[j] = true;
                    matched[n - 1] += 1;
                }
            }
        }
    }
    if matched.contains(&0) {
        return 0.0;
    }
    let product: f64 = (0..4).map(|i| matched[i] as f64 / total[i] as f64).product();
    let bp = if hl < rl { (1.0 - rl as f64 / hl as f64).exp() } else { 1.0 };
    100.0 * bp * product.powf(0.25)
}

fn random_sentence(rng: &mut ChaCha8Rng, min: usize, max: usize, alphabet: usize) -> Vec<String> {
    (0..rng.gen_range(min..=max)).map(|_| ((b'a' + rng.gen_range(0..alphabet) as u8) as char).to_string()).collect()
}

fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    fn go(a: &[usize], b: &[usize], memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if a.is_empty() || b.is_empty() {
            return a.len() + b.len();
        }
        if let Some(&v) = memo.get(&(a.len(), b.len())) {
            return v;
        }
        let v = (go(&a[1..], &b[1..], memo) + usize::from(a[0] != b[0]))
            .min(go(&a[1..], b, memo) + 1)
            .min(go(a, &b[1..], memo) + 1);
        memo.insert((a.len(), b.len()), v);
        v
    }
    go(a, b, &mut HashMap::new())
}

/// Fewest shifts plus edits over every sequence of unrestricted block moves.
fn exhaustive_ter_edits(hyp: &[usize], reference: &[usize]) -> usize {
    let mut seen: HashMap<Vec<usize>, usize> = HashMap::from([(hyp.to_vec(), 0)]);
    let mut frontier = vec![hyp.to_vec()];
    let mut best = usize::MAX;
    let mut depth = 0;
    while !frontier.is_empty() && depth < best {
        let mut next = Vec::new();
        for s in &frontier {
            best = best.min(depth + levenshtein(s, reference));
            let n = s.len();
            for start in 0..n {
                for len in 1..=n - start {
                    let rest: Vec<usize> = s[..start].iter().chain(&s[start + len..]).copied().collect();
                    for dest in 0..=rest.len() {
                        let moved: Vec<usize> =
                            rest[..dest].iter().chain(&s[start..start + len]).chain(&rest[dest..]).copied().collect();
                        if !seen.contains_key(&moved) {
                            seen.insert(moved.clone(), depth + 1);
                            next.push(moved);
                        }
                    }
                }
            }
        }
        frontier = next;
        depth += 1;
    }
    best
}

/// Restricted growth strings: every equality pattern of `len` words.
fn patterns(len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|p: Vec<usize>| {
                let next = p.iter().max().map_or(0, |m| m + 1);
                (0..=next).map(move |w| {
                    let mut q = p.clone();
                    q.push(w);
                    q
                })
            })
            .collect();
    }
    out
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    let mut identity_ok = true;
    for _ in 0..50 {
        let n = rng.gen_range(1..=5);
        let refs: Vec<Vec<String>> = (0..n).map(|_| random_sentence(&mut rng, 4, 10, 4)).collect();
        let hyps: Vec<Vec<String>> = refs
            .iter()
            .map(|r| {
                let mut h = r.clone();
                for _ in 0..rng.gen_range(0..3) {
                    match rng.gen_range(0..3) {
                        0 if !h.is_empty() => {
                            let i = rng.gen_range(0..h.len());
                            h.remove(i);
                        }
                        1 => h.insert(rng.gen_range(0..=h.len()), "z".to_string()),
                        _ if !h.is_empty() => {
                            let i = rng.gen_range(0..h.len());
                            h[i] = "y".to_string();
                        }
                        _ => {}
                    }
                }
                h
            })
            .collect();
        let got = bleu_corpus(&hyps, &refs).unwrap();
        worst = worst.max((got - reference_bleu(&hyps, &refs)).abs());
        identity_ok &= bleu_corpus(&refs, &refs).unwrap() == 100.0 && ter_corpus(&refs, &refs).unwrap() == 0.0;
    }

    let mut undercut = 0;
    let mut small_cases = 0;
    for h in 0..=4 {
        for r in 1..=4 {
            for p in patterns(h + r) {
                let (hyp, reference) = p.split_at(h);
                small_cases += 1;
                if ter_edits(hyp, reference) < exhaustive_ter_edits(hyp, reference) {
                    undercut += 1;
                }
            }
        }
    }

    let mut equal = 0;
    for _ in 0..1000 {
        let pairs: Vec<(Vec<usize>, Vec<usize>)> = (0..rng.gen_range(1..=3))
            .map(|_| {
                let h = (0..rng.gen_range(0..=4)).map(|_| rng.gen_range(0..4)).collect();
                let r = (0..rng.gen_range(1..=4)).map(|_| rng.gen_range(0..4)).collect();
                (h, r)
            })
            .collect();
        let hyps: Vec<Vec<usize>> = pairs.iter().map(|p| p.0.clone()).collect();
        let refs: Vec<Vec<usize>> = pairs.iter().map(|p| p.1.clone()).collect();
        let ref_words: usize = refs.iter().map(Vec::len).sum();
        let exact = 100.0 * pairs.iter().map(|(h, r)| exhaustive_ter_edits(h, r)).sum::<usize>() as f64 / ref_words as f64;
        let greedy = ter_corpus(&hyps, &refs).unwrap();
        if greedy < exact - 1e-9 {
            undercut += 1;
        }
        if (greedy - exact).abs() < 1e-9 {
            equal += 1;
        }
    }
    check(
        worst < 1e-9 && identity_ok && undercut == 0 && equal >= 950,
        format!(
            "BLEU max deviation {worst:.1e} on 50 corpora; BLEU(x,x)=100 and TER(x,x)=0: {identity_ok}; \
             greedy TER below exhaustive minimum in {undercut} of {small_cases} small cases + 1000 random; \
             equal on {equal}/1000 random corpora (>= 950)"
        ),
    )
}

// ---------------------------------------------------------------- 4, 7, 8

struct Synthetic {
    data: PathBuf,
    osu1: PathBuf,
    osu1_secs: f64,
    osu2: PathBuf,
    osu2_secs: f64,
}

fn synthetic_runs(root: &Path) -> Result<Synthetic, String> {
    let data = root.join("data");
    let args = SynthArgs { out_dir: data.clone(), seed: 1, train: 500, dev: 100, test: 100, d_img: 16, variant: Variant::Osu1 };
    let run = cmd_synth(&args).map_err(|e| e.to_string())?;
    let base = RunConfig::load(&run).map_err(|e| e.to_string())?;
    let timed = |variant: Variant| -> Result<(PathBuf, f64), String> {
        let cfg = RunConfig { variant, output_dir: root.join(format!("run-{variant}")), ..base.clone() };
        let start = Instant::now();
        let out = cmd_train(&cfg, |_| {}).map_err(|e| e.to_string())?;
        Ok((out.output_dir, start.elapsed().as_secs_f64()))
    };
    let (osu1, osu1_secs) = timed(Variant::Osu1)?;
    let (osu2, osu2_secs) = timed(Variant::Osu2)?;
    Ok(Synthetic { data, osu1, osu1_secs, osu2, osu2_secs })
}

fn dev_accuracy(s: &Synthetic, model_dir: &Path) -> Result<f64, String> {
    let cfg = RunConfig::load(&model_dir.join("config.json")).map_err(|e| e.to_string())?;
    let output = model_dir.join("dev.translations.txt");
    cmd_translate(&TranslateArgs {
        model_dir: model_dir.to_path_buf(),
        src: s.data.join("dev.src"),
        img: Some(s.data.join("dev.img")),
        output: output.clone(),
        greedy: false,
        decode: DecodeFlags {
            beam: cfg.beam_size,
            reward: cfg.reward,
            bound_ratio: cfg.bound_ratio,
            max_len: cfg.max_len,
            workers: 0,
        },
    })
    .map_err(|e| e.to_string())?;
    let outputs = read_sentences(&output).map_err(|e| e.to_string())?;
    let clusters: Vec<usize> = fs::read_to_string(s.data.join("dev.cluster"))
        .map_err(|e| e.to_string())?
        .lines()
        .map(|l| l.trim().parse().unwrap())
        .collect();
    grounding_accuracy(&outputs, &clusters).map_err(|e| e.to_string())
}

fn synthetic_grounding(s: &Synthetic) -> Outcome {
    let a1 = dev_accuracy(s, &s.osu1)?;
    let a2 = dev_accuracy(s, &s.osu2)?;
    check(
        a1 >= 0.9 && a2 <= 0.65 && s.osu1_secs < 600.0 && s.osu2_secs < 600.0,
        format!(
            "dev accuracy image-conditioned {:.0}% (>= 90%) in {:.0} s, text-only {:.0}% (<= 65%) in {:.0} s (each < 600 s)",
            100.0 * a1,
            s.osu1_secs,
            100.0 * a2,
            s.osu2_secs
        ),
    )
}

const COMPARED: [&str; 4] = ["model.ckpt", "test.translations.txt", "train_report.jsonl", "test.eval.json"];

fn determinism(s: &Synthetic, root: &Path) -> Outcome {
    let manifest = s.osu1.join(MANIFEST_FILE);
    let mut dirs = Vec::new();
    for name in ["rerun-a", "rerun-b"] {
        let mut cfg = RunConfig::load(&manifest).map_err(|e| e.to_string())?;
        cfg.output_dir = root.join(name);
        dirs.push(cmd_train(&cfg, |_| {}).map_err(|e| e.to_string())?.output_dir);
    }
    let mut differing = Vec::new();
    for f in COMPARED {
        let a = fs::read(dirs[0].join(f)).map_err(|e| e.to_string())?;
        let b = fs::read(dirs[1].join(f)).map_err(|e| e.to_string())?;
        let orig = fs::read(s.osu1.join(f)).map_err(|e| e.to_string())?;
        if a != b || a != orig {
            differing.push(f);
        }
    }
    check(
        differing.is_empty(),
        format!("two reruns from one manifest (and the original run): differing files {differing:?} among {COMPARED:?}"),
    )
}

fn operating_point(s: &Synthetic, root: &Path) -> Outcome {
    let csv = cmd_sweep(&SweepArgs {
        model_dir: s.osu1.clone(),
        src: s.data.join("dev.src"),
        reference: s.data.join("dev.tgt"),
        img: Some(s.data.join("dev.img")),
        output: root.join("sweep.csv"),
        beams: vec![1, 2, 5, 10],
        rewards: vec![0.0, 0.1, 0.3],
        bound_ratio: 1.5,
        max_len: 30,
        workers: 0,
    })
    .map_err(|e| e.to_string())?;
    let cell = |beam: &str, reward: &str| {
        csv.lines().skip(1).find_map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0] == beam && f[1] == reward).then(|| f[2].parse::<f64>().unwrap())
        })
    };
    match (cell("5", "0.1"), cell("1", "0")) {
        (Some(op), Some(greedy)) => check(
            op >= greedy - 0.5,
            format!("cell (5, 0.1) present with BLEU {op:.2}; (1, 0) BLEU {greedy:.2}; need >= {:.2}", greedy - 0.5),
        ),
        (op, greedy) => Err(format!("missing cells: (5, 0.1) {op:?}, (1, 0) {greedy:?}")),
    }
}

// ----------------------------------------------------------------

fn run(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
    });
    let (tag, detail, ok) = match result {
        Ok(d) => ("PASS", d, true),
        Err(d) => ("FAIL", d, false),
    };
    println!("criterion {n} {tag} {name}: {detail}");
    ok
}

fn main() {
    // `cargo test -- --list` and filters are not meaningful here
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let root = tempfile::tempdir().expect("temp dir");
    let mut ok = true;
    ok &= run(1, "gradient integrity", gradient_integrity);
    ok &= run(2, "oracle decoding", oracle_decoding);
    ok &= run(3, "greedy equivalence", greedy_equivalence);
    let synthetic = synthetic_runs(root.path());
    let failed = |e: &String| -> Outcome { Err(format!("synthetic training failed: {e}")) };
    ok &= run(4, "synthetic grounding", || match &synthetic {
        Ok(s) => synthetic_grounding(s),
        Err(e) => failed(e),
    });
    ok &= run(5, "reward and length", reward_length);
    ok &= run(6, "metric oracles", metric_oracles);
    ok &= run(7, "determinism", || match &synthetic {
        Ok(s) => determinism(s, root.path()),
        Err(e) => failed(e),
    });
    ok &= run(8, "operating point", || match &synthetic {
        Ok(s) => operating_point(s, root.path()),
        Err(e) => failed(e),
    });
    if !ok {
        std::process::exit(1);
    }
}
