use std::collections::HashMap;

use super::*;
use crate::model::{Model, ModelConfig, Variant};
use crate::numcore::{log_softmax, stream_rng, Stream, Tape};

/// Every EOS-terminated sequence with its total log-probability.
fn enumerate(m: &TabularModel) -> Vec<(Vec<usize>, f64)> {
    let eos = m.vocab_size() - 1;
    let mut out = Vec::new();
    let mut stack = vec![(Vec::new(), 0.0)];
    while let Some((prefix, lp)) = stack.pop() {
        let row = m.row(&prefix).unwrap();
        for (t, &l) in row.iter().enumerate() {
            if !l.is_finite() {
                continue;
            }
            if t == eos {
                out.push((prefix.clone(), lp + l));
            } else {
                let mut p = prefix.clone();
                p.push(t);
                stack.push((p, lp + l));
            }
        }
    }
    out
}

fn brute_force(m: &TabularModel, reward: f64, bound: usize) -> (Vec<usize>, f64) {
    enumerate(m)
        .into_iter()
        .map(|(s, lp)| {
            let sc = lp + reward * s.len().min(bound) as f64;
            (s, sc)
        })
        .min_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.len().cmp(&b.0.len())).then(a.0.cmp(&b.0)))
        .unwrap()
}

#[test]
fn enumeration_is_a_distribution() {
    let m = TabularModel::random(4, 4, 2.0, 3).unwrap();
    let seqs = enumerate(&m);
    // 1 + 3 + 9 + 27 + 81 sequences
    assert_eq!(seqs.len(), 121);
    let total: f64 = seqs.iter().map(|(_, lp)| lp.exp()).sum();
    assert!((total - 1.0).abs() < 1e-12);
}

#[test]
fn wide_beam_matches_brute_force() {
    for seed in 0..20 {
        let mut m = TabularModel::random(4, 4, 3.0, seed).unwrap();
        for &(reward, src) in &[(0.0, 2usize), (0.3, 2), (1.0, 1), (2.0, 3)] {
            let cfg = BeamConfig { beam_size: 256, reward, bound_ratio: 1.0, max_len: 5 };
            let bound = cfg.length_bound(src);
            let got = beam_search(&mut m, src, &cfg).unwrap();
            let (seq, score) = brute_force(&m, reward, bound);
            assert_eq!(got.tokens, seq, "seed {seed} reward {reward}");
            assert!((got.score - score).abs() < 1e-12);
            assert!(got.finished);
        }
    }
}

#[test]
fn beam_of_one_is_greedy() {
    for seed in 0..30 {
        let mut m = TabularModel::random(5, 4, 2.0, seed).unwrap();
        let cfg = BeamConfig { beam_size: 1, reward: 0.0, bound_ratio: 1.0, max_len: 5 };
        let g = greedy_decode(&mut m, 5).unwrap();
        let b = beam_search(&mut m, 3, &cfg).unwrap();
        assert_eq!(g, b.tokens);
    }
}

#[test]
fn greedy_ties_go_to_lowest_id() {
    let mut table = HashMap::new();
    let half = 0.5f64.ln();
    table.insert(vec![], vec![half, half, f64::NEG_INFINITY]);
    table.insert(vec![0], vec![f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0]);
    table.insert(vec![1], vec![f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0]);
    let mut m = TabularModel::from_table(3, 1, table).unwrap();
    assert_eq!(greedy_decode(&mut m, 5).unwrap(), vec![0]);
    let cfg = BeamConfig { beam_size: 1, reward: 0.0, bound_ratio: 1.0, max_len: 5 };
    assert_eq!(beam_search(&mut m, 1, &cfg).unwrap().tokens, vec![0]);
}

#[test]
fn eos_favoring_model_gives_empty_output() {
    let mut table = HashMap::new();
    table.insert(vec![], log_softmax(&[-5.0, -5.0, 5.0]));
    let mut m = TabularModel::from_table(3, 3, table).unwrap();
    assert!(greedy_decode(&mut m, 10).unwrap().is_empty());
    let cfg = BeamConfig { beam_size: 1, reward: 0.0, bound_ratio: 1.0, max_len: 10 };
    let h = beam_search(&mut m, 2, &cfg).unwrap();
    assert!(h.tokens.is_empty() && h.finished);
}

#[test]
fn cap_truncates_unfinished() {
    let m0 = TabularModel::random(3, 6, 1.0, 1).unwrap();
    let mut table = HashMap::new();
    // never emit EOS before the forced end
    let mut frontier = vec![vec![]];
    while let Some(p) = frontier.pop() {
        let mut row = m0.row(&p).unwrap().to_vec();
        if p.len() < 6 {
            row[2] = f64::NEG_INFINITY;
            for t in 0..2 {
                let mut q = p.clone();
                q.push(t);
                frontier.push(q);
            }
        }
        table.insert(p, row);
    }
    let mut m = TabularModel::from_table(3, 6, table).unwrap();
    let cfg = BeamConfig { beam_size: 3, reward: 0.0, bound_ratio: 1.0, max_len: 4 };
    let h = beam_search(&mut m, 2, &cfg).unwrap();
    assert_eq!(h.tokens.len(), 4);
    assert!(!h.finished);
    assert_eq!(greedy_decode(&mut m, 4).unwrap().len(), 4);
}

#[test]
fn reward_only_counts_up_to_bound() {
    assert_eq!(rewarded_score(-1.0, 10, 0.5, 3), 0.5);
    assert_eq!(rewarded_score(-1.0, 2, 0.5, 3), 0.0);
    let cfg = BeamConfig { beam_size: 1, reward: 0.0, bound_ratio: 1.5, max_len: 4 };
    assert_eq!(cfg.length_bound(2), 3);
    assert_eq!(cfg.length_bound(10), 4);
}

#[test]
fn invalid_configs_rejected() {
    let mut m = TabularModel::random(4, 3, 1.0, 0).unwrap();
    for cfg in [
        BeamConfig { beam_size: 0, ..BeamConfig::default() },
        BeamConfig { reward: -0.1, ..BeamConfig::default() },
        BeamConfig { reward: f64::NAN, ..BeamConfig::default() },
        BeamConfig { max_len: 0, ..BeamConfig::default() },
    ] {
        assert!(matches!(beam_search(&mut m, 3, &cfg), Err(crate::Error::Config(_))));
    }
}

fn tiny(variant: Variant) -> Model {
    let cfg = ModelConfig {
        variant,
        embed_dim: 6,
        hidden_dim: 5,
        d_img: 4,
        dropout_rate: 0.3,
        src_vocab_size: 9,
        tgt_vocab_size: 8,
        ..ModelConfig::default()
    };
    Model::new(cfg, 11).unwrap()
}

#[test]
fn batched_steps_match_single_steps() {
    let model = tiny(Variant::Osu1);
    let img = vec![0.3, -0.2, 0.5, 0.1];
    let mut sc = NmtScorer::new(&model, &[4, 5, 6], Some(&img)).unwrap();
    let s0 = sc.initial_state().unwrap();
    let (_, s1) = sc.step(&[(&s0, crate::data::BOS)]).unwrap().pop().unwrap();
    let both = sc.step(&[(&s0, 5), (&s1, 6)]).unwrap();
    let a = sc.step(&[(&s0, 5)]).unwrap();
    let b = sc.step(&[(&s1, 6)]).unwrap();
    for (x, y) in both[0].0.iter().zip(&a[0].0) {
        assert!((x - y).abs() < 1e-12);
    }
    for (x, y) in both[1].0.iter().zip(&b[0].0) {
        assert!((x - y).abs() < 1e-12);
    }
    assert_eq!(both[1].1.layers.len(), 2);
}

#[test]
fn scorer_matches_direct_network_steps() {
    let model = tiny(Variant::Osu2);
    let src = [4usize, 7, 5, 6];
    let mut rng = stream_rng(0, Stream::Dropout, 0);
    let mut tape = Tape::inference();
    let enc = model.encode(&mut tape, &src, &[src.len()], None, &mut rng).unwrap();
    let mut state = model.decode_init(&mut tape, &enc, None).unwrap();
    let mut prev = crate::data::BOS;
    let mut expected = Vec::new();
    for _ in 0..6 {
        let (logits, next, _) = model.decode_step(&mut tape, &[prev], &state, &enc, &mut rng).unwrap();
        let row = tape.value(logits).row(0).to_vec();
        let t = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
        if t == crate::data::EOS {
            break;
        }
        expected.push(t);
        state = next;
        prev = t;
    }
    let src = SourceSentence { ids: src.to_vec(), image: None };
    assert_eq!(translate_greedy(&model, &src, 6).unwrap(), expected);
}

#[test]
fn image_variant_requires_image() {
    let model = tiny(Variant::Osu1);
    let src = SourceSentence { ids: vec![4, 5], image: None };
    assert!(translate(&model, &src, &BeamConfig::default()).is_err());
    assert!(NmtScorer::new(&model, &[], Some(&[0.0; 4])).is_err());
    assert!(NmtScorer::new(&model, &[99], Some(&[0.0; 4])).is_err());
}

#[test]
fn corpus_decoding_is_worker_independent() {
    let model = tiny(Variant::Osu1);
    let sources: Vec<SourceSentence> = (0..7)
        .map(|i| SourceSentence {
            ids: (0..(i % 3 + 1)).map(|j| 4 + (i + j) % 5).collect(),
            image: Some(vec![i as f64 * 0.1, -0.2, 0.3, 0.05 * i as f64]),
        })
        .collect();
    let cfg = BeamConfig { beam_size: 3, reward: 0.2, bound_ratio: 2.0, max_len: 8 };
    let one = translate_corpus(&model, &sources, &cfg, 1).unwrap();
    let many = translate_corpus(&model, &sources, &cfg, 4).unwrap();
    assert_eq!(one, many);
    assert!(one.iter().all(|h| h.tokens.len() <= 8));
}

#[test]
fn sweep_csv_has_header_and_rows() {
    let rec = SweepRecord { beam: 5, reward: 0.1, bleu: 12.5, length_ratio: 0.9, seconds: 0.25 };
    let csv = sweep_csv(&[rec]);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("beam,reward,bleu,length_ratio,seconds"));
    assert_eq!(lines.next(), Some("5,0.1,12.5000,0.9000,0.250"));
}
