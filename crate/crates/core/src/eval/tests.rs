use super::*;
use crate::data::{build_vocab, default_specs, synth_generate, Batch, SynthConfig, VocabMode, EOS, UNK};
use crate::lang::parse_langs;
use crate::tensor::Tape;
use crate::transformer::{ForwardCtx, TransformerConfig};
use crate::zoo::{trainable_directions, ModelKind, Scheme};

fn toy_config() -> TransformerConfig {
    TransformerConfig {
        d_model: 8,
        ff_dim: 16,
        num_heads: 2,
        num_encoder_layers: 1,
        num_decoder_layers: 1,
        dropout: 0.0,
        attention_dropout: 0.0,
        activation_dropout: 0.0,
        max_positions: 40,
    }
}

fn model(kind: ModelKind, concepts: usize, vocab: usize, seed: u64) -> (MultiModel, crate::data::MultiParallelCorpus) {
    let langs = parse_langs("aa bb cc").unwrap();
    let cfg = SynthConfig { rows: 30, concepts, min_len: 1, max_len: 6, ..Default::default() };
    let corpus = synth_generate(&default_specs(&langs, concepts, 1), &cfg).unwrap();
    let mode = if kind == ModelKind::OneToOne { VocabMode::Joint(vocab) } else { VocabMode::PerLanguage(vocab) };
    let dirs = trainable_directions(&Scheme::M2M, &langs).unwrap();
    let m = MultiModel::assemble(kind, &langs, &dirs, &toy_config(), build_vocab(&corpus, mode).unwrap(), seed).unwrap();
    (m, corpus)
}

fn dir(s: &str) -> Direction {
    s.parse().unwrap()
}

fn greedy(m: &MultiModel, d: &Direction, src: &[u32], max_len: usize) -> Vec<u32> {
    let memory = m.encode(d, &crate::transformer::PaddedBatch::from_sequences(&[src.to_vec()], 0)).unwrap();
    let (_, dec) = m.route(d).unwrap();
    let mut prefix = vec![crate::data::BOS];
    for t in 0..max_len {
        let logits = m.next_token_logits(d, &memory, &[src.len()], &[prefix.clone()]).unwrap().remove(0);
        let best = (0..logits.len() as u32)
            .filter(|&i| i == EOS || i == UNK || !dec.tgt_vocab.is_reserved(i))
            .filter(|&i| t + 1 < max_len || i == EOS)
            .max_by(|&a, &b| logits[a as usize].total_cmp(&logits[b as usize]).then(b.cmp(&a)))
            .unwrap();
        if best == EOS {
            break;
        }
        prefix.push(best);
    }
    prefix[1..].to_vec()
}

/// Sum of log-probs of `tokens + EOS` by a teacher-forced forward pass.
fn sequence_log_prob(m: &MultiModel, d: &Direction, src: &[u32], tokens: &[u32]) -> f64 {
    let mut tgt = tokens.to_vec();
    tgt.push(EOS);
    let b = Batch::new(d.clone(), &[(src.to_vec(), tgt)], vec![0]);
    let mut tape = Tape::with_params(m.params());
    let (l, _) = m.batch_loss(&mut tape, &mut ForwardCtx::eval(), &b).unwrap();
    -tape.scalar(l)
}

#[test]
fn beam_of_one_is_greedy() {
    let (m, corpus) = model(ModelKind::M2, 12, 30, 4);
    let d = dir("aa-bb");
    let cfg = DecodeConfig { beam_size: 1, max_len: Some(7), ..Default::default() };
    for r in 0..10 {
        let src = m.source_ids(&d, corpus.sentence(r, 0)).unwrap();
        let h = beam_search(&m, &d, &src, &cfg).unwrap();
        assert_eq!(h.tokens, greedy(&m, &d, &src, 7));
    }
}

#[test]
fn wide_beam_matches_exhaustive_search() {
    for seed in 0..6 {
        let (m, corpus) = model(ModelKind::M2, 1, 5, seed);
        let d = dir("bb-cc");
        assert_eq!(m.route(&d).unwrap().1.tgt_vocab.len(), 5);
        let src = m.source_ids(&d, corpus.sentence(0, 1)).unwrap();
        for alpha in [0.0, 0.6, 1.0] {
            let cfg = DecodeConfig { beam_size: 125, alpha, max_len: Some(3), ..Default::default() };
            let h = beam_search(&m, &d, &src, &cfg).unwrap();
            // enumerate every output of at most 2 tokens plus EOS
            let alphabet = [UNK, 4];
            let mut all: Vec<Vec<u32>> = vec![vec![]];
            for a in alphabet {
                all.push(vec![a]);
                for b in alphabet {
                    all.push(vec![a, b]);
                }
            }
            let best = all
                .iter()
                .map(|t| (cfg.score(sequence_log_prob(&m, &d, &src, t), t.len() + 1), t))
                .max_by(|a, b| a.0.total_cmp(&b.0).then_with(|| b.1.len().cmp(&a.1.len())).then_with(|| b.1.cmp(a.1)))
                .unwrap();
            assert_eq!(&h.tokens, best.1, "seed {seed} alpha {alpha}");
            assert!((h.score - best.0).abs() < 1e-9);
            assert_eq!(h.forced_eos, h.tokens.len() == 2);
        }
    }
}

#[test]
fn zero_alpha_scores_raw_log_prob() {
    let (m, corpus) = model(ModelKind::M2, 12, 30, 2);
    let d = dir("cc-aa");
    let src = m.source_ids(&d, corpus.sentence(3, 2)).unwrap();
    let h = beam_search(&m, &d, &src, &DecodeConfig { alpha: 0.0, ..Default::default() }).unwrap();
    assert_eq!(h.score, h.log_prob);
    assert!((h.log_prob - sequence_log_prob(&m, &d, &src, &h.tokens)).abs() < 1e-9);
}

#[test]
fn beam_never_scores_below_greedy_and_is_deterministic() {
    let (m, corpus) = model(ModelKind::OneToOne, 12, 60, 7);
    let d = dir("aa-cc");
    for r in 0..8 {
        let src = m.source_ids(&d, corpus.sentence(r, 0)).unwrap();
        let wide = beam_search(&m, &d, &src, &DecodeConfig::default()).unwrap();
        let g = beam_search(&m, &d, &src, &DecodeConfig { beam_size: 1, ..Default::default() }).unwrap();
        assert!(wide.score >= g.score);
        assert_eq!(beam_search(&m, &d, &src, &DecodeConfig::default()).unwrap(), wide);
        // target-language tokens are never produced
        let (_, dec) = m.route(&d).unwrap();
        assert!(wide.tokens.iter().all(|&t| t == UNK || !dec.tgt_vocab.is_reserved(t)));
    }
}

#[test]
fn decode_errors_and_forced_eos() {
    let (m, corpus) = model(ModelKind::M2, 12, 30, 1);
    let d = dir("aa-bb");
    assert!(beam_search(&m, &d, &[], &DecodeConfig::default()).is_err());
    assert!(DecodeConfig { beam_size: 0, ..Default::default() }.validate().is_err());
    let src = m.source_ids(&d, corpus.sentence(0, 0)).unwrap();
    let h = beam_search(&m, &d, &src, &DecodeConfig { max_len: Some(1), ..Default::default() }).unwrap();
    assert!(h.tokens.is_empty());
    assert_eq!(h.finished_at, 0);
}

struct Echo;

impl Translate for Echo {
    fn translate(&self, _: &Direction, s: &[String]) -> Result<Sentence> {
        Ok(s.to_vec())
    }
}

struct Silent;

impl Translate for Silent {
    fn translate(&self, _: &Direction, _: &[String]) -> Result<Sentence> {
        Ok(vec![])
    }
}

#[test]
fn pivoting() {
    let s: Sentence = vec!["x".into(), "y".into()];
    assert_eq!(pivot_translate(&Echo, &dir("a-p"), &Echo, &dir("p-b"), &s).unwrap(), s);
    assert!(matches!(pivot_translate(&Silent, &dir("a-p"), &Echo, &dir("p-b"), &s), Err(Error::Pivot(_))));
    assert!(matches!(pivot_translate(&Echo, &dir("a-p"), &Echo, &dir("q-b"), &s), Err(Error::Pivot(_))));

    let langs = parse_langs("aa bb cc").unwrap();
    let cfg = SynthConfig { rows: 200, concepts: 40, ..Default::default() };
    let specs = default_specs(&langs, 40, 9);
    let corpus = synth_generate(&specs, &cfg).unwrap();
    let oracle = SynthOracle { specs };
    let p = PivotTranslator { pivot: "bb".parse().unwrap(), leg_a: &oracle, leg_b: &oracle };
    for r in 0..corpus.len() {
        let out = p.translate(&dir("aa-cc"), corpus.sentence(r, 0)).unwrap();
        assert_eq!(&out, corpus.sentence(r, 2));
    }
}

/// Silent on sentences of odd length, echo otherwise.
struct OddSilent;

impl Translate for OddSilent {
    fn translate(&self, _: &Direction, s: &[String]) -> Result<Sentence> {
        Ok(if s.len() % 2 == 1 { vec![] } else { s.to_vec() })
    }
}

struct Broken;

impl Translate for Broken {
    fn translate(&self, d: &Direction, _: &[String]) -> Result<Sentence> {
        Err(Error::routing(format!("no route for {d}")))
    }
}

#[test]
fn matrix_counts_pivot_failures() {
    let sents: Vec<Sentence> = ["a b", "a b c", "c d", "e"].iter().map(|s| s.split(' ').map(String::from).collect()).collect();
    let test = Bitext { direction: dir("aa-cc"), src: sents.clone(), tgt: sents, row_ids: (0..4).collect() };
    let p = PivotTranslator { pivot: "bb".parse().unwrap(), leg_a: &OddSilent, leg_b: &Echo };
    let m = zero_shot_matrix(&p, &[dir("aa-cc")], std::slice::from_ref(&test), &[]).unwrap();
    let e = &m.entries[0];
    assert_eq!(e.pivot_failures, 2);
    assert_eq!(e.accuracy, 0.5);
    assert!(e.bleu < 100.0);
    assert!(m.to_jsonl(1, "pivot").contains("\"pivot_failures\":2"));
    // the same sentences through a working pivot have no failures
    let ok = PivotTranslator { pivot: "bb".parse().unwrap(), leg_a: &Echo, leg_b: &Echo };
    assert_eq!(zero_shot_matrix(&ok, &[dir("aa-cc")], std::slice::from_ref(&test), &[]).unwrap().entries[0].pivot_failures, 0);
    // errors other than pivot errors still abort
    assert!(zero_shot_matrix(&Broken, &[dir("aa-cc")], &[test], &[]).is_err());
}

#[test]
fn matrix_flags_and_reports() {
    let langs = parse_langs("aa bb cc").unwrap();
    let cfg = SynthConfig { rows: 50, concepts: 30, ..Default::default() };
    let specs = default_specs(&langs, 30, 9);
    let corpus = synth_generate(&specs, &cfg).unwrap();
    let oracle = SynthOracle { specs };
    let dirs = trainable_directions(&Scheme::M2M, &langs).unwrap();
    let rows: Vec<usize> = (0..50).collect();
    let tests: Vec<Bitext> = dirs.iter().map(|d| corpus.bitext(d, &rows).unwrap()).collect();
    let supervised = vec![dir("aa-bb"), dir("bb-aa")];
    let m = zero_shot_matrix(&oracle, &dirs, &tests, &supervised).unwrap();
    assert_eq!(m.entries.len(), 6);
    for e in &m.entries {
        assert_eq!(e.supervised, supervised.contains(&e.direction));
        assert_eq!(e.bleu, 100.0);
        assert_eq!(e.accuracy, 1.0);
    }
    let table = m.to_table();
    assert!(table.contains("100.00*") && table.contains("100.00 "));
    assert_eq!(m.to_jsonl(3, "x").lines().count(), 6);
    assert!(zero_shot_matrix(&oracle, &[], &tests, &[]).unwrap().entries.is_empty());

    let echo = zero_shot_matrix(&Echo, &dirs, &tests, &[]).unwrap();
    assert!(echo.entries.iter().all(|e| e.bleu == 0.0));
}

#[test]
fn threaded_translation_keeps_order() {
    let (m, corpus) = model(ModelKind::M2, 12, 30, 3);
    let d = dir("aa-bb");
    let t = ModelTranslator { model: &m, decode: DecodeConfig::default() };
    let src: Vec<Sentence> = (0..9).map(|r| corpus.sentence(r, 0).clone()).collect();
    let serial: Vec<Sentence> = src.iter().map(|s| t.translate(&d, s).unwrap()).collect();
    std::env::set_var("MODNET_THREADS", "3");
    let par = translate_all(&t, &d, &src).unwrap();
    std::env::remove_var("MODNET_THREADS");
    assert_eq!(par, serial);
}
