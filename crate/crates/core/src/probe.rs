//! Language-invariance probes on encoder outputs.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{MultiParallelCorpus, Sentence, PAD};
use crate::error::{Error, Result};
use crate::eval::{corpus_bleu, translate_all, DecodeConfig, ModelTranslator};
use crate::lang::{Direction, Lang, LangPair};
use crate::seed::rng_for;
use crate::transformer::PaddedBatch;
use crate::zoo::MultiModel;

/// Mean of encoder states over the non-pad positions of one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledRepr {
    pub lang: Lang,
    pub sentence: usize,
    pub vector: Vec<f64>,
}

fn probe_route(lang: &Lang) -> Direction {
    Direction::new(lang.clone(), lang.clone())
}

/// Pools a batch of padded sources encoded by `lang`'s encoder.
fn pool_batch(model: &MultiModel, lang: &Lang, batch: &PaddedBatch) -> Result<Vec<Vec<f64>>> {
    let states = model.encode(&probe_route(lang), batch)?;
    let d = states.cols();
    Ok((0..batch.rows)
        .map(|r| {
            let mut v = vec![0.0; d];
            for t in 0..batch.lengths[r] {
                v.iter_mut().zip(states.row(r * batch.len + t)).for_each(|(a, b)| *a += b);
            }
            let n = batch.lengths[r] as f64;
            v.iter_mut().for_each(|a| *a /= n);
            v
        })
        .collect())
}

pub fn pooled_repr(model: &MultiModel, lang: &Lang, sentence: &[String]) -> Result<Vec<f64>> {
    let ids = model.source_ids(&probe_route(lang), sentence)?;
    Ok(pool_batch(model, lang, &PaddedBatch::from_sequences(&[ids], PAD))?.remove(0))
}

/// Pooled vectors for many sentences of one language, encoded in chunks.
pub fn pooled_reprs(model: &MultiModel, lang: &Lang, sentences: &[&Sentence]) -> Result<Vec<PooledRepr>> {
    let d = probe_route(lang);
    let mut out = Vec::with_capacity(sentences.len());
    for (c, chunk) in sentences.chunks(64).enumerate() {
        let ids: Vec<Vec<u32>> = chunk.iter().map(|s| model.source_ids(&d, s)).collect::<Result<_>>()?;
        for (i, vector) in pool_batch(model, lang, &PaddedBatch::from_sequences(&ids, PAD))?.into_iter().enumerate() {
            out.push(PooledRepr { lang: lang.clone(), sentence: c * 64 + i, vector });
        }
    }
    Ok(out)
}

/// Cosine similarity; `None` when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (na > 0.0 && nb > 0.0).then(|| (dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSimilarity {
    pub pair: String,
    pub mean: f64,
    /// Same sentences with shuffled alignment.
    pub control: f64,
    pub count: usize,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub pairs: Vec<PairSimilarity>,
    pub average: f64,
    pub control_average: f64,
}

fn mean_cos(a: &[PooledRepr], b: &[PooledRepr], align: &[usize]) -> (f64, usize, usize) {
    let (mut sum, mut n, mut bad) = (0.0, 0, 0);
    for (i, &j) in align.iter().enumerate() {
        match cosine(&a[i].vector, &b[j].vector) {
            Some(c) => {
                sum += c;
                n += 1;
            }
            None => bad += 1,
        }
    }
    (if n == 0 { 0.0 } else { sum / n as f64 }, n, bad)
}

/// Mean parallel cosine per language pair over `n_pairs` sampled rows, with a misaligned control.
pub fn similarity_report(
    model: &MultiModel,
    test: &MultiParallelCorpus,
    pairs: &[LangPair],
    n_pairs: usize,
    seed: u64,
) -> Result<SimilarityReport> {
    if pairs.is_empty() {
        return Err(Error::config("no language pairs to probe"));
    }
    let mut rows: Vec<usize> = (0..test.len()).collect();
    rows.shuffle(&mut rng_for(seed, "probe/rows"));
    rows.truncate(n_pairs);
    if rows.len() < 2 {
        return Err(Error::config("similarity probe needs at least two rows"));
    }
    // cyclic shift of a shuffled order: no row keeps its partner
    let mut control: Vec<usize> = (0..rows.len()).collect();
    control.shuffle(&mut rng_for(seed, "probe/control"));
    let mut misalign = vec![0; rows.len()];
    for k in 0..control.len() {
        misalign[control[k]] = control[(k + 1) % control.len()];
    }
    let mut cache: Vec<(Lang, Vec<PooledRepr>)> = Vec::new();
    let mut out = Vec::with_capacity(pairs.len());
    for p in pairs {
        for l in [p.first(), p.second()] {
            if !cache.iter().any(|(c, _)| c == l) {
                let i = test.lang_index(l)?;
                let sents: Vec<&Sentence> = rows.iter().map(|&r| test.sentence(r, i)).collect();
                cache.push((l.clone(), pooled_reprs(model, l, &sents)?));
            }
        }
        let get = |l: &Lang| &cache.iter().find(|(c, _)| c == l).expect("cached").1;
        let (a, b) = (get(p.first()), get(p.second()));
        let identity: Vec<usize> = (0..rows.len()).collect();
        let (mean, count, excluded) = mean_cos(a, b, &identity);
        let (control, _, bad) = mean_cos(a, b, &misalign);
        if excluded + bad > 0 {
            log::warn!("{p}: {} zero-norm vectors excluded", excluded + bad);
        }
        if count == 0 {
            return Err(Error::numeric(format!("similarity of {p}"), "every pooled vector had zero norm"));
        }
        out.push(PairSimilarity { pair: p.to_string(), mean, control, count, excluded });
    }
    let n = out.len() as f64;
    Ok(SimilarityReport {
        average: out.iter().map(|p| p.mean).sum::<f64>() / n,
        control_average: out.iter().map(|p| p.control).sum::<f64>() / n,
        pairs: out,
    })
}

/// BLEU of translating `lang` into itself through its own encoder and decoder.
pub fn mono_direction_eval(model: &MultiModel, lang: &Lang, sentences: &[Sentence], decode: &DecodeConfig) -> Result<f64> {
    let d = probe_route(lang);
    if model.directions().contains(&d) {
        return Err(Error::config(format!("{d} was trained; mono-direction scores are only meaningful untrained")));
    }
    let hyps = translate_all(&ModelTranslator { model, decode: *decode }, &d, sentences)?;
    corpus_bleu(&hyps, sentences)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocab, default_specs, synth_generate, SynthConfig, VocabMode};
    use crate::lang::{all_pairs, parse_langs};
    use crate::transformer::TransformerConfig;
    use crate::zoo::{trainable_directions, ModelKind, Scheme};

    fn setup() -> (MultiModel, MultiParallelCorpus) {
        let langs = parse_langs("aa bb cc").unwrap();
        let cfg = SynthConfig { rows: 40, concepts: 15, min_len: 1, max_len: 6, ..Default::default() };
        let corpus = synth_generate(&default_specs(&langs, 15, 3), &cfg).unwrap();
        let config = TransformerConfig { max_positions: 32, ..TransformerConfig::tiny() };
        let dirs = trainable_directions(&Scheme::M2M, &langs).unwrap();
        let vocabs = build_vocab(&corpus, VocabMode::PerLanguage(40)).unwrap();
        (MultiModel::assemble(ModelKind::M2, &langs, &dirs, &config, vocabs, 2).unwrap(), corpus)
    }

    #[test]
    fn pooling_is_the_mean_over_real_positions() {
        let (m, c) = setup();
        let l: Lang = "aa".parse().unwrap();
        let s = c.sentence(0, 0);
        let v = pooled_repr(&m, &l, s).unwrap();
        let ids = m.source_ids(&probe_route(&l), s).unwrap();
        let states = m.encode(&probe_route(&l), &PaddedBatch::from_sequences(std::slice::from_ref(&ids), PAD)).unwrap();
        for k in 0..v.len() {
            let mean = (0..ids.len()).map(|t| states.row(t)[k]).sum::<f64>() / ids.len() as f64;
            assert!((v[k] - mean).abs() <= 1e-12);
        }
        // padding next to a longer sentence leaves the vector unchanged
        let long: Vec<String> = (0..10).map(|_| s[0].clone()).collect();
        let both = pooled_reprs(&m, &l, &[s, &long]).unwrap();
        assert!(both[0].vector.iter().zip(&v).all(|(a, b)| (a - b).abs() <= 1e-10));
        assert_ne!(both[1].vector, v);
    }

    #[test]
    fn cosine_edge_cases() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 2.0]), Some(0.0));
        assert!((cosine(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), None);
    }

    #[test]
    fn report_is_deterministic_and_bounded() {
        let (m, c) = setup();
        let pairs = all_pairs(m.languages());
        let a = similarity_report(&m, &c, &pairs, 30, 5).unwrap();
        assert_eq!(a, similarity_report(&m, &c, &pairs, 30, 5).unwrap());
        assert_eq!(a.pairs.len(), 3);
        for p in &a.pairs {
            assert_eq!(p.count, 30);
            assert!((-1.0..=1.0).contains(&p.mean) && (-1.0..=1.0).contains(&p.control));
        }
    }

    #[test]
    fn mono_direction_on_untrained_model() {
        let (m, c) = setup();
        let l: Lang = "bb".parse().unwrap();
        let sents: Vec<Sentence> = (0..10).map(|r| c.sentence(r, 1).clone()).collect();
        let bleu = mono_direction_eval(&m, &l, &sents, &DecodeConfig::default()).unwrap();
        assert!(bleu < 5.0, "{bleu}");
    }
}
