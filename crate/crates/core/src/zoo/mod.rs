//! Single, fully shared (1-1), and modular (M2) models over one parameter store.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Batch, VocabSet, Vocabulary, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::lang::{Direction, Lang};
use crate::seed::rng_for;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::transformer::{DecoderStack, EmbeddingTable, EncoderStack, ForwardCtx, Memory, PaddedBatch, TransformerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    Single,
    OneToOne,
    M2,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Single => "single",
            ModelKind::OneToOne => "1-1",
            ModelKind::M2 => "m2",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "single" => Ok(ModelKind::Single),
            "1-1" | "one_to_one" | "onetoone" | "shared" => Ok(ModelKind::OneToOne),
            "m2" | "modular" => Ok(ModelKind::M2),
            _ => Err(Error::config(format!("unknown model kind `{s}`"))),
        }
    }
}

/// Which set of directions is trained.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    /// Every ordered pair of distinct languages.
    M2M,
    /// Only directions with the center language on one side.
    JM2M(Lang),
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s.eq_ignore_ascii_case("m2m") => Ok(Scheme::M2M),
            Some((j, c)) if j.eq_ignore_ascii_case("jm2m") => Ok(Scheme::JM2M(c.parse()?)),
            _ => Err(Error::config(format!("unknown scheme `{s}` (use m2m or jm2m:<lang>)"))),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::M2M => f.write_str("m2m"),
            Scheme::JM2M(c) => write!(f, "jm2m:{c}"),
        }
    }
}

pub fn trainable_directions(scheme: &Scheme, languages: &[Lang]) -> Result<Vec<Direction>> {
    if let Scheme::JM2M(c) = scheme {
        if !languages.contains(c) {
            return Err(Error::config(format!("center language `{c}` is not among the languages")));
        }
    }
    let mut out = Vec::new();
    for s in languages {
        for t in languages {
            let keep = match scheme {
                Scheme::M2M => s != t,
                Scheme::JM2M(c) => s != t && (s == c || t == c),
            };
            if keep {
                out.push(Direction::new(s.clone(), t.clone()));
            }
        }
    }
    Ok(out)
}

/// Registry key of one group of modules.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModuleKey {
    Lang(Lang),
    Shared,
    Dir(Direction),
}

impl fmt::Display for ModuleKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModuleKey::Lang(l) => write!(f, "{l}"),
            ModuleKey::Shared => f.write_str("shared"),
            ModuleKey::Dir(d) => write!(f, "{d}"),
        }
    }
}

/// Encoder, decoder, and embeddings registered under one key.
/// M2 and 1-1 use the same table on both sides.
#[derive(Debug, Clone)]
pub struct ModuleSet {
    pub encoder: EncoderStack,
    pub decoder: DecoderStack,
    pub src_embedding: EmbeddingTable,
    pub tgt_embedding: EmbeddingTable,
}

impl ModuleSet {
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.src_embedding.weight];
        if self.tgt_embedding.weight != self.src_embedding.weight {
            ids.push(self.tgt_embedding.weight);
        }
        ids.extend_from_slice(self.encoder.param_ids());
        ids.extend_from_slice(self.decoder.param_ids());
        ids
    }

    pub fn shares_embedding(&self) -> bool {
        self.src_embedding.weight == self.tgt_embedding.weight
    }
}

/// How a new language's modules are initialized.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Init {
    Random,
    /// Copy encoder and decoder weights of an existing language; the embedding stays random.
    Donor(Lang),
}

/// Resolved modules for one direction.
#[derive(Debug, Clone, Copy)]
pub struct Route<'a> {
    pub key: &'a ModuleKey,
    pub modules: &'a ModuleSet,
    pub src_vocab: &'a Vocabulary,
    pub tgt_vocab: &'a Vocabulary,
    /// Target-language token prepended to the source (1-1 only).
    pub target_token: Option<u32>,
}

impl Route<'_> {
    /// `BOS [<2tgt>] tokens EOS`.
    pub fn source_ids(&self, sentence: &[String]) -> Vec<u32> {
        let mut ids = Vec::with_capacity(sentence.len() + 3);
        ids.push(BOS);
        ids.extend(self.target_token);
        ids.extend(self.src_vocab.encode(sentence));
        ids.push(EOS);
        ids
    }

    /// `tokens EOS`.
    pub fn target_ids(&self, sentence: &[String]) -> Vec<u32> {
        let mut ids = self.tgt_vocab.encode(sentence);
        ids.push(EOS);
        ids
    }
}

/// One of the three model families with its parameters and vocabularies.
#[derive(Debug, Clone)]
pub struct MultiModel {
    kind: ModelKind,
    config: TransformerConfig,
    languages: Vec<Lang>,
    directions: Vec<Direction>,
    vocabs: VocabSet,
    seed: u64,
    store: ParamStore,
    registry: BTreeMap<ModuleKey, ModuleSet>,
}

fn build_modules(
    store: &mut ParamStore,
    key: &ModuleKey,
    config: &TransformerConfig,
    src_vocab: &Vocabulary,
    tgt_vocab: Option<&Vocabulary>,
    seed: u64,
) -> Result<ModuleSet> {
    let mut rng = rng_for(seed, &format!("init/{key}"));
    let d = config.d_model;
    let (src_embedding, tgt_embedding) = match tgt_vocab {
        None => {
            let e = EmbeddingTable::new(store, &format!("{key}.embed"), src_vocab.len(), d, PAD, &mut rng)?;
            (e.clone(), e)
        }
        Some(t) => (
            EmbeddingTable::new(store, &format!("{key}.src_embed"), src_vocab.len(), d, PAD, &mut rng)?,
            EmbeddingTable::new(store, &format!("{key}.tgt_embed"), t.len(), d, PAD, &mut rng)?,
        ),
    };
    Ok(ModuleSet {
        encoder: EncoderStack::new(store, &format!("{key}.encoder"), config, &mut rng)?,
        decoder: DecoderStack::new(store, &format!("{key}.decoder"), config, &mut rng)?,
        src_embedding,
        tgt_embedding,
    })
}

impl MultiModel {
    /// Creates all modules for `kind`; initialization is seeded per module key.
    pub fn assemble(
        kind: ModelKind,
        languages: &[Lang],
        directions: &[Direction],
        config: &TransformerConfig,
        vocabs: VocabSet,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if languages.len() < 2 {
            return Err(Error::config("a multilingual model needs at least two languages"));
        }
        for (i, l) in languages.iter().enumerate() {
            if languages[..i].contains(l) {
                return Err(Error::config(format!("language `{l}` listed twice")));
            }
        }
        for d in directions {
            if !languages.contains(&d.src) || !languages.contains(&d.tgt) {
                return Err(Error::config(format!("direction {d} uses a language outside the model")));
            }
            if d.is_mono() {
                return Err(Error::config(format!("mono direction {d} cannot be trained")));
            }
        }
        match (kind, &vocabs) {
            (ModelKind::OneToOne, VocabSet::Joint(v)) => {
                if let Some(l) = languages.iter().find(|l| v.lang_id(l).is_none()) {
                    return Err(Error::config(format!("joint vocabulary lacks a target token for `{l}`")));
                }
            }
            (ModelKind::OneToOne, _) => return Err(Error::config("the 1-1 model needs a joint vocabulary")),
            (_, VocabSet::PerLanguage(_)) => {
                for l in languages {
                    vocabs.get(l)?;
                }
            }
            (k, _) => return Err(Error::config(format!("the {k} model needs per-language vocabularies"))),
        }
        let mut store = ParamStore::new();
        let mut registry = BTreeMap::new();
        match kind {
            ModelKind::M2 => {
                for l in languages {
                    let key = ModuleKey::Lang(l.clone());
                    let m = build_modules(&mut store, &key, config, vocabs.get(l)?, None, seed)?;
                    registry.insert(key, m);
                }
            }
            ModelKind::OneToOne => {
                let key = ModuleKey::Shared;
                let m = build_modules(&mut store, &key, config, vocabs.get(&languages[0])?, None, seed)?;
                registry.insert(key, m);
            }
            ModelKind::Single => {
                if directions.is_empty() {
                    return Err(Error::config("single models need at least one direction"));
                }
                for d in directions {
                    let key = ModuleKey::Dir(d.clone());
                    let m = build_modules(&mut store, &key, config, vocabs.get(&d.src)?, Some(vocabs.get(&d.tgt)?), seed)?;
                    registry.insert(key, m);
                }
            }
        }
        Ok(MultiModel {
            kind,
            config: config.clone(),
            languages: languages.to_vec(),
            directions: directions.to_vec(),
            vocabs,
            seed,
            store,
            registry,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    /// Applies the dropout rates of `from` to every module.
    pub fn set_dropout(&mut self, from: &TransformerConfig) {
        self.config.set_dropout(from);
        for m in self.registry.values_mut() {
            m.encoder.set_dropout(from);
            m.decoder.set_dropout(from);
        }
    }

    pub fn languages(&self) -> &[Lang] {
        &self.languages
    }

    /// Directions the model is configured to train.
    pub fn directions(&self) -> &[Direction] {
        &self.directions
    }

    pub fn set_directions(&mut self, directions: Vec<Direction>) -> Result<()> {
        for d in &directions {
            if d.is_mono() || !self.languages.contains(&d.src) || !self.languages.contains(&d.tgt) {
                return Err(Error::config(format!("direction {d} is not trainable in this model")));
            }
            if self.kind == ModelKind::Single && !self.registry.contains_key(&ModuleKey::Dir(d.clone())) {
                return Err(Error::routing(format!("single model has no modules for {d}")));
            }
        }
        self.directions = directions;
        Ok(())
    }

    pub fn vocabs(&self) -> &VocabSet {
        &self.vocabs
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn registry(&self) -> &BTreeMap<ModuleKey, ModuleSet> {
        &self.registry
    }

    pub fn num_encoders(&self) -> usize {
        self.registry.len()
    }

    pub fn num_decoders(&self) -> usize {
        self.registry.len()
    }

    pub fn num_embeddings(&self) -> usize {
        self.registry.values().map(|m| if m.shares_embedding() { 1 } else { 2 }).sum()
    }

    fn key_for(&self, d: &Direction) -> Result<(ModuleKey, ModuleKey)> {
        for l in [&d.src, &d.tgt] {
            if !self.languages.contains(l) {
                return Err(Error::routing(format!("language `{l}` is not in the model")));
            }
        }
        Ok(match self.kind {
            ModelKind::M2 => (ModuleKey::Lang(d.src.clone()), ModuleKey::Lang(d.tgt.clone())),
            ModelKind::OneToOne => (ModuleKey::Shared, ModuleKey::Shared),
            ModelKind::Single => {
                let k = ModuleKey::Dir(d.clone());
                if !self.registry.contains_key(&k) {
                    return Err(Error::routing(format!("no single model is configured for {d}")));
                }
                (k.clone(), k)
            }
        })
    }

    /// Encoder and decoder modules for `d`. M2 and 1-1 route any pair of their languages.
    pub fn route(&self, d: &Direction) -> Result<(Route<'_>, Route<'_>)> {
        let (ek, dk) = self.key_for(d)?;
        let (ek, enc) = self.registry.get_key_value(&ek).expect("registered key");
        let (dk, dec) = self.registry.get_key_value(&dk).expect("registered key");
        let src_vocab = self.vocabs.get(&d.src)?;
        let tgt_vocab = self.vocabs.get(&d.tgt)?;
        let target_token = match self.kind {
            ModelKind::OneToOne => {
                Some(src_vocab.lang_id(&d.tgt).ok_or_else(|| Error::routing(format!("no target token for `{}`", d.tgt)))?)
            }
            _ => None,
        };
        let mk = |key, modules| Route { key, modules, src_vocab, tgt_vocab, target_token };
        Ok((mk(ek, enc), mk(dk, dec)))
    }

    /// Source preprocessing as tokens: 1-1 prepends `<2tgt>`, the others leave it unchanged.
    pub fn preprocess_source(&self, d: &Direction, sentence: &[String]) -> Result<Vec<String>> {
        let (r, _) = self.route(d)?;
        let mut out = Vec::with_capacity(sentence.len() + 1);
        if let Some(t) = r.target_token {
            out.push(r.src_vocab.token(t).expect("reserved token").to_string());
        }
        out.extend_from_slice(sentence);
        Ok(out)
    }

    pub fn source_ids(&self, d: &Direction, sentence: &[String]) -> Result<Vec<u32>> {
        Ok(self.route(d)?.0.source_ids(sentence))
    }

    pub fn target_ids(&self, d: &Direction, sentence: &[String]) -> Result<Vec<u32>> {
        Ok(self.route(d)?.0.target_ids(sentence))
    }

    /// Summed teacher-forced cross entropy of `batch` and its target token count.
    pub fn batch_loss(&self, tape: &mut Tape<'_>, ctx: &mut ForwardCtx, batch: &Batch) -> Result<(Var, usize)> {
        let (enc, dec) = self.route(&batch.direction)?;
        let e = &enc.modules;
        let m = &dec.modules;
        check_ids(&batch.src, e.src_embedding.vocab_size, self.config.max_positions)?;
        check_ids(&batch.dec_in, m.tgt_embedding.vocab_size, self.config.max_positions)?;
        check_ids(&batch.tgt, m.tgt_embedding.vocab_size, self.config.max_positions)?;
        let states = e.encoder.forward(tape, ctx, &e.src_embedding, &batch.src);
        let memory = Memory { states, len: batch.src.len, lengths: &batch.src.lengths };
        let hidden = m.decoder.forward(tape, ctx, &m.tgt_embedding, memory, &batch.dec_in);
        let logits = m.tgt_embedding.project(tape, hidden);
        Ok(tape.cross_entropy_sum(logits, &batch.tgt.ids, Some(PAD)))
    }

    /// Evaluation-mode encoder states `[rows * len, d_model]`.
    pub fn encode(&self, d: &Direction, src: &PaddedBatch) -> Result<Tensor> {
        let (enc, _) = self.route(d)?;
        enc.modules.encoder.encode(&self.store, &enc.modules.src_embedding, src)
    }

    /// Next-token logits for equal-length prefixes, one memory row block per prefix.
    pub fn next_token_logits(&self, d: &Direction, memory: &Tensor, lengths: &[usize], prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        let (_, dec) = self.route(d)?;
        dec.modules.decoder.next_token_logits(&self.store, &dec.modules.tgt_embedding, memory, lengths, prefixes)
    }

    fn keys_for_langs(&self, langs: &[Lang]) -> Result<Vec<ModuleKey>> {
        let mut keys = Vec::new();
        for l in langs {
            if !self.languages.contains(l) {
                return Err(Error::config(format!("cannot freeze unknown language `{l}`")));
            }
            match self.kind {
                ModelKind::M2 => keys.push(ModuleKey::Lang(l.clone())),
                ModelKind::Single => {
                    keys.extend(self.registry.keys().filter(|k| matches!(k, ModuleKey::Dir(d) if d.pair().contains(l))).cloned())
                }
                ModelKind::OneToOne => return Err(Error::config("the 1-1 model has no per-language modules")),
            }
        }
        Ok(keys)
    }

    fn set_frozen(&mut self, keys: &[ModuleKey], frozen: bool) {
        for k in keys {
            for id in self.registry[k].param_ids() {
                self.store.set_frozen(id, frozen);
            }
        }
    }

    pub fn freeze(&mut self, langs: &[Lang]) -> Result<()> {
        let keys = self.keys_for_langs(langs)?;
        self.set_frozen(&keys, true);
        Ok(())
    }

    pub fn unfreeze(&mut self, langs: &[Lang]) -> Result<()> {
        let keys = self.keys_for_langs(langs)?;
        self.set_frozen(&keys, false);
        Ok(())
    }

    pub fn freeze_all(&mut self, frozen: bool) {
        let keys: Vec<ModuleKey> = self.registry.keys().cloned().collect();
        self.set_frozen(&keys, frozen);
    }

    pub fn is_frozen(&self, key: &ModuleKey) -> bool {
        self.registry.get(key).is_some_and(|m| m.param_ids().iter().all(|&id| self.store.is_frozen(id)))
    }

    /// Languages whose modules are all frozen.
    pub fn frozen_languages(&self) -> Vec<Lang> {
        self.languages.iter().filter(|l| self.is_frozen(&ModuleKey::Lang((*l).clone()))).cloned().collect()
    }

    /// Adds modules for `lang` to an M2 model.
    pub fn add_language(&mut self, lang: Lang, vocab: Vocabulary, init: Init) -> Result<()> {
        if self.kind != ModelKind::M2 {
            return Err(Error::config("languages can only be added to an M2 model"));
        }
        if self.languages.contains(&lang) {
            return Err(Error::config(format!("language `{lang}` is already in the model")));
        }
        let donor = match &init {
            Init::Random => None,
            Init::Donor(d) => Some(
                self.registry
                    .get(&ModuleKey::Lang(d.clone()))
                    .cloned()
                    .ok_or_else(|| Error::config(format!("donor language `{d}` is not in the model")))?,
            ),
        };
        let key = ModuleKey::Lang(lang.clone());
        let m = build_modules(&mut self.store, &key, &self.config, &vocab, None, self.seed)?;
        if let Some(donor) = donor {
            let pairs = donor
                .encoder
                .param_ids()
                .iter()
                .zip(m.encoder.param_ids())
                .chain(donor.decoder.param_ids().iter().zip(m.decoder.param_ids()));
            for (&from, &to) in pairs {
                let v = self.store.values(from).to_vec();
                self.store.values_mut(to).copy_from_slice(&v);
            }
        }
        self.vocabs.insert(lang.clone(), vocab)?;
        self.registry.insert(key, m);
        self.languages.push(lang);
        Ok(())
    }
}

fn check_ids(batch: &PaddedBatch, vocab: usize, max_positions: usize) -> Result<()> {
    if batch.len > max_positions {
        return Err(Error::contract(format!("sequence length {} exceeds max_positions {max_positions}", batch.len)));
    }
    if let Some(&bad) = batch.ids.iter().find(|&&id| id as usize >= vocab) {
        return Err(Error::contract(format!("token id {bad} outside vocabulary of {vocab}")));
    }
    Ok(())
}
