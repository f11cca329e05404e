//! Declarative experiment runs: data, vocabulary, assembly, training, evaluation, probing.

mod config;
mod increment;
mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::bpe::Bpe;
use crate::data::{
    apply_size_plan, build_vocab, default_specs, split_nonsharing, split_sharing, synth_segments, Bitext, CorpusSegments, DataSplit,
    MultiParallelCorpus, Segment, Sentence, SizePlan, SynthConfig, SyntheticLanguageSpec, Tier, VocabSet,
};
use crate::error::{Error, Result};
use crate::eval::{zero_shot_matrix, MatrixEntry, ModelTranslator, TranslationMatrix};
use crate::lang::{all_pairs, Direction, Lang};
use crate::probe::{mono_direction_eval, similarity_report, SimilarityReport};
use crate::train::{checkpoint, MetricsLog, TrainData, TrainSummary, Trainer};
use crate::zoo::{trainable_directions, ModelKind, MultiModel};

pub use config::{parse_pairs, DataSource, ExperimentConfig, IncrementSection, Overrides, SizeSection, SynthSection};
pub use increment::{add_and_train, increment, increment_dir, IncrementOutcome};
pub use report::{report, tier_report};

pub const MANIFEST: &str = "manifest.json";
pub const BEST_CHECKPOINT: &str = "checkpoints/best.ckpt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epochs: usize,
    pub steps: u64,
    pub best_epoch: Option<usize>,
    pub best_valid: Option<f64>,
}

impl From<&TrainSummary> for TrainRecord {
    fn from(s: &TrainSummary) -> Self {
        TrainRecord { epochs: s.epochs, steps: s.steps, best_epoch: s.best_epoch, best_valid: s.best_valid }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub similarity: SimilarityReport,
    /// Untrained `L -> L` BLEU per language.
    pub mono: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementRecord {
    pub lang: String,
    pub anchors: Vec<String>,
    pub aux: Vec<String>,
    pub init: String,
    pub frozen_identical: bool,
    pub supervised: Vec<MatrixEntry>,
    pub zero_shot: Vec<MatrixEntry>,
    /// Two-leg Single baseline over the zero-shot directions.
    pub pivot: Vec<MatrixEntry>,
}

/// What a run consumed and produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub kind: String,
    pub seed: u64,
    pub digest: String,
    /// `running`, `complete`, or `failed`.
    pub status: String,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    /// Input name to git-style content hash.
    pub inputs: BTreeMap<String, String>,
    pub started: u64,
    pub finished: Option<u64>,
    pub stages: Vec<String>,
    /// Paths relative to the run directory.
    pub artifacts: Vec<String>,
    pub train: Option<TrainRecord>,
    pub matrix: Vec<MatrixEntry>,
    pub tiers: BTreeMap<String, Tier>,
    pub probe: Option<ProbeRecord>,
    pub increment: Option<IncrementRecord>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(MANIFEST))?;
        serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", dir.join(MANIFEST).display())))
    }

    pub fn is_complete(&self) -> bool {
        self.status == "complete"
    }

    pub fn translation_matrix(&self) -> TranslationMatrix {
        TranslationMatrix { entries: self.matrix.clone() }
    }

    /// Mean BLEU over every evaluated direction.
    pub fn average_bleu(&self) -> Option<f64> {
        self.translation_matrix().mean_bleu(|_| true)
    }
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Git-style blob hash (`blob <len>\0` header) with SHA-256.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    config::hex(&h.finalize())
}

/// Tracks artifacts and persists the manifest after every stage.
pub(crate) struct Recorder {
    dir: PathBuf,
    manifest: RunManifest,
}

impl Recorder {
    pub(crate) fn start(cfg: &ExperimentConfig, dir: &Path, name: String) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        for stale in ["metrics.jsonl", MANIFEST] {
            let p = dir.join(stale);
            if p.exists() {
                std::fs::remove_file(p)?;
            }
        }
        let mut rec = Recorder {
            dir: dir.to_path_buf(),
            manifest: RunManifest {
                name,
                kind: cfg.kind.to_string(),
                seed: cfg.seed,
                digest: cfg.digest(),
                status: "running".into(),
                failed_stage: None,
                error: None,
                inputs: BTreeMap::new(),
                started: now(),
                finished: None,
                stages: Vec::new(),
                artifacts: Vec::new(),
                train: None,
                matrix: Vec::new(),
                tiers: BTreeMap::new(),
                probe: None,
                increment: None,
            },
        };
        let canonical = cfg.canonical();
        rec.manifest.inputs.insert("config".into(), content_hash(canonical.as_bytes()));
        rec.write("config.txt", canonical.as_bytes())?;
        rec.save()?;
        Ok(rec)
    }

    pub(crate) fn dir(&self) -> &Path {
        &self.dir
    }

    pub(crate) fn manifest_mut(&mut self) -> &mut RunManifest {
        &mut self.manifest
    }

    pub(crate) fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(rel);
        if let Some(p) = path.parent() {
            std::fs::create_dir_all(p)?;
        }
        std::fs::write(path, bytes)?;
        self.note(rel);
        Ok(())
    }

    /// Lists a file written by another component, if it exists.
    pub(crate) fn note(&mut self, rel: &str) {
        if self.dir.join(rel).exists() && !self.manifest.artifacts.iter().any(|a| a == rel) {
            self.manifest.artifacts.push(rel.to_string());
        }
    }

    pub(crate) fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        log::info!("stage {name}");
        let out = f(self).map_err(|e| e.in_stage(name))?;
        self.manifest.stages.push(name.to_string());
        self.save()?;
        Ok(out)
    }

    fn save(&mut self) -> Result<()> {
        self.note_self();
        let json = serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::config(format!("manifest: {e}")))?;
        std::fs::write(self.dir.join(MANIFEST), json + "\n")?;
        Ok(())
    }

    fn note_self(&mut self) {
        if !self.manifest.artifacts.iter().any(|a| a == MANIFEST) {
            self.manifest.artifacts.push(MANIFEST.to_string());
        }
    }

    /// Stamps the end time and final status; on failure the partial manifest is kept.
    pub(crate) fn finish<T>(mut self, result: Result<T>) -> Result<RunManifest> {
        self.manifest.finished = Some(now());
        match result {
            Ok(_) => {
                self.manifest.status = "complete".into();
                self.save()?;
                Ok(self.manifest)
            }
            Err(e) => {
                self.manifest.status = "failed".into();
                if let Error::Stage { stage, .. } = &e {
                    self.manifest.failed_stage = Some(stage.clone());
                }
                self.manifest.error = Some(e.to_string());
                self.save()?;
                Err(e)
            }
        }
    }
}

/// Corpus segments, synthetic specs when generated, and the pair division.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub segments: CorpusSegments,
    pub specs: Option<Vec<SyntheticLanguageSpec>>,
    pub split: DataSplit,
    pub bpe: BTreeMap<Lang, Bpe>,
    pub inputs: BTreeMap<String, String>,
}

impl Prepared {
    /// Per-direction bitexts of one segment, optionally capped to the first `cap` rows.
    pub fn bitexts(&self, directions: &[Direction], seg: Segment, cap: Option<usize>) -> Result<Vec<Bitext>> {
        directions
            .iter()
            .map(|d| {
                let mut b = self.split.bitext(&self.segments, d, seg)?;
                if let Some(n) = cap {
                    b.src.truncate(n);
                    b.tgt.truncate(n);
                    b.row_ids.truncate(n);
                }
                Ok(b)
            })
            .collect()
    }

    /// Vocabularies built from the training segment restricted to `langs`.
    pub fn vocabs(&self, cfg: &ExperimentConfig, langs: &[Lang]) -> Result<VocabSet> {
        build_vocab(&self.segments.train.select(langs)?, cfg.vocab_mode())
    }
}

fn synth_specs(s: &SynthSection, seed: u64) -> Vec<SyntheticLanguageSpec> {
    match &s.reorders {
        None => default_specs(&s.languages, s.concepts, seed),
        Some(r) => s
            .languages
            .iter()
            .enumerate()
            .map(|(i, l)| SyntheticLanguageSpec::random(l.clone(), s.concepts, r[i % r.len()], seed))
            .collect(),
    }
}

fn read_lines(path: &Path, inputs: &mut BTreeMap<String, String>) -> Result<Vec<String>> {
    let bytes = std::fs::read(path)?;
    inputs.insert(path.display().to_string(), content_hash(&bytes));
    let text = String::from_utf8(bytes).map_err(|_| Error::config(format!("{} is not UTF-8", path.display())))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn read_segments(
    dir: &Path,
    langs: &[Lang],
    merges: usize,
    inputs: &mut BTreeMap<String, String>,
) -> Result<(CorpusSegments, BTreeMap<Lang, Bpe>)> {
    let mut lines: BTreeMap<(Segment, Lang), Vec<String>> = BTreeMap::new();
    for seg in Segment::ALL {
        for l in langs {
            lines.insert((seg, l.clone()), read_lines(&dir.join(format!("{}.{l}", seg.name())), inputs)?);
        }
    }
    let mut bpe = BTreeMap::new();
    if merges > 0 {
        for l in langs {
            let train = &lines[&(Segment::Train, l.clone())];
            bpe.insert(l.clone(), Bpe::learn(train.iter().map(String::as_str), merges));
        }
    }
    let tokenize = |l: &Lang, line: &str| -> Sentence {
        match bpe.get(l) {
            Some(b) => b.encode(line),
            None => line.split_whitespace().map(str::to_string).collect(),
        }
    };
    let build = |seg: Segment| -> Result<MultiParallelCorpus> {
        let cols: Vec<&Vec<String>> = langs.iter().map(|l| &lines[&(seg, l.clone())]).collect();
        let n = cols[0].len();
        if let Some((l, c)) = langs.iter().zip(&cols).find(|(_, c)| c.len() != n) {
            return Err(Error::config(format!("{}.{l} has {} lines, expected {n}", seg.name(), c.len())));
        }
        let rows = (0..n).map(|r| langs.iter().zip(&cols).map(|(l, c)| tokenize(l, &c[r])).collect()).collect();
        MultiParallelCorpus::new(langs.to_vec(), rows)
    };
    let segments = CorpusSegments { train: build(Segment::Train)?, valid: build(Segment::Valid)?, test: build(Segment::Test)? };
    Ok((segments, bpe))
}

/// Generates or reads the corpus, then divides it between pairs.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<Prepared> {
    let mut inputs = BTreeMap::new();
    let (segments, specs, bpe) = match &cfg.data {
        DataSource::Synthetic(s) => {
            let specs = synth_specs(s, cfg.seed);
            let sc = SynthConfig {
                rows: s.rows,
                min_len: s.min_len,
                max_len: s.max_len,
                concepts: s.concepts,
                zipf_exponent: s.zipf,
                seed: cfg.seed,
            };
            (synth_segments(&specs, &sc, s.valid_rows, s.test_rows)?, Some(specs), BTreeMap::new())
        }
        DataSource::Files(dir) => {
            let (seg, bpe) = read_segments(dir, &cfg.corpus_languages(), cfg.bpe_merges, &mut inputs)?;
            (seg, None, bpe)
        }
    };
    let split = if cfg.sharing { split_sharing(&segments, cfg.num_parts())? } else { split_nonsharing(&segments, cfg.num_parts())? };
    let split = match &cfg.size {
        Some(s) => apply_size_plan(&split, &SizePlan::new(s.tiers.clone(), s.ratio, s.high)?, cfg.seed)?,
        None => split,
    };
    Ok(Prepared { segments, specs, split, bpe, inputs })
}

/// Directions the configured scheme trains.
pub fn trained_directions(cfg: &ExperimentConfig) -> Result<Vec<Direction>> {
    trainable_directions(&cfg.scheme, &cfg.languages)
}

/// Trained directions, plus every other ordered pair when `eval.directions = all`.
pub fn eval_directions(cfg: &ExperimentConfig) -> Result<Vec<Direction>> {
    let trained = trained_directions(cfg)?;
    if !cfg.eval_all || cfg.kind == ModelKind::Single {
        return Ok(trained);
    }
    let mut out = Vec::new();
    for a in &cfg.languages {
        for b in &cfg.languages {
            if a != b {
                out.push(Direction::new(a.clone(), b.clone()));
            }
        }
    }
    Ok(out)
}

fn write_data(rec: &mut Recorder, prep: &Prepared) -> Result<()> {
    rec.write("data/split.txt", prep.split.plan.to_text().as_bytes())?;
    if let Some(specs) = &prep.specs {
        let json = serde_json::to_string_pretty(specs).map_err(|e| Error::config(format!("specs: {e}")))?;
        rec.write("data/specs.json", json.as_bytes())?;
    }
    for (l, b) in &prep.bpe {
        rec.write(&format!("data/bpe.{l}.txt"), b.to_text().as_bytes())?;
    }
    let dir = rec.dir().join("data");
    for pair in prep.split.pairs() {
        let d = pair.directions()[0].clone();
        for seg in Segment::ALL {
            prep.split.bitext(&prep.segments, &d, seg)?.write_files(&dir, seg.name())?;
            for l in [&d.src, &d.tgt] {
                rec.note(&format!("data/{}.{d}.{l}", seg.name()));
            }
        }
    }
    Ok(())
}

fn write_vocabs(rec: &mut Recorder, vocabs: &VocabSet) -> Result<()> {
    let dir = rec.dir().join("vocab");
    vocabs.save_dir(&dir)?;
    let mut names: Vec<String> =
        std::fs::read_dir(&dir)?.filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned())).collect();
    names.sort();
    for n in names {
        rec.note(&format!("vocab/{n}"));
    }
    Ok(())
}

/// Trains `model` on `directions` with logs and checkpoints under `dir`.
pub fn train_model(
    model: &mut MultiModel,
    prep: &Prepared,
    directions: &[Direction],
    cfg: &ExperimentConfig,
    dir: &Path,
) -> Result<TrainSummary> {
    let train = prep.bitexts(directions, Segment::Train, None)?;
    let valid = prep.bitexts(directions, Segment::Valid, None)?;
    let data = TrainData::from_bitexts(model, &train, &valid)?;
    let mut trainer = Trainer::new(model, &data, cfg.train.clone())?
        .with_metrics(MetricsLog::new(dir.join("metrics.jsonl")))
        .with_checkpoints(dir.join("checkpoints"));
    trainer.run()
}

/// BLEU/accuracy matrix over `directions`, flagging those `model` was trained on.
pub fn evaluate(model: &MultiModel, prep: &Prepared, directions: &[Direction], cfg: &ExperimentConfig) -> Result<TranslationMatrix> {
    let tests = prep.bitexts(directions, Segment::Test, cfg.eval_sentences)?;
    let t = ModelTranslator { model, decode: cfg.decode };
    zero_shot_matrix(&t, directions, &tests, model.directions())
}

/// Encoder-similarity and mono-direction probes over the model languages.
pub fn probe(model: &MultiModel, prep: &Prepared, cfg: &ExperimentConfig) -> Result<ProbeRecord> {
    let test = prep.segments.test.select(model.languages())?;
    let similarity = similarity_report(model, &test, &all_pairs(model.languages()), cfg.probe_pairs, cfg.seed)?;
    let n = cfg.eval_sentences.unwrap_or(usize::MAX).min(test.len());
    let mut mono = BTreeMap::new();
    for l in model.languages() {
        let col: Vec<Sentence> = test.column(l)?.into_iter().take(n).cloned().collect();
        mono.insert(l.to_string(), mono_direction_eval(model, l, &col, &cfg.decode)?);
    }
    Ok(ProbeRecord { similarity, mono })
}

fn tier_names(cfg: &ExperimentConfig) -> BTreeMap<String, Tier> {
    let mut out = BTreeMap::new();
    if let Some(s) = &cfg.size {
        for (p, t) in &s.tiers {
            for d in p.directions() {
                out.insert(d.to_string(), *t);
            }
        }
    }
    out
}

fn write_matrix(rec: &mut Recorder, stem: &str, m: &TranslationMatrix, seed: u64, label: &str) -> Result<()> {
    rec.write(&format!("{stem}.txt"), m.to_table().as_bytes())?;
    rec.write(&format!("{stem}.jsonl"), m.to_jsonl(seed, label).as_bytes())
}

/// A complete manifest for the same digest in `cfg.out`, if one exists.
pub fn existing_run(cfg: &ExperimentConfig) -> Option<RunManifest> {
    RunManifest::load(&cfg.out).ok().filter(|m| m.is_complete() && m.digest == cfg.digest() && m.stages.iter().any(|s| s == "evaluate"))
}

/// Full pipeline; a complete run with the same digest is reused.
pub fn run(cfg: &ExperimentConfig) -> Result<RunManifest> {
    cfg.validate()?;
    if let Some(m) = existing_run(cfg) {
        log::info!("{}: complete run with digest {} found, reusing", cfg.out.display(), m.digest);
        return Ok(m);
    }
    let mut rec = Recorder::start(cfg, &cfg.out, cfg.name.clone())?;
    let result = run_stages(cfg, &mut rec, true);
    rec.finish(result)
}

fn run_stages(cfg: &ExperimentConfig, rec: &mut Recorder, full: bool) -> Result<()> {
    let prep = rec.stage("data", |rec| {
        let prep = prepare_data(cfg)?;
        rec.manifest_mut().inputs.extend(prep.inputs.clone());
        write_data(rec, &prep)?;
        Ok(prep)
    })?;
    let directions = trained_directions(cfg)?;
    let vocabs = rec.stage("vocab", |rec| {
        let v = prep.vocabs(cfg, &cfg.languages)?;
        write_vocabs(rec, &v)?;
        Ok(v)
    })?;
    let mut model =
        rec.stage("assemble", |_| MultiModel::assemble(cfg.kind, &cfg.languages, &directions, &cfg.transformer, vocabs, cfg.seed))?;
    rec.stage("train", |rec| {
        let summary = train_model(&mut model, &prep, &directions, cfg, rec.dir())?;
        for a in ["metrics.jsonl", BEST_CHECKPOINT, "checkpoints/last.ckpt"] {
            rec.note(a);
        }
        rec.manifest_mut().train = Some(TrainRecord::from(&summary));
        Ok(())
    })?;
    if !full {
        return Ok(());
    }
    rec.stage("evaluate", |rec| {
        let m = evaluate(&model, &prep, &eval_directions(cfg)?, cfg)?;
        write_matrix(rec, "matrix", &m, cfg.seed, &cfg.name)?;
        rec.manifest_mut().matrix = m.entries;
        rec.manifest_mut().tiers = tier_names(cfg);
        Ok(())
    })?;
    if cfg.probe && cfg.kind != ModelKind::Single {
        rec.stage("probe", |rec| {
            let p = probe(&model, &prep, cfg)?;
            let json = serde_json::to_string_pretty(&p).map_err(|e| Error::config(format!("probe: {e}")))?;
            rec.write("probe.json", json.as_bytes())?;
            rec.manifest_mut().probe = Some(p);
            Ok(())
        })?;
    }
    Ok(())
}

/// Runs `f` as a one-stage job recorded in `cfg.out/<name>`.
fn sub_run(cfg: &ExperimentConfig, name: &str, f: impl FnOnce(&mut Recorder) -> Result<()>) -> Result<RunManifest> {
    cfg.validate()?;
    let mut rec = Recorder::start(cfg, &cfg.out.join(name), format!("{}-{name}", cfg.name))?;
    let result = rec.stage(name, f);
    rec.finish(result)
}

/// Writes row-aligned `{segment}.{lang}` corpus files and the synthetic specs.
pub fn make_synthetic(cfg: &ExperimentConfig) -> Result<RunManifest> {
    if !matches!(cfg.data, DataSource::Synthetic(_)) {
        return Err(Error::config("make-synthetic needs `data.source = synthetic`"));
    }
    sub_run(cfg, "make-synthetic", |rec| {
        let prep = prepare_data(cfg)?;
        if let Some(specs) = &prep.specs {
            let json = serde_json::to_string_pretty(specs).map_err(|e| Error::config(format!("specs: {e}")))?;
            rec.write("specs.json", json.as_bytes())?;
        }
        for seg in Segment::ALL {
            let c = prep.segments.get(seg);
            for l in c.languages() {
                let text: String = c.column(l)?.iter().map(|s| s.join(" ") + "\n").collect();
                rec.write(&format!("{}.{l}", seg.name()), text.as_bytes())?;
            }
        }
        Ok(())
    })
}

/// Writes the split plan and per-pair bitexts.
pub fn split_data(cfg: &ExperimentConfig) -> Result<RunManifest> {
    sub_run(cfg, "split-data", |rec| {
        let prep = prepare_data(cfg)?;
        rec.manifest_mut().inputs.extend(prep.inputs.clone());
        write_data(rec, &prep)
    })
}

/// Writes the vocabularies the configured model kind uses.
pub fn make_vocab(cfg: &ExperimentConfig) -> Result<RunManifest> {
    sub_run(cfg, "build-vocab", |rec| {
        let prep = prepare_data(cfg)?;
        let v = prep.vocabs(cfg, &cfg.languages)?;
        write_vocabs(rec, &v)
    })
}

/// Scores the run's best checkpoint; `all` adds every untrained ordered pair.
pub fn evaluate_run(cfg: &ExperimentConfig, checkpoint: Option<&Path>, all: bool) -> Result<(RunManifest, TranslationMatrix)> {
    let mut matrix = None;
    let name = if all { "zero-shot" } else { "evaluate" };
    let m = sub_run(cfg, name, |rec| {
        let model = load_model(cfg, checkpoint)?;
        let prep = prepare_data(cfg)?;
        let mut c = cfg.clone();
        c.eval_all = all;
        let dirs = if all && model.kind() == ModelKind::Single { model.directions().to_vec() } else { eval_directions(&c)? };
        let mx = evaluate(&model, &prep, &dirs, cfg)?;
        write_matrix(rec, "matrix", &mx, cfg.seed, &cfg.name)?;
        rec.manifest_mut().matrix = mx.entries.clone();
        matrix = Some(mx);
        Ok(())
    })?;
    Ok((m, matrix.expect("set on success")))
}

/// Runs the encoder probes on the run's best checkpoint.
pub fn probe_run(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<RunManifest> {
    sub_run(cfg, "probe", |rec| {
        let model = load_model(cfg, checkpoint)?;
        if model.kind() == ModelKind::Single {
            return Err(Error::config("probes need a multilingual model"));
        }
        let prep = prepare_data(cfg)?;
        let p = probe(&model, &prep, cfg)?;
        let json = serde_json::to_string_pretty(&p).map_err(|e| Error::config(format!("probe: {e}")))?;
        rec.write("probe.json", json.as_bytes())?;
        rec.manifest_mut().probe = Some(p);
        Ok(())
    })
}

/// Trains through the `train` stage only; `run` later evaluates it afresh.
pub fn train(cfg: &ExperimentConfig) -> Result<RunManifest> {
    cfg.validate()?;
    let mut rec = Recorder::start(cfg, &cfg.out, cfg.name.clone())?;
    let result = run_stages(cfg, &mut rec, false);
    rec.finish(result)
}

/// Translates whitespace-tokenized lines; BPE codes saved with the run are applied and undone.
pub fn translate_lines(cfg: &ExperimentConfig, checkpoint: Option<&Path>, d: &Direction, lines: &[String]) -> Result<Vec<String>> {
    let model = load_model(cfg, checkpoint)?;
    let codes = |l: &Lang| -> Result<Option<Bpe>> {
        let p = cfg.out.join(format!("data/bpe.{l}.txt"));
        p.exists().then(|| Bpe::from_text(&std::fs::read_to_string(&p)?)).transpose()
    };
    let bpe = codes(&d.src)?;
    let sources: Vec<Sentence> = lines
        .iter()
        .map(|l| match &bpe {
            Some(b) => b.encode(l),
            None => l.split_whitespace().map(str::to_string).collect(),
        })
        .collect();
    let hyps = crate::eval::translate_all(&ModelTranslator { model: &model, decode: cfg.decode }, d, &sources)?;
    let join_bpe = codes(&d.tgt)?.is_some();
    Ok(hyps.iter().map(|h| if join_bpe { Bpe::decode(h) } else { h.join(" ") }).collect())
}

/// Loads the best checkpoint of the run in `cfg.out`.
pub fn load_model(cfg: &ExperimentConfig, path: Option<&Path>) -> Result<MultiModel> {
    let p = path.map_or_else(|| cfg.out.join(BEST_CHECKPOINT), Path::to_path_buf);
    Ok(checkpoint::load(&p)?.0)
}

#[cfg(test)]
mod tests;
