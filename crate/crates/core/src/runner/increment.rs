use std::path::{Path, PathBuf};

use crate::data::{Segment, VocabSet};
use crate::error::{Error, Result};
use crate::eval::{zero_shot_matrix, ModelTranslator, PivotTranslator, TranslationMatrix};
use crate::lang::{Direction, Lang};
use crate::train::TrainSummary;
use crate::zoo::{Init, ModelKind, MultiModel};

use super::{
    evaluate, load_model, prepare_data, train_model, write_matrix, ExperimentConfig, IncrementRecord, IncrementSection, Prepared, Recorder,
    RunManifest, TrainRecord, BEST_CHECKPOINT,
};

/// Result of adding one language to a frozen M2.
pub struct IncrementOutcome {
    pub model: MultiModel,
    pub summary: TrainSummary,
    /// Every parameter that existed before matches bit for bit after training.
    pub frozen_identical: bool,
    pub supervised: TranslationMatrix,
    pub zero_shot: TranslationMatrix,
    pub pivot: Option<TranslationMatrix>,
    pub manifest: RunManifest,
}

fn init_tag(init: &Init) -> String {
    match init {
        Init::Random => "random".into(),
        Init::Donor(l) => format!("donor-{l}"),
    }
}

/// Output directory of one increment variant under the base run.
pub fn increment_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let inc = section(cfg)?;
    let mut name = format!("increment-{}-{}", inc.lang, init_tag(&inc.init));
    if !inc.aux.is_empty() {
        name += "-aux";
        for l in &inc.aux {
            name += &format!("-{l}");
        }
    }
    Ok(base_dir(cfg, inc).join(name))
}

fn base_dir(cfg: &ExperimentConfig, inc: &IncrementSection) -> PathBuf {
    inc.base.clone().unwrap_or_else(|| cfg.out.clone())
}

fn section(cfg: &ExperimentConfig) -> Result<&IncrementSection> {
    cfg.increment.as_ref().ok_or_else(|| Error::config("no `increment.*` keys in the config"))
}

/// Directions between the new language and the anchor and auxiliary languages, both ways.
pub fn increment_directions(inc: &IncrementSection) -> Vec<Direction> {
    inc.anchors
        .iter()
        .chain(&inc.aux)
        .flat_map(|l| [Direction::new(l.clone(), inc.lang.clone()), Direction::new(inc.lang.clone(), l.clone())])
        .collect()
}

/// Untrained directions between the new language and the other base languages.
fn zero_shot_directions(base_langs: &[Lang], inc: &IncrementSection) -> Vec<Direction> {
    base_langs
        .iter()
        .filter(|l| !inc.anchors.contains(l) && !inc.aux.contains(l))
        .flat_map(|l| [Direction::new(inc.lang.clone(), l.clone()), Direction::new(l.clone(), inc.lang.clone())])
        .collect()
}

/// Freezes every base language, adds `inc.lang`, and trains it on the anchor and auxiliary directions.
pub fn add_and_train(
    mut model: MultiModel,
    prep: &Prepared,
    inc: &IncrementSection,
    cfg: &ExperimentConfig,
    dir: &Path,
) -> Result<(MultiModel, TrainSummary, bool)> {
    if model.kind() != ModelKind::M2 {
        return Err(Error::config("the base checkpoint is not an M2 model"));
    }
    if let Some(l) = inc.anchors.iter().chain(&inc.aux).find(|l| !model.languages().contains(l)) {
        return Err(Error::config(format!("anchor/aux language `{l}` is not in the base model")));
    }
    model.set_dropout(&cfg.transformer);
    let before = model.params().snapshot();
    let base_langs = model.languages().to_vec();
    model.freeze(&base_langs)?;
    let vocab = match prep.vocabs(cfg, std::slice::from_ref(&inc.lang))? {
        VocabSet::PerLanguage(mut m) => m.remove(&inc.lang).ok_or_else(|| Error::config("vocabulary build lost the new language"))?,
        VocabSet::Joint(_) => return Err(Error::config("incremental training needs per-language vocabularies")),
    };
    model.add_language(inc.lang.clone(), vocab, inc.init.clone())?;
    let directions = increment_directions(inc);
    model.set_directions(directions.clone())?;
    let mut tcfg = cfg.clone();
    if let Some(e) = inc.max_epochs {
        tcfg.train.max_epochs = e;
    }
    let summary = train_model(&mut model, prep, &directions, &tcfg, dir)?;
    let after = model.params().snapshot();
    let frozen_identical =
        before.iter().zip(&after).all(|(a, b)| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    Ok((model, summary, frozen_identical))
}

/// Two Single models through `pivot`, trained on the supervised legs of `directions`.
fn pivot_baseline(
    prep: &Prepared,
    cfg: &ExperimentConfig,
    pivot: &Lang,
    directions: &[Direction],
    dir: &Path,
) -> Result<TranslationMatrix> {
    let mut legs: Vec<Direction> = Vec::new();
    let mut langs: Vec<Lang> = vec![pivot.clone()];
    for d in directions {
        for leg in [Direction::new(d.src.clone(), pivot.clone()), Direction::new(pivot.clone(), d.tgt.clone())] {
            if !legs.contains(&leg) {
                legs.push(leg);
            }
        }
        for l in [&d.src, &d.tgt] {
            if !langs.contains(l) {
                langs.push(l.clone());
            }
        }
    }
    let mut scfg = cfg.clone();
    scfg.kind = ModelKind::Single;
    let vocabs = prep.vocabs(&scfg, &langs)?;
    let mut single = MultiModel::assemble(ModelKind::Single, &langs, &legs, &scfg.transformer, vocabs, scfg.seed)?;
    train_model(&mut single, prep, &legs, &scfg, dir)?;
    let leg = ModelTranslator { model: &single, decode: cfg.decode };
    let t = PivotTranslator { pivot: pivot.clone(), leg_a: &leg, leg_b: &leg };
    let tests = prep.bitexts(directions, Segment::Test, cfg.eval_sentences)?;
    zero_shot_matrix(&t, directions, &tests, &[])
}

/// Adds the configured language to the base run's best M2 checkpoint and scores it.
pub fn increment(cfg: &ExperimentConfig) -> Result<IncrementOutcome> {
    cfg.validate()?;
    let inc = section(cfg)?.clone();
    let dir = increment_dir(cfg)?;
    let base_ckpt = base_dir(cfg, &inc).join(BEST_CHECKPOINT);
    let mut rec = Recorder::start(cfg, &dir, format!("{}+{}", cfg.name, inc.lang))?;
    let mut out = None;
    let result = (|| -> Result<()> {
        let prep = rec.stage("data", |rec| {
            let p = prepare_data(cfg)?;
            rec.manifest_mut().inputs.extend(p.inputs.clone());
            Ok(p)
        })?;
        let base = rec.stage("load", |rec| {
            let bytes = std::fs::read(&base_ckpt)?;
            rec.manifest_mut().inputs.insert("base_checkpoint".into(), super::content_hash(&bytes));
            load_model(cfg, Some(&base_ckpt))
        })?;
        let base_langs = base.languages().to_vec();
        let (model, summary, frozen_identical) = rec.stage("train", |rec| {
            let r = add_and_train(base, &prep, &inc, cfg, rec.dir())?;
            for a in ["metrics.jsonl", BEST_CHECKPOINT, "checkpoints/last.ckpt"] {
                rec.note(a);
            }
            rec.manifest_mut().train = Some(TrainRecord::from(&r.1));
            Ok(r)
        })?;
        let zs_dirs = zero_shot_directions(&base_langs, &inc);
        let (supervised, zero_shot) = rec.stage("evaluate", |rec| {
            let sup = evaluate(&model, &prep, model.directions(), cfg)?;
            let zs = evaluate(&model, &prep, &zs_dirs, cfg)?;
            write_matrix(rec, "supervised", &sup, cfg.seed, &rec_label(cfg, &inc))?;
            write_matrix(rec, "zero_shot", &zs, cfg.seed, &rec_label(cfg, &inc))?;
            let mut all = sup.entries.clone();
            all.extend(zs.entries.iter().cloned());
            rec.manifest_mut().matrix = all;
            Ok((sup, zs))
        })?;
        let pivot = if inc.pivot && !zs_dirs.is_empty() {
            Some(rec.stage("pivot", |rec| {
                let pdir = rec.dir().join("pivot");
                let m = pivot_baseline(&prep, cfg, &inc.anchors[0], &zs_dirs, &pdir)?;
                for a in ["pivot/metrics.jsonl", "pivot/checkpoints/best.ckpt", "pivot/checkpoints/last.ckpt"] {
                    rec.note(a);
                }
                write_matrix(rec, "pivot", &m, cfg.seed, "pivot")?;
                Ok(m)
            })?)
        } else {
            None
        };
        rec.manifest_mut().increment = Some(IncrementRecord {
            lang: inc.lang.to_string(),
            anchors: inc.anchors.iter().map(Lang::to_string).collect(),
            aux: inc.aux.iter().map(Lang::to_string).collect(),
            init: init_tag(&inc.init),
            frozen_identical,
            supervised: supervised.entries.clone(),
            zero_shot: zero_shot.entries.clone(),
            pivot: pivot.as_ref().map(|p| p.entries.clone()).unwrap_or_default(),
        });
        out = Some((model, summary, frozen_identical, supervised, zero_shot, pivot));
        Ok(())
    })();
    let manifest = rec.finish(result)?;
    let (model, summary, frozen_identical, supervised, zero_shot, pivot) = out.expect("set on success");
    Ok(IncrementOutcome { model, summary, frozen_identical, supervised, zero_shot, pivot, manifest })
}

fn rec_label(cfg: &ExperimentConfig, inc: &IncrementSection) -> String {
    format!("{}+{}", cfg.name, inc.lang)
}
