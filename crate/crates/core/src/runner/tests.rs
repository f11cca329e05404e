use super::*;

fn small(kind: &str, out: &Path) -> String {
    format!(
        "run.name = t\nrun.out = {}\nmodel.kind = {kind}\nmodel.preset = tiny\nmodel.languages = aa bb cc\n\
         synth.rows = 60\nsynth.valid_rows = 12\nsynth.test_rows = 12\nsynth.concepts = 12\nsynth.max_len = 6\n\
         train.budget = 64\ntrain.max_epochs = 1\ntrain.warmup = 10\n",
        out.display()
    )
}

fn cfg(text: &str) -> ExperimentConfig {
    ExperimentConfig::parse(text, &Overrides::default()).unwrap()
}

#[test]
fn pipeline_lists_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("m2");
    let c = cfg(&small("m2", &out));
    let m = run(&c).unwrap();
    assert!(m.is_complete());
    assert_eq!(m.stages, ["data", "vocab", "assemble", "train", "evaluate", "probe"]);
    assert_eq!(m.matrix.len(), 6);
    assert!(m.probe.is_some());
    for a in &m.artifacts {
        assert!(out.join(a).is_file(), "{a} missing");
    }
    let mut on_disk = Vec::new();
    let mut stack = vec![out.clone()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                on_disk.push(p.strip_prefix(&out).unwrap().to_string_lossy().into_owned());
            }
        }
    }
    for f in &on_disk {
        assert!(m.artifacts.contains(f), "{f} not listed");
    }
    assert!(m.artifacts.iter().any(|a| a == "data/train.aa-bb.aa"));
    assert!(m.artifacts.iter().any(|a| a == "vocab/dict.cc.txt"));
    let again = run(&c).unwrap();
    assert_eq!(again.started, m.started, "identical digest reuses the run");
}

#[test]
fn one_to_one_uses_a_joint_vocabulary() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("oo");
    let m = run(&cfg(&small("1-1", &out))).unwrap();
    assert_eq!(m.matrix.len(), 6);
    assert!(m.artifacts.iter().any(|a| a == "vocab/dict.txt"));
    let model = load_model(&cfg(&small("1-1", &out)), None).unwrap();
    assert!(model.vocabs().is_joint());
}

#[test]
fn invalid_config_is_rejected_before_any_output() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bad");
    let text = small("m2", &out) + "model.scheme = jm2m:zz\n";
    let e = ExperimentConfig::parse(&text, &Overrides::default()).unwrap_err();
    assert_eq!(e.exit_code(), 2);
    assert!(!out.exists());
}

#[test]
fn stage_failure_keeps_a_partial_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("fail");
    let c = cfg(&small("single", &out).replace("train.budget = 64", "train.budget = 3"));
    let e = run(&c).unwrap_err();
    assert!(matches!(&e, Error::Stage { stage, .. } if stage == "train"), "{e}");
    assert_eq!(e.exit_code(), 2);
    let m = RunManifest::load(&out).unwrap();
    assert_eq!(m.status, "failed");
    assert_eq!(m.failed_stage.as_deref(), Some("train"));
    assert_eq!(m.stages, ["data", "vocab", "assemble"]);
    assert!(m.error.unwrap().contains("budget"));
}

#[test]
fn increment_freezes_the_base() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("base");
    let text = small("m2", &out).replace("model.languages = aa bb cc", "model.languages = aa bb cc\nsynth.languages = aa bb cc dd")
        + "increment.lang = dd\nincrement.anchors = aa\nincrement.init = donor:aa\n";
    let c = cfg(&text);
    run(&c).unwrap();
    let o = increment(&c).unwrap();
    assert!(o.frozen_identical);
    assert_eq!(o.supervised.entries.len(), 2);
    assert_eq!(o.zero_shot.entries.len(), 4);
    assert!(o.zero_shot.entries.iter().all(|e| !e.supervised));
    assert_eq!(o.pivot.as_ref().unwrap().entries.len(), 4);
    assert!(o.model.languages().contains(&"dd".parse().unwrap()));
    let dir = increment_dir(&c).unwrap();
    assert!(dir.ends_with("increment-dd-donor-aa"));
    assert!(dir.join("pivot.txt").is_file());
    assert!(o.manifest.increment.as_ref().unwrap().frozen_identical);
}

#[test]
fn tiers_reach_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("tiers");
    let text = small("m2", &out) + "size.ratio = 1:2:4\nsize.high = 20\nsize.tiers = aa-bb:high aa-cc:medium bb-cc:low\n";
    let m = run(&cfg(&text)).unwrap();
    assert_eq!(m.tiers.get("bb-aa"), Some(&Tier::High));
    assert_eq!(m.tiers.get("cc-bb"), Some(&Tier::Low));
    let t = tier_report(&[m]);
    assert!(t.contains("high avg") && t.contains("low avg"));
}
