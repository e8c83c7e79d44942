mod common;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use pie_harness::pipeline::{hash_tree, list_files, rel_string};
use pie_harness::{run_pipeline, PipelineConfig, RunManifest, RunOptions, Stage, StageStatus};

const ALL: &[&str] = &[
    "prepare",
    "irl_train",
    "pseudo",
    "pretrain",
    "eval",
    "sweep",
    "overlap",
    "ablation",
];

fn config(
    fx: &common::Fixture,
    out: &Path,
    stages: &[&str],
    inputs: &str,
    extra: &str,
) -> PipelineConfig {
    PipelineConfig::from_toml_str(&common::pipeline_toml(fx, out, stages, inputs, extra)).unwrap()
}

fn ablation_grid() -> &'static str {
    r#"
[[ablation.losses]]
name = "full"

[[ablation.losses]]
name = "pseudo_only"
enable_gold_intent = false
enable_gold_utterance = false

[[ablation.corpora]]
name = "alpha"
include = ["alpha"]

[[ablation.corpora]]
name = "all"
"#
}

fn statuses(m: &RunManifest) -> Vec<(Stage, StageStatus)> {
    m.stages.iter().map(|s| (s.name, s.status)).collect()
}

#[test]
fn full_run_records_every_file_with_its_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = common::write_fixture(&tmp.path().join("data"));
    let run = tmp.path().join("run");
    let cfg = config(&fx, &run, ALL, "", ablation_grid());
    let outcome = run_pipeline(&cfg, &RunOptions::default()).unwrap();

    let m = RunManifest::read(&run).unwrap();
    assert_eq!(m, outcome.manifest);
    assert_eq!(m.seed, 7);
    assert_eq!(m.stages.len(), ALL.len());
    assert!(m.stages.iter().all(|s| s.status == StageStatus::Ran));
    for key in [
        "corpus/alpha",
        "corpus/beta",
        "dataset/downstream",
        "splits/downstream",
        "annotations",
    ] {
        assert!(m.inputs.contains_key(key), "{key} missing from inputs");
    }

    let mut recorded = BTreeSet::new();
    for s in &m.stages {
        for (path, sha) in &s.artifacts {
            assert_eq!(
                &pie_core::fingerprint::file_sha256(run.join(path)).unwrap(),
                sha,
                "{path}"
            );
            recorded.insert(path.clone());
        }
        let log = s.log.as_ref().expect("stage log");
        assert_eq!(
            pie_core::fingerprint::file_sha256(run.join(&log.path)).unwrap(),
            log.sha256
        );
        recorded.insert(log.path.clone());
    }
    let on_disk: BTreeSet<String> = list_files(&run, &run.join("artifacts"))
        .unwrap()
        .into_iter()
        .chain(list_files(&run, &run.join("logs")).unwrap())
        .map(|p| rel_string(&p))
        .collect();
    assert_eq!(recorded, on_disk);

    for f in [
        "artifacts/prepare/corpus.jsonl",
        "artifacts/irl_train/tagger",
        "artifacts/pseudo/triples.jsonl",
        "artifacts/pretrain/encoder",
        "artifacts/eval/downstream.json",
        "artifacts/sweep/downstream/sweep.csv",
        "artifacts/sweep/downstream/sweep.png",
        "artifacts/overlap/downstream.json",
        "artifacts/ablation/grid.csv",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }

    let eval: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(run.join("artifacts/eval/downstream.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(eval["splits"].as_array().unwrap().len(), 5);

    let grid = fs::read_to_string(run.join("artifacts/ablation/grid.csv")).unwrap();
    let rows: Vec<&str> = grid.lines().collect();
    assert_eq!(rows[0], "corpus,loss,triples,downstream,average");
    assert_eq!(rows.len(), 1 + 2 * 2);
}

#[test]
fn rerun_is_cached_and_fresh_run_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = common::write_fixture(&tmp.path().join("data"));
    let stages = ["prepare", "irl_train", "pseudo", "pretrain", "eval"];
    let run = tmp.path().join("run");
    let cfg = config(&fx, &run, &stages, "", "");
    let first = run_pipeline(&cfg, &RunOptions::default()).unwrap();

    let again = run_pipeline(&cfg, &RunOptions::default()).unwrap();
    assert!(again
        .manifest
        .stages
        .iter()
        .all(|s| s.status == StageStatus::Cached));
    for (a, b) in first.manifest.stages.iter().zip(&again.manifest.stages) {
        assert_eq!(a.key, b.key);
        assert_eq!(a.artifacts, b.artifacts);
    }

    let forced = run_pipeline(&cfg, &RunOptions { force: true }).unwrap();
    assert!(forced
        .manifest
        .stages
        .iter()
        .all(|s| s.status == StageStatus::Ran));

    let other = tmp.path().join("other");
    let cfg2 = config(&fx, &other, &stages, "", "");
    let second = run_pipeline(&cfg2, &RunOptions::default()).unwrap();
    let enc = |dir: &Path| hash_tree(dir, &dir.join("artifacts/pretrain/encoder")).unwrap();
    assert!(!enc(&run).is_empty());
    assert_eq!(enc(&run), enc(&other));
    for (a, b) in first.manifest.stages.iter().zip(&second.manifest.stages) {
        assert_eq!(a.key, b.key, "{}", a.name);
        assert_eq!(a.artifacts, b.artifacts, "{}", a.name);
    }
}

#[test]
fn deleting_an_artifact_reruns_only_that_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = common::write_fixture(&tmp.path().join("data"));
    let stages = ["prepare", "irl_train", "pseudo", "pretrain", "eval"];
    let run = tmp.path().join("run");
    let cfg = config(&fx, &run, &stages, "", "");
    let first = run_pipeline(&cfg, &RunOptions::default()).unwrap();

    fs::remove_file(run.join("artifacts/eval/downstream.json")).unwrap();
    let again = run_pipeline(&cfg, &RunOptions::default()).unwrap();
    assert_eq!(
        statuses(&again.manifest),
        vec![
            (Stage::Prepare, StageStatus::Cached),
            (Stage::IrlTrain, StageStatus::Cached),
            (Stage::Pseudo, StageStatus::Cached),
            (Stage::Pretrain, StageStatus::Cached),
            (Stage::Eval, StageStatus::Ran),
        ]
    );
    assert_eq!(
        first.manifest.stage(Stage::Eval).unwrap().artifacts,
        again.manifest.stage(Stage::Eval).unwrap().artifacts
    );
}

#[test]
fn changing_a_setting_reruns_downstream_stages() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = common::write_fixture(&tmp.path().join("data"));
    let stages = ["prepare", "irl_train", "pseudo", "pretrain", "eval"];
    let run = tmp.path().join("run");
    run_pipeline(&config(&fx, &run, &stages, "", ""), &RunOptions::default()).unwrap();

    let mut cfg = config(&fx, &run, &stages, "", "");
    cfg.pretrain.epochs = 1;
    let again = run_pipeline(&cfg, &RunOptions::default()).unwrap();
    assert_eq!(again.status(Stage::Pseudo), Some(StageStatus::Cached));
    assert_eq!(again.status(Stage::Pretrain), Some(StageStatus::Ran));
    assert_eq!(again.status(Stage::Eval), Some(StageStatus::Ran));
}

#[test]
fn prebuilt_tagger_skips_preparation_and_training() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = common::write_fixture(&tmp.path().join("data"));
    let first = tmp.path().join("first");
    run_pipeline(
        &config(&fx, &first, &["irl_train"], "", ""),
        &RunOptions::default(),
    )
    .unwrap();
    let tagger = first.join("artifacts/irl_train/tagger");

    let run = tmp.path().join("run");
    let inputs = format!("tagger = \"{}\"", tagger.display());
    let cfg = config(&fx, &run, &["pseudo", "pretrain", "eval"], &inputs, "");
    let outcome = run_pipeline(&cfg, &RunOptions::default()).unwrap();
    assert_eq!(outcome.manifest.stages.len(), 3);
    assert!(outcome.manifest.inputs.contains_key("tagger"));
    assert!(!run.join("artifacts/prepare").exists());
    let summary: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(run.join("artifacts/pseudo/summary.json")).unwrap(),
    )
    .unwrap();
    assert!(summary.is_object());
}

#[test]
fn missing_dependency_fails_before_anything_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = common::write_fixture(&tmp.path().join("data"));
    let run = tmp.path().join("run");
    let err = run_pipeline(
        &config(&fx, &run, &["prepare", "eval"], "", ""),
        &RunOptions::default(),
    )
    .unwrap_err();
    assert!(format!("{err:#}").contains("stage `eval`"), "{err:#}");
    assert!(!run.exists());

    let err = run_pipeline(
        &config(&fx, &run, &["pretrain", "pseudo"], "", ""),
        &RunOptions::default(),
    )
    .unwrap_err();
    assert!(format!("{err:#}").contains("listed after"), "{err:#}");

    let inputs = format!("validation = \"{}\"", fx.dir.join("nope.jsonl").display());
    let err = run_pipeline(
        &config(
            &fx,
            &run,
            &["prepare", "irl_train", "pseudo", "pretrain"],
            &inputs,
            "",
        ),
        &RunOptions::default(),
    )
    .unwrap_err();
    assert!(format!("{err:#}").contains("validation"), "{err:#}");
    assert!(!run.exists());
}

#[test]
fn failing_stage_is_recorded_and_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = common::write_fixture(&tmp.path().join("data"));
    let run = tmp.path().join("run");
    let stages = ["prepare", "irl_train", "pseudo", "pretrain", "eval"];
    let mut cfg = config(&fx, &run, &stages, "", "");
    // Eight utterances per intent cannot hold K=6 supports plus Q=5 queries.
    cfg.eval.k = 6;
    let err = run_pipeline(&cfg, &RunOptions::default()).unwrap_err();
    assert!(
        format!("{err:#}").contains("stage `eval` failed"),
        "{err:#}"
    );

    let m = RunManifest::read(&run).unwrap();
    let eval = m.stage(Stage::Eval).unwrap();
    assert_eq!(eval.status, StageStatus::Failed);
    assert!(eval.error.is_some());
    assert!(eval.artifacts.is_empty());
    assert!(!run.join("artifacts/eval").exists());
    assert!(run.join("logs/eval.log").exists());
    assert_eq!(m.stage(Stage::Pretrain).unwrap().status, StageStatus::Ran);

    cfg.eval.k = 1;
    let fixed = run_pipeline(&cfg, &RunOptions::default()).unwrap();
    assert_eq!(fixed.status(Stage::Pretrain), Some(StageStatus::Cached));
    assert_eq!(fixed.status(Stage::Eval), Some(StageStatus::Ran));
}

#[test]
fn stages_outside_the_run_are_carried_over() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = common::write_fixture(&tmp.path().join("data"));
    let run = tmp.path().join("run");
    run_pipeline(
        &config(
            &fx,
            &run,
            &["prepare", "irl_train", "pseudo", "pretrain"],
            "",
            "",
        ),
        &RunOptions::default(),
    )
    .unwrap();

    let outcome = run_pipeline(
        &config(&fx, &run, &["eval"], "", ""),
        &RunOptions::default(),
    )
    .unwrap();
    assert_eq!(outcome.status(Stage::Eval), Some(StageStatus::Ran));
    assert_eq!(outcome.status(Stage::Pretrain), Some(StageStatus::Kept));
    assert_eq!(outcome.manifest.stages.len(), 5);

    fs::write(run.join("artifacts/prepare/extra.txt"), "x").unwrap();
    let outcome = run_pipeline(
        &config(&fx, &run, &["eval"], "", ""),
        &RunOptions::default(),
    )
    .unwrap();
    assert_eq!(outcome.status(Stage::Prepare), Some(StageStatus::Stale));
    assert_eq!(outcome.status(Stage::Eval), Some(StageStatus::Cached));
    assert!(outcome
        .manifest
        .stage(Stage::Prepare)
        .unwrap()
        .artifacts
        .contains_key("artifacts/prepare/extra.txt"));
}

#[test]
fn config_rejects_unknown_keys_and_duplicate_stages() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = common::write_fixture(&tmp.path().join("data"));
    let run = tmp.path().join("run");
    let body = common::pipeline_toml(&fx, &run, &["prepare"], "", "[bogus]\nx = 1\n");
    assert!(PipelineConfig::from_toml_str(&body).is_err());
    let body = common::pipeline_toml(&fx, &run, &["prepare", "prepare"], "", "");
    assert!(PipelineConfig::from_toml_str(&body).is_err());
}
