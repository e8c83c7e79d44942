//! Reproducible end-to-end runs.
//!
//! A run directory holds `manifest.json`, one `artifacts/<stage>/` directory
//! per stage and `logs/<stage>.log`. Each stage gets a key hashed from its
//! settings, its seed and the content of everything it reads. A rerun skips
//! a stage whose key is unchanged and whose artifacts still match their
//! recorded hashes, so deleting a downstream artifact rebuilds only that
//! stage and the ones that read it.

mod config;
mod manifest;
mod stages;

pub use config::{
    AblationSettings, CorpusInput, CorpusSubset, DatasetInput, EvalSettings, Inputs, NamedLoss,
    PipelineConfig, Stage, SweepSettings,
};
pub use manifest::{
    fingerprint_path, hash_tree, list_files, rel_string, FileRecord, RunManifest, StageRecord,
    StageStatus, ToolInfo, MANIFEST_FILE, MANIFEST_SCHEMA_VERSION,
};

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use pie_core::fingerprint::sha256_hex;
use pie_core::rng::derive_seed;

use crate::logging;
use crate::models::{EncoderSpec, TaggerKind};
use manifest::artifacts_intact;

/// Where a stage input comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Source {
    Stage(Stage),
    Input(String),
}

/// A named stage input and its origin.
#[derive(Debug, Clone)]
struct Dep {
    what: &'static str,
    source: Source,
}

pub(crate) const CORPUS_FILE: &str = "corpus.jsonl";
pub(crate) const TAGGER_DIR: &str = "tagger";
pub(crate) const TRIPLES_FILE: &str = "triples.jsonl";
pub(crate) const ENCODER_DIR: &str = "encoder";

fn stage_output(run_dir: &Path, stage: Stage) -> PathBuf {
    let dir = run_dir.join("artifacts").join(stage.name());
    match stage {
        Stage::Prepare => dir.join(CORPUS_FILE),
        Stage::IrlTrain => dir.join(TAGGER_DIR),
        Stage::Pseudo => dir.join(TRIPLES_FILE),
        Stage::Pretrain => dir.join(ENCODER_DIR),
        _ => dir,
    }
}

/// Paths of every configured input, keyed as the manifest records them.
fn input_paths(config: &PipelineConfig) -> BTreeMap<String, PathBuf> {
    let i = &config.inputs;
    let mut out = BTreeMap::new();
    for c in &i.corpora {
        out.insert(format!("corpus/{}", c.name), c.path.clone());
    }
    for d in &i.datasets {
        out.insert(format!("dataset/{}", d.id), d.path.clone());
        out.insert(format!("splits/{}", d.id), d.splits.clone());
    }
    let singles = [
        ("annotations", &i.annotations),
        ("annotations_valid", &i.annotations_valid),
        ("tagger", &i.tagger),
        ("encoder", &i.encoder),
        ("validation", &i.validation),
        ("irl_init", &config.irl.init),
    ];
    for (k, v) in singles {
        if let Some(p) = v {
            out.insert(k.to_string(), p.clone());
        }
    }
    if let EncoderSpec::Transformer {
        model_dir: Some(p), ..
    } = &config.encoder
    {
        out.insert("encoder_model_dir".into(), p.clone());
    }
    out
}

struct Planner<'a> {
    config: &'a PipelineConfig,
    reusable: &'a BTreeSet<Stage>,
}

impl Planner<'_> {
    /// `producer`'s output, if it runs before `stage` or survives from a
    /// previous run.
    fn upstream(&self, stage: Stage, producer: Stage) -> Result<Option<Source>> {
        let order = &self.config.stages;
        let pos = |s: Stage| order.iter().position(|x| *x == s);
        match (pos(producer), pos(stage)) {
            (Some(p), Some(c)) if p < c => Ok(Some(Source::Stage(producer))),
            (Some(_), _) => {
                bail!("stage `{stage}` reads the output of `{producer}`, which is listed after it")
            }
            (None, _) if self.reusable.contains(&producer) => Ok(Some(Source::Stage(producer))),
            (None, _) => Ok(None),
        }
    }

    fn input(&self, key: &str) -> Option<Source> {
        input_paths(self.config)
            .contains_key(key)
            .then(|| Source::Input(key.to_string()))
    }

    /// The prepared corpus, or the raw corpora to prepare in memory.
    fn corpus(&self, stage: Stage) -> Result<Vec<Dep>> {
        if let Some(source) = self.upstream(stage, Stage::Prepare)? {
            return Ok(vec![Dep {
                what: "corpus",
                source,
            }]);
        }
        if self.config.inputs.corpora.is_empty() {
            bail!("stage `{stage}` needs a corpus: list `prepare` before it or set inputs.corpora");
        }
        Ok(self.raw_corpora())
    }

    fn raw_corpora(&self) -> Vec<Dep> {
        self.config
            .inputs
            .corpora
            .iter()
            .map(|c| Dep {
                what: "raw_corpus",
                source: Source::Input(format!("corpus/{}", c.name)),
            })
            .collect()
    }

    fn tagger(&self, stage: Stage) -> Result<Dep> {
        let source = match self.upstream(stage, Stage::IrlTrain)? {
            Some(s) => s,
            None => self
                .input("tagger")
                .ok_or_else(|| anyhow!("stage `{stage}` needs a tagger: list `irl_train` before it or set inputs.tagger"))?,
        };
        Ok(Dep {
            what: "tagger",
            source,
        })
    }

    fn trained_encoder(&self, stage: Stage) -> Result<Dep> {
        let source = match self.upstream(stage, Stage::Pretrain)? {
            Some(s) => s,
            None => self.input("encoder").ok_or_else(|| {
                anyhow!("stage `{stage}` needs an encoder: list `pretrain` before it or set inputs.encoder")
            })?,
        };
        Ok(Dep {
            what: "encoder",
            source,
        })
    }

    /// The starting point for training: a given checkpoint, or nothing
    /// when the `[encoder]` block builds one.
    fn init_encoder(&self) -> Vec<Dep> {
        let mut deps = Vec::new();
        if let Some(s) = self.input("encoder") {
            deps.push(Dep {
                what: "init",
                source: s,
            });
        } else if let Some(s) = self.input("encoder_model_dir") {
            deps.push(Dep {
                what: "init",
                source: s,
            });
        }
        deps
    }

    fn datasets(&self, stage: Stage) -> Result<Vec<Dep>> {
        if self.config.inputs.datasets.is_empty() {
            bail!("stage `{stage}` needs at least one entry in inputs.datasets");
        }
        Ok(self
            .config
            .inputs
            .datasets
            .iter()
            .flat_map(|d| {
                [
                    Dep {
                        what: "dataset",
                        source: Source::Input(format!("dataset/{}", d.id)),
                    },
                    Dep {
                        what: "splits",
                        source: Source::Input(format!("splits/{}", d.id)),
                    },
                ]
            })
            .collect())
    }

    fn optional(&self, what: &'static str, key: &str) -> Vec<Dep> {
        self.input(key)
            .map(|source| Dep { what, source })
            .into_iter()
            .collect()
    }

    fn deps(&self, stage: Stage) -> Result<Vec<Dep>> {
        let c = self.config;
        let mut deps = Vec::new();
        match stage {
            Stage::Prepare => {
                if c.inputs.corpora.is_empty() {
                    bail!("stage `prepare` needs at least one entry in inputs.corpora");
                }
                deps.extend(self.raw_corpora());
            }
            Stage::IrlTrain => {
                deps.push(Dep {
                    what: "annotations",
                    source: self
                        .input("annotations")
                        .ok_or_else(|| anyhow!("stage `irl_train` needs inputs.annotations"))?,
                });
                deps.extend(self.optional("annotations_valid", "annotations_valid"));
                if c.irl.backend == TaggerKind::Transformer {
                    deps.extend(self.optional("irl_init", "irl_init"));
                }
            }
            Stage::Pseudo => {
                deps.extend(self.corpus(stage)?);
                deps.push(self.tagger(stage)?);
            }
            Stage::Pretrain => {
                let source = self.upstream(stage, Stage::Pseudo)?.ok_or_else(|| {
                    anyhow!("stage `pretrain` needs training triples: list `pseudo` before it")
                })?;
                deps.push(Dep {
                    what: "triples",
                    source,
                });
                deps.extend(self.init_encoder());
                deps.extend(self.optional("validation", "validation"));
            }
            Stage::Eval | Stage::Sweep => {
                deps.push(self.trained_encoder(stage)?);
                deps.extend(self.datasets(stage)?);
            }
            Stage::Overlap => {
                deps.push(self.trained_encoder(stage)?);
                deps.extend(self.corpus(stage)?);
                deps.extend(self.datasets(stage)?);
            }
            Stage::Ablation => {
                deps.extend(self.corpus(stage)?);
                deps.push(self.tagger(stage)?);
                deps.extend(self.init_encoder());
                deps.extend(self.optional("validation", "validation"));
                deps.extend(self.datasets(stage)?);
            }
        }
        Ok(deps)
    }
}

/// The configuration slice a stage's key depends on.
fn stage_settings(stage: Stage, c: &PipelineConfig) -> serde_json::Value {
    let corpora: Vec<_> = c
        .inputs
        .corpora
        .iter()
        .map(|x| serde_json::json!({"name": x.name, "format": x.format, "first_turn": x.first_turn, "cap": x.cap}))
        .collect();
    let datasets: Vec<_> = c
        .inputs
        .datasets
        .iter()
        .map(|d| serde_json::json!({"id": d.id, "format": d.format}))
        .collect();
    let encoder = if c.inputs.encoder.is_some() {
        serde_json::Value::Null
    } else {
        serde_json::to_value(&c.encoder).expect("plain config")
    };
    match stage {
        Stage::Prepare => serde_json::json!({ "corpora": corpora }),
        Stage::IrlTrain => serde_json::json!({ "irl": c.irl }),
        Stage::Pseudo => serde_json::json!({ "corpora": corpora }),
        Stage::Pretrain => serde_json::json!({ "pretrain": c.pretrain, "encoder": encoder }),
        Stage::Eval => serde_json::json!({ "eval": c.eval, "datasets": datasets }),
        Stage::Overlap => {
            serde_json::json!({ "eval": c.eval, "datasets": datasets, "corpora": corpora })
        }
        Stage::Sweep => {
            serde_json::json!({ "eval": c.eval, "sweep": c.sweep, "datasets": datasets })
        }
        Stage::Ablation => serde_json::json!({
            "ablation": c.ablation, "pretrain": c.pretrain, "encoder": encoder,
            "eval": c.eval, "datasets": datasets,
            "corpora": corpora,
        }),
    }
}

pub fn stage_seed(master: u64, stage: Stage) -> u64 {
    derive_seed(master, &format!("stage/{stage}"))
}

/// What a stage implementation sees.
pub(crate) struct StageCtx<'a> {
    pub config: &'a PipelineConfig,
    pub out: PathBuf,
    pub seed: u64,
    deps: BTreeMap<&'static str, PathBuf>,
    pub log: &'a logging::CaptureGuard,
}

impl StageCtx<'_> {
    pub fn dep(&self, what: &str) -> Result<&Path> {
        self.deps
            .get(what)
            .map(PathBuf::as_path)
            .with_context(|| format!("internal: no `{what}` input resolved"))
    }

    pub fn has(&self, what: &str) -> bool {
        self.deps.contains_key(what)
    }

    pub fn note(&self, msg: &str) {
        log::info!("{msg}");
        self.log.line(msg);
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Rerun every listed stage even when its key is unchanged.
    pub force: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub manifest: RunManifest,
}

impl RunOutcome {
    pub fn status(&self, stage: Stage) -> Option<StageStatus> {
        self.manifest.stage(stage).map(|s| s.status)
    }
}

/// Runs every listed stage in order. Stage dependencies and inputs are
/// checked before anything executes.
pub fn run_pipeline(config: &PipelineConfig, options: &RunOptions) -> Result<RunOutcome> {
    let run_dir = config.out_dir.clone();
    let prior = RunManifest::read(&run_dir).ok();
    let reusable: BTreeSet<Stage> = prior
        .iter()
        .flat_map(|m| &m.stages)
        .filter(|s| s.status != StageStatus::Failed && artifacts_intact(&run_dir, s))
        .map(|s| s.name)
        .collect();

    let planner = Planner {
        config,
        reusable: &reusable,
    };
    let mut plan = Vec::new();
    for &stage in &config.stages {
        plan.push((stage, planner.deps(stage)?));
    }

    let paths = input_paths(config);
    let mut inputs = BTreeMap::new();
    for (stage, deps) in &plan {
        for dep in deps {
            if let Source::Input(key) = &dep.source {
                if inputs.contains_key(key) {
                    continue;
                }
                let path = &paths[key];
                if !path.exists() {
                    bail!(
                        "stage `{stage}`: input {key} not found at {}",
                        path.display()
                    );
                }
                let sha256 = fingerprint_path(path)
                    .with_context(|| format!("stage `{stage}`: hashing {key}"))?;
                inputs.insert(
                    key.clone(),
                    FileRecord {
                        path: path.display().to_string(),
                        sha256,
                    },
                );
            }
        }
    }

    fs::create_dir_all(run_dir.join("artifacts"))
        .with_context(|| format!("creating {}", run_dir.display()))?;
    fs::create_dir_all(run_dir.join("logs"))?;
    let config_json = serde_json::to_value(config)?;
    let mut manifest = RunManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        tool: ToolInfo::current(),
        seed: config.seed,
        config_sha256: sha256_hex(serde_json::to_string(&config_json)?.as_bytes()),
        config: config_json,
        inputs,
        stages: Vec::new(),
    };
    let carried: Vec<StageRecord> = prior
        .iter()
        .flat_map(|m| &m.stages)
        .filter(|s| !config.contains(s.name) && s.status != StageStatus::Failed)
        .map(|s| {
            let mut s = s.clone();
            if reusable.contains(&s.name) {
                s.status = StageStatus::Kept;
            } else {
                s.status = StageStatus::Stale;
                let dir = run_dir.join("artifacts").join(s.name.name());
                s.artifacts = hash_tree(&run_dir, &dir).unwrap_or_default();
            }
            s
        })
        .collect();
    let mut available: BTreeMap<Stage, StageRecord> = carried
        .iter()
        .filter(|s| s.status == StageStatus::Kept)
        .map(|s| (s.name, s.clone()))
        .collect();
    let publish = |manifest: &mut RunManifest, done: &[StageRecord]| -> Result<()> {
        manifest.stages = done.iter().chain(&carried).cloned().collect();
        manifest.write(&run_dir)
    };

    let mut done: Vec<StageRecord> = Vec::new();
    for (stage, deps) in plan {
        let seed = stage_seed(config.seed, stage);
        let mut fingerprints = BTreeMap::new();
        let mut dep_paths = BTreeMap::new();
        for dep in &deps {
            let (fp, path) = match &dep.source {
                Source::Stage(s) => (available[s].output_digest(), stage_output(&run_dir, *s)),
                Source::Input(key) => (manifest.inputs[key].sha256.clone(), paths[key].clone()),
            };
            let name = match &dep.source {
                Source::Input(key) => key.clone(),
                Source::Stage(_) => dep.what.to_string(),
            };
            fingerprints.insert(name, fp);
            dep_paths.entry(dep.what).or_insert(path);
        }
        let key_body = serde_json::json!({
            "tool": ToolInfo::current(),
            "stage": stage,
            "seed": seed,
            "settings": stage_settings(stage, config),
            "inputs": fingerprints,
        });
        let key = sha256_hex(serde_json::to_string(&key_body)?.as_bytes());

        let cached = prior
            .as_ref()
            .and_then(|m| m.stage(stage))
            .filter(|r| !options.force && r.key == key && reusable.contains(&stage))
            .cloned();
        let record = match cached {
            Some(mut r) => {
                log::info!("stage `{stage}`: up to date");
                r.status = StageStatus::Cached;
                r
            }
            None => {
                let record = execute(config, &run_dir, stage, seed, key, dep_paths);
                if record.status == StageStatus::Failed {
                    let msg = record.error.clone().unwrap_or_default();
                    done.push(record);
                    publish(&mut manifest, &done)?;
                    return Err(anyhow!("stage `{stage}` failed: {msg}"));
                }
                record
            }
        };
        available.insert(stage, record.clone());
        done.push(record);
        publish(&mut manifest, &done)?;
    }
    Ok(RunOutcome { run_dir, manifest })
}

fn execute(
    config: &PipelineConfig,
    run_dir: &Path,
    stage: Stage,
    seed: u64,
    key: String,
    deps: BTreeMap<&'static str, PathBuf>,
) -> StageRecord {
    let out = run_dir.join("artifacts").join(stage.name());
    let log_path = run_dir.join("logs").join(format!("{stage}.log"));
    let mut record = StageRecord {
        name: stage,
        key,
        seed,
        status: StageStatus::Ran,
        artifacts: BTreeMap::new(),
        log: None,
        metrics: serde_json::Value::Null,
        error: None,
    };
    let result = (|| -> Result<serde_json::Value> {
        if out.exists() {
            fs::remove_dir_all(&out).with_context(|| format!("clearing {}", out.display()))?;
        }
        fs::create_dir_all(&out)?;
        let file = fs::File::create(&log_path)
            .with_context(|| format!("creating {}", log_path.display()))?;
        let guard = logging::capture(file);
        let ctx = StageCtx {
            config,
            out: out.clone(),
            seed,
            deps,
            log: &guard,
        };
        ctx.note(&format!("stage {stage}: seed {seed}"));
        let started = Instant::now();
        let result = stages::run(stage, &ctx);
        match &result {
            Ok(_) => ctx.note(&format!("stage {stage}: done in {:.2?}", started.elapsed())),
            Err(e) => {
                log::error!("stage {stage}: {e:#}");
                guard.line(&format!("stage {stage}: failed: {e:#}"));
            }
        }
        result
    })();
    match result {
        Ok(metrics) => {
            record.metrics = metrics;
            match hash_tree(run_dir, &out) {
                Ok(a) => record.artifacts = a,
                Err(e) => {
                    record.status = StageStatus::Failed;
                    record.error = Some(format!("{e:#}"));
                }
            }
        }
        Err(e) => {
            record.status = StageStatus::Failed;
            record.error = Some(format!("{e:#}"));
            let _ = fs::remove_dir_all(&out);
        }
    }
    if let Ok(sha256) = pie_core::fingerprint::file_sha256(&log_path) {
        let rel = log_path
            .strip_prefix(run_dir)
            .map(rel_string)
            .unwrap_or_default();
        record.log = Some(FileRecord { path: rel, sha256 });
    }
    record
}
