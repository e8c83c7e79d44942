use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use pie_core::contrastive::{
    pretrain, pretrain_with_validation, PretrainConfig, PretrainManifest, TrainingLog,
    ValidationSet,
};
use pie_core::corpus::{
    cap_per_intent, intent_set, load_class_splits, select_first_turns, write_corpus_jsonl,
    ClassSplit, CorpusFormat, Utterance,
};
use pie_core::episodes::{
    plot_sweep, run_eval, run_overlap_controlled_eval, sweep, write_sweep_csv, EvalReport,
};
use pie_core::irl::{evaluate_tagger, load_annotations, Annotation, IrlTagger};
use pie_core::pseudo::{build_triples, read_triples_jsonl, write_triples_jsonl, TrainingTriple};
use pie_core::rng::derive_seed;
use serde::Serialize;
use serde_json::json;

use super::config::{DatasetInput, Stage};
use super::{stage_seed, StageCtx, CORPUS_FILE, ENCODER_DIR, TAGGER_DIR, TRIPLES_FILE};
use crate::io::{read_corpus, write_json};
use crate::models::{AnyEncoder, AnyTagger};

pub(super) fn run(stage: Stage, ctx: &StageCtx) -> Result<serde_json::Value> {
    match stage {
        Stage::Prepare => prepare(ctx),
        Stage::IrlTrain => irl_train(ctx),
        Stage::Pseudo => pseudo(ctx),
        Stage::Pretrain => pretrain_stage(ctx),
        Stage::Eval => eval(ctx),
        Stage::Sweep => sweep_stage(ctx),
        Stage::Overlap => overlap(ctx),
        Stage::Ablation => ablation(ctx),
    }
}

/// Loads, filters and caps every configured corpus, tagging each utterance
/// with its corpus name.
fn prepared_corpus(ctx: &StageCtx, seed: u64) -> Result<(Vec<Utterance>, serde_json::Value)> {
    let mut all = Vec::new();
    let mut per_corpus = BTreeMap::new();
    for c in &ctx.config.inputs.corpora {
        let mut utts = read_corpus(&c.path, c.format)?;
        let loaded = utts.len();
        if c.first_turn {
            utts = select_first_turns(&utts).with_context(|| format!("corpus `{}`", c.name))?;
        }
        let before = utts.len();
        utts.retain(|u| u.gold_intent.is_some());
        if utts.len() < before {
            ctx.note(&format!(
                "corpus {}: dropped {} unlabelled utterances",
                c.name,
                before - utts.len()
            ));
        }
        if let Some(cap) = c.cap {
            utts = cap_per_intent(&utts, cap, derive_seed(seed, &format!("cap/{}", c.name)))?;
        }
        let utts: Vec<Utterance> = utts
            .into_iter()
            .map(|u| u.with_dataset(c.name.clone()))
            .collect();
        let intents = intent_set(&utts)?;
        ctx.note(&format!(
            "corpus {}: {loaded} loaded, {} kept, {} intents",
            c.name,
            utts.len(),
            intents.len()
        ));
        per_corpus.insert(
            c.name.clone(),
            json!({"loaded": loaded, "utterances": utts.len(), "intents": intents.len()}),
        );
        all.extend(utts);
    }
    if all.is_empty() {
        bail!("the prepared corpus is empty");
    }
    Ok((
        all,
        per_corpus
            .into_iter()
            .collect::<serde_json::Map<_, _>>()
            .into(),
    ))
}

/// The `prepare` output when available, otherwise the same preparation
/// done in memory.
fn pretraining_corpus(ctx: &StageCtx) -> Result<Vec<Utterance>> {
    if ctx.has("corpus") {
        return read_corpus(ctx.dep("corpus")?, Some(CorpusFormat::Jsonl));
    }
    Ok(prepared_corpus(ctx, stage_seed(ctx.config.seed, Stage::Prepare))?.0)
}

fn prepare(ctx: &StageCtx) -> Result<serde_json::Value> {
    let (all, per_corpus) = prepared_corpus(ctx, ctx.seed)?;
    write_corpus_jsonl(ctx.out.join(CORPUS_FILE), &all)?;
    let intents: Vec<String> = intent_set(&all)?.into_iter().map(|i| i.raw).collect();
    write_json(&ctx.out.join("intents.json"), &intents)?;
    Ok(json!({"utterances": all.len(), "intents": intents.len(), "corpora": per_corpus}))
}

fn irl_train(ctx: &StageCtx) -> Result<serde_json::Value> {
    let train = load_annotations(ctx.dep("annotations")?)?;
    let valid = if ctx.has("annotations_valid") {
        load_annotations(ctx.dep("annotations_valid")?)?
    } else {
        Vec::new()
    };
    ctx.note(&format!(
        "tagger: {} training, {} validation annotations",
        train.len(),
        valid.len()
    ));
    let mut spec = ctx.config.irl.clone();
    if ctx.has("irl_init") {
        spec.init = Some(ctx.dep("irl_init")?.to_path_buf());
    }
    let (tagger, log) = spec.train(&train, &valid, ctx.seed)?;
    tagger.save(ctx.out.join(TAGGER_DIR))?;
    write_json(&ctx.out.join("training_log.json"), &log)?;
    let mut metrics =
        json!({"selected_epoch": log.selected_epoch, "train_annotations": train.len()});
    if !valid.is_empty() {
        let report = score_tagger(&tagger, &valid)?;
        ctx.note(&format!("validation report:\n{report}"));
        write_json(&ctx.out.join("valid_report.json"), &report)?;
        metrics["valid_micro_f1"] = json!(report.micro.f1);
    }
    Ok(metrics)
}

fn score_tagger<T: IrlTagger>(
    tagger: &T,
    data: &[Annotation],
) -> Result<pie_core::irl::TaggerReport> {
    let gold: Vec<_> = data.iter().map(Annotation::spans).collect();
    let pred = data
        .iter()
        .map(|a| tagger.tag(&a.tokens))
        .collect::<pie_core::Result<Vec<_>>>()?;
    Ok(evaluate_tagger(&gold, &pred)?)
}

fn pseudo(ctx: &StageCtx) -> Result<serde_json::Value> {
    let utts = pretraining_corpus(ctx)?;
    let tagger = AnyTagger::load(ctx.dep("tagger")?)?;
    let (triples, summary) = build_triples(&utts, &tagger, ctx.seed)?;
    ctx.note(&format!(
        "pseudo: kept {} of {} utterances",
        summary.kept, summary.input
    ));
    if triples.is_empty() {
        bail!("the tagger yielded no pseudo intent for any utterance");
    }
    write_triples_jsonl(ctx.out.join(TRIPLES_FILE), &triples)?;
    write_json(&ctx.out.join("summary.json"), &summary)?;
    Ok(serde_json::to_value(summary)?)
}

/// Texts a freshly built transformer needs in its vocabulary.
fn vocabulary(triples: &[TrainingTriple], extra: &[Utterance]) -> Vec<String> {
    let mut texts: Vec<String> = Vec::new();
    for t in triples {
        texts.push(t.utterance.text.clone());
        texts.push(t.gold_intent.display.clone());
        texts.push(t.pseudo_intent.text.clone());
    }
    for u in extra {
        texts.push(u.text.clone());
        if let Some(i) = &u.gold_intent {
            texts.push(
                pie_core::corpus::normalize_intent_name(i)
                    .map(|n| n.display)
                    .unwrap_or_default(),
            );
        }
    }
    texts.retain(|t| !t.trim().is_empty());
    texts
}

fn initial_encoder(
    ctx: &StageCtx,
    triples: &[TrainingTriple],
    extra: &[Utterance],
) -> Result<AnyEncoder> {
    if ctx.has("init") && ctx.config.inputs.encoder.is_some() {
        return AnyEncoder::load(ctx.dep("init")?);
    }
    let vocab = vocabulary(triples, extra);
    let refs: Vec<&str> = vocab.iter().map(String::as_str).collect();
    ctx.config
        .encoder
        .build(&refs, derive_seed(ctx.seed, "init"))
}

fn validation_set(ctx: &StageCtx) -> Result<Option<ValidationSet>> {
    if !ctx.has("validation") {
        return Ok(None);
    }
    let utterances: Vec<Utterance> = read_corpus(ctx.dep("validation")?, None)?
        .into_iter()
        .filter(|u| u.gold_intent.is_some())
        .collect();
    let intents = intent_set(&utterances)?;
    if intents.len() < 2 {
        bail!("the validation corpus needs at least two intents");
    }
    Ok(Some(ValidationSet {
        utterances,
        intents,
        metric: ctx.config.eval.metric,
    }))
}

fn train(
    model: &mut AnyEncoder,
    triples: &[TrainingTriple],
    config: &PretrainConfig,
    valid: Option<&ValidationSet>,
) -> Result<TrainingLog> {
    Ok(match valid {
        Some(v) => pretrain_with_validation(model, triples, config, v)?,
        None => pretrain(model, triples, config)?,
    })
}

fn pretrain_stage(ctx: &StageCtx) -> Result<serde_json::Value> {
    let triples = read_triples_jsonl(ctx.dep("triples")?)?;
    let valid = validation_set(ctx)?;
    let extra = valid
        .as_ref()
        .map(|v| v.utterances.clone())
        .unwrap_or_default();
    let mut model = initial_encoder(ctx, &triples, &extra)?;
    let config = PretrainConfig {
        seed: derive_seed(ctx.seed, "train"),
        ..ctx.config.pretrain
    };
    ctx.note(&format!(
        "pretrain: {} triples, {} parameters, {} epochs",
        triples.len(),
        pie_core::encoder::TrainableEncoder::parameter_count(&model),
        config.epochs
    ));
    let log = train(&mut model, &triples, &config, valid.as_ref())?;
    model.save(ctx.out.join(ENCODER_DIR))?;
    let manifest = PretrainManifest::new(&config, &triples, &log);
    write_json(&ctx.out.join("pretrain_manifest.json"), &manifest)?;
    write_json(&ctx.out.join("training_log.json"), &log)?;
    Ok(serde_json::to_value(&manifest)?)
}

struct Dataset {
    id: String,
    utterances: Vec<Utterance>,
    splits: Vec<ClassSplit>,
}

fn load_dataset(d: &DatasetInput) -> Result<Dataset> {
    let utterances = read_corpus(&d.path, d.format)?;
    let splits =
        load_class_splits(&d.splits).with_context(|| format!("dataset `{}` splits", d.id))?;
    Ok(Dataset {
        id: d.id.clone(),
        utterances,
        splits,
    })
}

fn datasets(ctx: &StageCtx) -> Result<Vec<Dataset>> {
    ctx.config
        .inputs
        .datasets
        .iter()
        .map(load_dataset)
        .collect()
}

fn summary(report: &EvalReport) -> serde_json::Value {
    json!({"mean": report.mean, "std": report.std})
}

fn eval(ctx: &StageCtx) -> Result<serde_json::Value> {
    let model = AnyEncoder::load(ctx.dep("encoder")?)?;
    let mut metrics = serde_json::Map::new();
    for d in datasets(ctx)? {
        let config = ctx.config.eval.to_config(&d.id, ctx.seed);
        let report = run_eval(&model, &d.utterances, &d.splits, &config)
            .with_context(|| format!("dataset `{}`", d.id))?;
        ctx.note(&format!(
            "eval {}: {:.2} ± {:.2}",
            d.id, report.mean, report.std
        ));
        write_json(&ctx.out.join(format!("{}.json", d.id)), &report)?;
        metrics.insert(d.id, summary(&report));
    }
    Ok(metrics.into())
}

fn sweep_stage(ctx: &StageCtx) -> Result<serde_json::Value> {
    let model = AnyEncoder::load(ctx.dep("encoder")?)?;
    let s = &ctx.config.sweep;
    let mut metrics = serde_json::Map::new();
    for d in datasets(ctx)? {
        let base = ctx.config.eval.to_config(&d.id, ctx.seed);
        let points = sweep(&model, &d.utterances, &d.splits, s.axis, &s.values, &base)
            .with_context(|| format!("dataset `{}`", d.id))?;
        let dir = ctx.out.join(&d.id);
        std::fs::create_dir_all(&dir)?;
        write_sweep_csv(dir.join("sweep.csv"), &points)?;
        plot_sweep(dir.join("sweep.png"), &points)?;
        write_json(&dir.join("sweep.json"), &points)?;
        let row: Vec<_> = points
            .iter()
            .map(|p| json!({"value": p.value, "mean": p.report.mean, "std": p.report.std}))
            .collect();
        metrics.insert(d.id, row.into());
    }
    Ok(metrics.into())
}

fn overlap(ctx: &StageCtx) -> Result<serde_json::Value> {
    let model = AnyEncoder::load(ctx.dep("encoder")?)?;
    let corpus = pretraining_corpus(ctx)?;
    let pretrain_intents = intent_set(&corpus)?;
    let mut metrics = serde_json::Map::new();
    for d in datasets(ctx)? {
        let config = ctx.config.eval.to_config(&d.id, ctx.seed);
        let report = run_overlap_controlled_eval(
            &model,
            &d.utterances,
            &d.splits,
            &pretrain_intents,
            &config,
        )
        .with_context(|| format!("dataset `{}`", d.id))?;
        ctx.note(&format!(
            "overlap {}: {} of {} intents matched; {:.2} -> {:.2}",
            d.id,
            report.removed.len(),
            report.dataset_intents,
            report.all.mean,
            report.overlap_removed.mean
        ));
        write_json(&ctx.out.join(format!("{}.json", d.id)), &report)?;
        metrics.insert(
            d.id,
            json!({"matched": report.matched.len(), "all": summary(&report.all), "overlap_removed": summary(&report.overlap_removed)}),
        );
    }
    Ok(metrics.into())
}

#[derive(Serialize)]
struct AblationCell {
    corpus: String,
    loss: String,
    triples: usize,
    reports: BTreeMap<String, EvalReport>,
    average: f64,
}

fn ablation(ctx: &StageCtx) -> Result<serde_json::Value> {
    let corpus = pretraining_corpus(ctx)?;
    let tagger = AnyTagger::load(ctx.dep("tagger")?)?;
    let valid = validation_set(ctx)?;
    let extra = valid
        .as_ref()
        .map(|v| v.utterances.clone())
        .unwrap_or_default();
    let data = datasets(ctx)?;
    let settings = &ctx.config.ablation;
    let mut cells = Vec::new();
    for subset in &settings.corpora {
        let utts: Vec<Utterance> = corpus
            .iter()
            .filter(|u| subset.include.is_empty() || subset.include.contains(&u.dataset_id))
            .cloned()
            .collect();
        if utts.is_empty() {
            bail!("ablation subset `{}` selects no utterances", subset.name);
        }
        let (triples, _) = build_triples(
            &utts,
            &tagger,
            derive_seed(ctx.seed, &format!("triples/{}", subset.name)),
        )?;
        if triples.len() < 2 {
            bail!(
                "ablation subset `{}` yields {} triples",
                subset.name,
                triples.len()
            );
        }
        for loss in &settings.losses {
            let mut model = initial_encoder(ctx, &triples, &extra)?;
            let config = PretrainConfig {
                seed: derive_seed(ctx.seed, "train"),
                loss: loss.loss,
                ..ctx.config.pretrain
            };
            train(&mut model, &triples, &config, valid.as_ref())?;
            let mut reports = BTreeMap::new();
            for d in &data {
                let eval = ctx
                    .config
                    .eval
                    .to_config(&d.id, derive_seed(ctx.seed, "eval"));
                reports.insert(
                    d.id.clone(),
                    run_eval(&model, &d.utterances, &d.splits, &eval)?,
                );
            }
            let average = reports.values().map(|r| r.mean).sum::<f64>() / reports.len() as f64;
            ctx.note(&format!(
                "ablation {} / {}: average {average:.2}",
                subset.name, loss.name
            ));
            cells.push(AblationCell {
                corpus: subset.name.clone(),
                loss: loss.name.clone(),
                triples: triples.len(),
                reports,
                average,
            });
        }
    }
    write_json(&ctx.out.join("grid.json"), &cells)?;
    write_grid_csv(
        &ctx.out.join("grid.csv"),
        &data.iter().map(|d| d.id.clone()).collect::<Vec<_>>(),
        &cells,
    )?;
    let rows: Vec<_> = cells
        .iter()
        .map(|c| json!({"corpus": c.corpus, "loss": c.loss, "average": c.average}))
        .collect();
    Ok(rows.into())
}

fn write_grid_csv(path: &Path, ids: &[String], cells: &[AblationCell]) -> Result<()> {
    let mut body = String::from("corpus,loss,triples");
    for id in ids {
        body.push_str(&format!(",{id}"));
    }
    body.push_str(",average\n");
    for c in cells {
        body.push_str(&format!("{},{},{}", c.corpus, c.loss, c.triples));
        for id in ids {
            body.push_str(&format!(",{:.4}", c.reports[id].mean));
        }
        body.push_str(&format!(",{:.4}\n", c.average));
    }
    std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}
