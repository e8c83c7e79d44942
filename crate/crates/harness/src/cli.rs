//! The `pie` command line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pie_core::contrastive::{PretrainConfig, PretrainManifest, ValidationSet};
use pie_core::corpus::{
    cap_per_intent, intent_set, load_class_splits, match_intents, normalize_intent_name,
    select_first_turns, write_corpus_jsonl, CorpusFormat, Utterance,
};
use pie_core::encoder::{SentenceEncoder, TrainableEncoder};
use pie_core::episodes::{
    plot_sweep, run_eval, run_overlap_controlled_eval, sweep, write_sweep_csv, EvalConfig,
    SweepAxis, WaySpec,
};
use pie_core::fingerprint::file_sha256;
use pie_core::irl::{
    evaluate_tagger, load_annotations, read_spans_jsonl, write_spans_jsonl, IrlTagger, SpanRecord,
};
use pie_core::proto::{build_prototypes, classify, Metric, SupportSet};
use pie_core::pseudo::{build_triples, read_triples_jsonl, write_triples_jsonl};
use pie_core::text::tokenize;
use serde_json::json;

use crate::io::{read_config, read_corpus, read_input_lines, write_json, write_matrix, InputLine};
use crate::models::{AnyEncoder, AnyTagger, EncoderSpec, TaggerKind, TaggerSpec};
use crate::pipeline::{run_pipeline, PipelineConfig, RunOptions};

#[derive(Debug, Parser)]
#[command(
    name = "pie",
    version,
    about = "Intent-aware encoder pre-training and few-shot intent evaluation"
)]
pub struct Cli {
    /// Debug-level logging (RUST_LOG overrides).
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Corpus preparation and intent overlap.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Encoder checkpoints.
    #[command(subcommand)]
    Encoder(EncoderCmd),
    /// Embed texts into a float32 matrix.
    Encode(EncodeArgs),
    /// Intent role labelling.
    #[command(subcommand)]
    Irl(IrlCmd),
    /// Pseudo intent generation.
    #[command(subcommand)]
    Pseudo(PseudoCmd),
    /// Contrastive pre-training.
    Pretrain(PretrainArgs),
    /// Classify one query against support examples.
    Classify(ClassifyArgs),
    /// Episodic evaluation over class splits.
    Eval(EvalArgs),
    /// Evaluation along the K or N axis.
    Sweep(SweepArgs),
    /// Run a pipeline config.
    Run(RunArgs),
}

#[derive(Debug, Subcommand)]
pub enum CorpusCmd {
    /// Load, filter and cap a corpus, writing JSONL.
    Prepare(PrepareArgs),
    /// Intent names of two corpora that match after stemming.
    Overlap(OverlapArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    /// jsonl, csv or dialogue-json; guessed from the extension when omitted.
    #[arg(long)]
    pub format: Option<CorpusFormat>,
    /// Keep only the first turn of each dialogue.
    #[arg(long)]
    pub first_turn: bool,
    /// At most this many utterances per intent.
    #[arg(long)]
    pub cap: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Overrides the dataset id, which defaults to each file's stem.
    #[arg(long)]
    pub dataset_id: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct OverlapArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub format_a: Option<CorpusFormat>,
    #[arg(long)]
    pub format_b: Option<CorpusFormat>,
    /// Also write the JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum EncoderCmd {
    /// Write a freshly initialised encoder checkpoint.
    Init(InitArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum BackendArg {
    Toy,
    Transformer,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[arg(long, value_enum, default_value_t = BackendArg::Toy)]
    pub backend: BackendArg,
    /// Toy: output dimension.
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    /// Toy: hash bins.
    #[arg(long, default_value_t = 4096)]
    pub bins: usize,
    /// Transformer: model directory to import.
    #[arg(long)]
    pub from: Option<PathBuf>,
    /// Transformer: corpus whose texts and intent names form the vocabulary
    /// of a random model.
    #[arg(long)]
    pub vocab_from: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = pie_transformer::DEFAULT_MAX_LENGTH)]
    pub max_length: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// JSONL with a `text` field, or one text per line.
    #[arg(long)]
    pub input: PathBuf,
    /// Float32 matrix; the shape goes to `<out>.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum IrlCmd {
    /// Train a tagger on annotations.
    Train(IrlTrainArgs),
    /// Tag texts, writing spans JSONL.
    Tag(IrlTagArgs),
    /// Score predicted spans against gold annotations.
    Eval(IrlEvalArgs),
}

#[derive(Debug, Args)]
pub struct IrlTrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = TaggerKind::Hashed)]
    pub backend: TaggerKind,
    /// Transformer: encoder weights to start from.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct IrlTagArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// JSONL with `text` or `tokens`, or one text per line.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct IrlEvalArgs {
    /// Annotations (JSONL or CoNLL).
    #[arg(long)]
    pub gold: PathBuf,
    /// Spans JSONL from `pie irl tag`.
    #[arg(long)]
    pub pred: PathBuf,
    /// Also write the report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum PseudoCmd {
    /// Tag a labelled corpus and write training triples.
    Build(PseudoBuildArgs),
}

#[derive(Debug, Args)]
pub struct PseudoBuildArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub format: Option<CorpusFormat>,
    #[arg(long)]
    pub tagger: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub triples: PathBuf,
    #[arg(long)]
    pub init: PathBuf,
    /// JSON or TOML training config; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Labelled corpus for choosing the best epoch.
    #[arg(long)]
    pub validation: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Labelled JSONL; examples are grouped by intent.
    #[arg(long)]
    pub supports: PathBuf,
    /// Extra label-only intents (require --label-support).
    #[arg(long = "intent")]
    pub intents: Vec<String>,
    #[arg(long)]
    pub query: String,
    #[arg(long)]
    pub label_support: bool,
    #[arg(long, default_value_t = Metric::Cosine)]
    pub metric: Metric,
    /// Write the prototypes as JSON.
    #[arg(long)]
    pub dump_prototypes: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EpisodeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub format: Option<CorpusFormat>,
    /// Defaults to the dataset file stem.
    #[arg(long)]
    pub dataset_id: Option<String>,
    #[arg(long)]
    pub splits: PathBuf,
    /// Number of ways, or `all`.
    #[arg(long, default_value = "5")]
    pub n: WaySpec,
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    #[arg(long, default_value_t = 5)]
    pub q: usize,
    #[arg(long, default_value_t = 600)]
    pub episodes: usize,
    #[arg(long)]
    pub label_support: bool,
    #[arg(long, default_value_t = Metric::Cosine)]
    pub metric: Metric,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub episodes: EpisodeArgs,
    /// Pre-training corpus: also report accuracy with overlapping intents removed.
    #[arg(long)]
    pub overlap_with: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub episodes: EpisodeArgs,
    #[arg(long, default_value_t = SweepAxis::K)]
    pub axis: SweepAxis,
    /// Comma-separated, ascending.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,4,8")]
    pub values: Vec<WaySpec>,
    /// Receives sweep.csv, sweep.png and sweep.json.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `out_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Rerun stages even when their inputs are unchanged.
    #[arg(long)]
    pub force: bool,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Corpus(CorpusCmd::Prepare(a)) => corpus_prepare(a),
        Command::Corpus(CorpusCmd::Overlap(a)) => corpus_overlap(a),
        Command::Encoder(EncoderCmd::Init(a)) => encoder_init(a),
        Command::Encode(a) => encode(a),
        Command::Irl(IrlCmd::Train(a)) => irl_train(a),
        Command::Irl(IrlCmd::Tag(a)) => irl_tag(a),
        Command::Irl(IrlCmd::Eval(a)) => irl_eval(a),
        Command::Pseudo(PseudoCmd::Build(a)) => pseudo_build(a),
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::Classify(a) => classify_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Run(a) => run_cmd(a),
    }
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn corpus_prepare(a: PrepareArgs) -> Result<()> {
    let mut all = Vec::new();
    for path in &a.input {
        let mut utts = read_corpus(path, a.format)?;
        if let Some(id) = &a.dataset_id {
            utts = utts
                .into_iter()
                .map(|u| u.with_dataset(id.clone()))
                .collect();
        }
        all.extend(utts);
    }
    let loaded = all.len();
    if a.first_turn {
        all = select_first_turns(&all)?;
    }
    if let Some(cap) = a.cap {
        all = cap_per_intent(&all, cap, a.seed)?;
    }
    write_corpus_jsonl(&a.out, &all)?;
    let intents = intent_set(&all)?;
    print_json(
        &json!({"loaded": loaded, "written": all.len(), "intents": intents.len(), "out": a.out}),
    )
}

fn corpus_overlap(a: OverlapArgs) -> Result<()> {
    let ia = intent_set(&read_corpus(&a.a, a.format_a)?)?;
    let ib = intent_set(&read_corpus(&a.b, a.format_b)?)?;
    let pairs = match_intents(&ia, &ib);
    let report = json!({
        "pairs": pairs.iter().map(|(x, y)| json!({"a": x.raw, "b": y.raw})).collect::<Vec<_>>(),
        "count": pairs.len(),
        "a_intents": ia.len(),
        "b_intents": ib.len(),
    });
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    print_json(&report)
}

fn encoder_init(a: InitArgs) -> Result<()> {
    let spec = match a.backend {
        BackendArg::Toy => EncoderSpec::Toy {
            dim: a.dim,
            hash_bins: a.bins,
        },
        BackendArg::Transformer => EncoderSpec::Transformer {
            model_dir: a.from.clone(),
            hidden: a.hidden,
            layers: a.layers,
            heads: a.heads,
            max_length: a.max_length,
        },
    };
    let mut vocab = Vec::new();
    if a.backend == BackendArg::Transformer && a.from.is_none() {
        let path = a
            .vocab_from
            .as_ref()
            .context("a random transformer needs --vocab-from (or --from)")?;
        for u in read_corpus(path, None)? {
            if let Some(i) = &u.gold_intent {
                vocab.push(normalize_intent_name(i)?.display);
            }
            vocab.push(u.text);
        }
    }
    let refs: Vec<&str> = vocab.iter().map(String::as_str).collect();
    let model = spec.build(&refs, a.seed)?;
    model.save(&a.out)?;
    print_json(
        &json!({"backend": model.backend(), "dim": model.dim(), "parameters": model.parameter_count(), "out": a.out}),
    )
}

fn encode(a: EncodeArgs) -> Result<()> {
    let model = AnyEncoder::load(&a.model)?;
    let texts: Vec<String> = read_input_lines(&a.input)?
        .into_iter()
        .map(|l| match l {
            InputLine::Text(t) => t,
            InputLine::Tokens(t) => t.join(" "),
        })
        .collect();
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let vectors = model.embed(&refs)?;
    let shape = write_matrix(&a.out, &vectors)?;
    print_json(&serde_json::to_value(shape)?)
}

fn irl_train(a: IrlTrainArgs) -> Result<()> {
    let train = load_annotations(&a.data)?;
    let valid = match &a.val {
        Some(p) => load_annotations(p)?,
        None => Vec::new(),
    };
    let mut spec = TaggerSpec {
        backend: a.backend,
        init: a.init.clone(),
        ..TaggerSpec::default()
    };
    if let Some(e) = a.epochs {
        spec.epochs = e;
    }
    if let Some(lr) = a.lr {
        spec.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        spec.batch_size = b;
    }
    let (tagger, log) = spec.train(&train, &valid, a.seed)?;
    tagger.save(&a.out)?;
    write_json(&a.out.join("training_log.json"), &log)?;
    let last = log.epochs.last();
    print_json(&json!({
        "selected_epoch": log.selected_epoch,
        "train_f1": last.map(|e| e.train_f1),
        "valid_f1": log.epochs.iter().find(|e| e.epoch == log.selected_epoch).and_then(|e| e.valid_f1),
        "out": a.out,
    }))
}

fn irl_tag(a: IrlTagArgs) -> Result<()> {
    let tagger = AnyTagger::load(&a.model)?;
    let mut records = Vec::new();
    for line in read_input_lines(&a.input)? {
        let tokens = match line {
            InputLine::Text(t) => tokenize(&t),
            InputLine::Tokens(t) => t,
        };
        let spans = tagger.tag(&tokens)?;
        records.push(SpanRecord { tokens, spans });
    }
    write_spans_jsonl(&a.out, &records)?;
    print_json(&json!({"tagged": records.len(), "out": a.out}))
}

fn irl_eval(a: IrlEvalArgs) -> Result<()> {
    let gold = load_annotations(&a.gold)?;
    let pred = read_spans_jsonl(&a.pred)?;
    if gold.len() != pred.len() {
        bail!(
            "{} gold utterances but {} predicted",
            gold.len(),
            pred.len()
        );
    }
    for (i, (g, p)) in gold.iter().zip(&pred).enumerate() {
        if g.tokens.len() != p.tokens.len() {
            bail!(
                "utterance {}: {} gold tokens but {} predicted",
                i + 1,
                g.tokens.len(),
                p.tokens.len()
            );
        }
    }
    let gold_spans: Vec<_> = gold.iter().map(|g| g.spans()).collect();
    let pred_spans: Vec<_> = pred.into_iter().map(|p| p.spans).collect();
    let report = evaluate_tagger(&gold_spans, &pred_spans)?;
    if let Some(path) = &a.json {
        write_json(path, &report)?;
    }
    println!("{report}");
    Ok(())
}

fn pseudo_build(a: PseudoBuildArgs) -> Result<()> {
    let utts = read_corpus(&a.corpus, a.format)?;
    let tagger = AnyTagger::load(&a.tagger)?;
    let (triples, summary) = build_triples(&utts, &tagger, a.seed)?;
    write_triples_jsonl(&a.out, &triples)?;
    print_json(&serde_json::to_value(summary)?)
}

fn pretrain_cmd(a: PretrainArgs) -> Result<()> {
    let config: PretrainConfig = match &a.config {
        Some(p) => read_config(p)?,
        None => PretrainConfig::default(),
    };
    let triples = read_triples_jsonl(&a.triples)?;
    let mut model = AnyEncoder::load(&a.init)?;
    let log = match &a.validation {
        Some(p) => {
            let utterances: Vec<Utterance> = read_corpus(p, None)?
                .into_iter()
                .filter(|u| u.gold_intent.is_some())
                .collect();
            let intents = intent_set(&utterances)?;
            let v = ValidationSet {
                utterances,
                intents,
                metric: Metric::Cosine,
            };
            pie_core::contrastive::pretrain_with_validation(&mut model, &triples, &config, &v)?
        }
        None => pie_core::contrastive::pretrain(&mut model, &triples, &config)?,
    };
    model.save(&a.out)?;
    let manifest = PretrainManifest::new(&config, &triples, &log);
    let mut record = serde_json::to_value(&manifest)?;
    record["triples_file_sha256"] = json!(file_sha256(&a.triples)?);
    record["init"] = json!({"path": a.init, "sha256": crate::pipeline::fingerprint_path(&a.init)?});
    write_json(&a.out.join("pretrain_manifest.json"), &record)?;
    write_json(&a.out.join("training_log.json"), &log)?;
    print_json(&json!({
        "steps": manifest.steps,
        "first_step_loss": manifest.first_step_loss,
        "final_epoch_mean_loss": manifest.final_epoch_mean_loss,
        "selected_epoch": manifest.selected_epoch,
        "out": a.out,
    }))
}

fn classify_cmd(a: ClassifyArgs) -> Result<()> {
    let model = AnyEncoder::load(&a.model)?;
    let mut groups: BTreeMap<String, Vec<Utterance>> = BTreeMap::new();
    for u in read_corpus(&a.supports, None)? {
        let intent = u
            .gold_intent
            .clone()
            .with_context(|| format!("support {:?} has no intent", u.text))?;
        groups.entry(intent).or_default().push(u);
    }
    for i in &a.intents {
        groups.entry(i.clone()).or_default();
    }
    if groups.values().any(Vec::is_empty) && !a.label_support {
        bail!("label-only intents need --label-support");
    }
    let supports = groups
        .into_iter()
        .map(|(intent, examples)| {
            Ok(SupportSet {
                intent: normalize_intent_name(&intent)?,
                examples,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let prototypes = build_prototypes(&supports, &model, a.label_support, a.metric)?;
    if let Some(path) = &a.dump_prototypes {
        prototypes.save_json(path)?;
    }
    let query = Utterance::new(a.query.clone())?;
    let result = classify(&query, &prototypes, &model)?;
    let scores: Vec<_> = prototypes
        .intents
        .iter()
        .zip(&result.scores)
        .map(|(i, s)| json!({"intent": i.raw, "score": s}))
        .collect();
    print_json(&json!({"query": a.query, "intent": result.intent.raw, "scores": scores}))
}

fn episode_inputs(
    a: &EpisodeArgs,
) -> Result<(
    AnyEncoder,
    Vec<Utterance>,
    Vec<pie_core::corpus::ClassSplit>,
    EvalConfig,
)> {
    let model = AnyEncoder::load(&a.model)?;
    let utts = read_corpus(&a.dataset, a.format)?;
    let splits = load_class_splits(&a.splits)?;
    let dataset_id = a.dataset_id.clone().unwrap_or_else(|| stem(&a.dataset));
    let config = EvalConfig {
        dataset_id,
        n: a.n,
        k: a.k,
        q: a.q,
        episodes_per_split: a.episodes,
        label_support: a.label_support,
        metric: a.metric,
        seed: a.seed,
    };
    Ok((model, utts, splits, config))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let (model, utts, splits, config) = episode_inputs(&a.episodes)?;
    match &a.overlap_with {
        Some(corpus) => {
            let intents = intent_set(&read_corpus(corpus, None)?)?;
            let report = run_overlap_controlled_eval(&model, &utts, &splits, &intents, &config)?;
            write_json(&a.out, &report)?;
            print_json(&json!({
                "matched": report.matched.len(),
                "all": {"mean": report.all.mean, "std": report.all.std},
                "overlap_removed": {"mean": report.overlap_removed.mean, "std": report.overlap_removed.std},
            }))
        }
        None => {
            let report = run_eval(&model, &utts, &splits, &config)?;
            write_json(&a.out, &report)?;
            print_json(
                &json!({"mean": report.mean, "std": report.std, "split_accuracies": report.split_accuracies}),
            )
        }
    }
}

fn sweep_cmd(a: SweepArgs) -> Result<()> {
    let (model, utts, splits, config) = episode_inputs(&a.episodes)?;
    let points = sweep(&model, &utts, &splits, a.axis, &a.values, &config)?;
    std::fs::create_dir_all(&a.out_dir)?;
    write_sweep_csv(a.out_dir.join("sweep.csv"), &points)?;
    plot_sweep(a.out_dir.join("sweep.png"), &points)?;
    write_json(&a.out_dir.join("sweep.json"), &points)?;
    let rows: Vec<_> = points
        .iter()
        .map(|p| json!({"value": p.value, "mean": p.report.mean, "std": p.report.std}))
        .collect();
    print_json(&rows.into())
}

fn run_cmd(a: RunArgs) -> Result<()> {
    let mut config = PipelineConfig::from_file(&a.config)?;
    if let Some(out) = a.out {
        config.out_dir = out;
    }
    let outcome = run_pipeline(&config, &RunOptions { force: a.force })?;
    for s in &outcome.manifest.stages {
        println!("{:<10} {}", s.name.name(), s.status);
    }
    println!(
        "manifest: {}",
        outcome
            .run_dir
            .join(crate::pipeline::MANIFEST_FILE)
            .display()
    );
    Ok(())
}
