use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use pie_core::contrastive::{LossConfig, PretrainConfig};
use pie_core::corpus::CorpusFormat;
use pie_core::episodes::{EvalConfig, SweepAxis, WaySpec};
use pie_core::proto::Metric;
use serde::{Deserialize, Serialize};

use crate::models::{EncoderSpec, TaggerSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Prepare,
    IrlTrain,
    Pseudo,
    Pretrain,
    Eval,
    Sweep,
    Overlap,
    Ablation,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Prepare,
        Stage::IrlTrain,
        Stage::Pseudo,
        Stage::Pretrain,
        Stage::Eval,
        Stage::Sweep,
        Stage::Overlap,
        Stage::Ablation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Prepare => "prepare",
            Stage::IrlTrain => "irl_train",
            Stage::Pseudo => "pseudo",
            Stage::Pretrain => "pretrain",
            Stage::Eval => "eval",
            Stage::Sweep => "sweep",
            Stage::Overlap => "overlap",
            Stage::Ablation => "ablation",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .with_context(|| format!("unknown stage `{s}`"))
    }
}

/// A pre-training corpus. Its name becomes the `dataset_id` of every
/// utterance it contributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusInput {
    pub name: String,
    pub path: PathBuf,
    #[serde(default)]
    pub format: Option<CorpusFormat>,
    /// Keep only the first turn of each dialogue.
    #[serde(default)]
    pub first_turn: bool,
    /// At most this many utterances per intent.
    #[serde(default)]
    pub cap: Option<usize>,
}

/// A downstream evaluation dataset with its class splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetInput {
    pub id: String,
    pub path: PathBuf,
    #[serde(default)]
    pub format: Option<CorpusFormat>,
    pub splits: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    pub corpora: Vec<CorpusInput>,
    /// IRL annotations for `irl_train`.
    pub annotations: Option<PathBuf>,
    pub annotations_valid: Option<PathBuf>,
    /// A trained tagger, used when `irl_train` is not run.
    pub tagger: Option<PathBuf>,
    /// Starting encoder for `pretrain` and `ablation`; evaluated directly
    /// when `pretrain` is not run.
    pub encoder: Option<PathBuf>,
    /// Labelled utterances for choosing the pre-training epoch.
    pub validation: Option<PathBuf>,
    pub datasets: Vec<DatasetInput>,
}

/// Episode settings shared by `eval`, `sweep`, `overlap` and `ablation`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub n: WaySpec,
    pub k: usize,
    pub q: usize,
    pub episodes_per_split: usize,
    pub label_support: bool,
    pub metric: Metric,
}

impl Default for EvalSettings {
    fn default() -> Self {
        let d = EvalConfig::default();
        Self {
            n: d.n,
            k: d.k,
            q: d.q,
            episodes_per_split: d.episodes_per_split,
            label_support: d.label_support,
            metric: d.metric,
        }
    }
}

impl EvalSettings {
    pub fn to_config(&self, dataset_id: &str, seed: u64) -> EvalConfig {
        EvalConfig {
            dataset_id: dataset_id.to_string(),
            n: self.n,
            k: self.k,
            q: self.q,
            episodes_per_split: self.episodes_per_split,
            label_support: self.label_support,
            metric: self.metric,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSettings {
    pub axis: SweepAxis,
    pub values: Vec<WaySpec>,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            axis: SweepAxis::K,
            values: [0, 1, 2, 4, 8].into_iter().map(WaySpec::Fixed).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedLoss {
    pub name: String,
    #[serde(flatten)]
    pub loss: LossConfig,
}

/// Pre-training corpora to pool, by name; empty means all of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSubset {
    pub name: String,
    #[serde(default)]
    pub include: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSettings {
    pub losses: Vec<NamedLoss>,
    pub corpora: Vec<CorpusSubset>,
}

impl Default for AblationSettings {
    fn default() -> Self {
        Self {
            losses: vec![NamedLoss {
                name: "full".into(),
                loss: LossConfig::default(),
            }],
            corpora: vec![CorpusSubset {
                name: "all".into(),
                include: Vec::new(),
            }],
        }
    }
}

/// A `pipeline.toml`. Relative paths are resolved against the file's
/// directory. Seeds inside stage blocks are ignored: every stage draws
/// from `seed` through its own named substream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub stages: Vec<Stage>,
    #[serde(default)]
    pub inputs: Inputs,
    #[serde(default)]
    pub irl: TaggerSpec,
    #[serde(default)]
    pub encoder: EncoderSpec,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default)]
    pub sweep: SweepSettings,
    #[serde(default)]
    pub ablation: AblationSettings,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("run")
}

impl PipelineConfig {
    pub fn from_toml_str(body: &str) -> Result<Self> {
        let config: Self = toml::from_str(body)?;
        config.check()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let body =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut config =
            Self::from_toml_str(&body).with_context(|| format!("in {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.resolve_paths(base);
        Ok(config)
    }

    /// Makes every relative path relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        let inputs = &mut self.inputs;
        inputs.corpora.iter_mut().for_each(|c| fix(&mut c.path));
        for d in &mut inputs.datasets {
            fix(&mut d.path);
            fix(&mut d.splits);
        }
        for p in [
            &mut inputs.annotations,
            &mut inputs.annotations_valid,
            &mut inputs.tagger,
            &mut inputs.encoder,
            &mut inputs.validation,
            &mut self.irl.init,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        if let EncoderSpec::Transformer {
            model_dir: Some(p), ..
        } = &mut self.encoder
        {
            fix(p);
        }
    }

    fn check(&self) -> Result<()> {
        if self.stages.is_empty() {
            bail!("`stages` is empty");
        }
        let mut seen = BTreeSet::new();
        for s in &self.stages {
            if !seen.insert(*s) {
                bail!("stage `{s}` is listed twice");
            }
        }
        let mut names = BTreeSet::new();
        for c in &self.inputs.corpora {
            if !names.insert(c.name.as_str()) {
                bail!("two corpora are named `{}`", c.name);
            }
            if c.cap == Some(0) {
                bail!("corpus `{}`: cap must be at least 1", c.name);
            }
        }
        let mut ids = BTreeSet::new();
        for d in &self.inputs.datasets {
            if !ids.insert(d.id.as_str()) {
                bail!("two datasets are named `{}`", d.id);
            }
        }
        let mut losses = BTreeSet::new();
        for l in &self.ablation.losses {
            if !losses.insert(l.name.as_str()) {
                bail!("two ablation losses are named `{}`", l.name);
            }
            l.loss
                .validate()
                .with_context(|| format!("ablation loss `{}`", l.name))?;
        }
        let mut subsets = BTreeSet::new();
        for c in &self.ablation.corpora {
            if !subsets.insert(c.name.as_str()) {
                bail!("two ablation corpus subsets are named `{}`", c.name);
            }
            for inc in &c.include {
                if !names.contains(inc.as_str()) {
                    bail!(
                        "ablation subset `{}` includes unknown corpus `{inc}`",
                        c.name
                    );
                }
            }
        }
        self.pretrain.validate().context("[pretrain]")?;
        Ok(())
    }

    pub fn contains(&self, stage: Stage) -> bool {
        self.stages.contains(&stage)
    }
}
