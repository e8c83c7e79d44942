//! The `pie` command line and pipeline runner.
//!
//! [`pipeline::run_pipeline`] drives the stages `prepare`, `irl_train`,
//! `pseudo`, `pretrain`, `eval`, `sweep`, `overlap` and `ablation` from a
//! TOML config into a run directory:
//!
//! ```text
//! run/
//!   manifest.json        configs, seeds, input hashes, stage keys, artifact hashes, metrics
//!   artifacts/<stage>/   everything the stage wrote
//!   logs/<stage>.log
//! ```
//!
//! [`models`] dispatches checkpoints to the toy or transformer backend.

pub mod cli;
pub mod io;
pub mod logging;
pub mod models;
pub mod pipeline;

pub use models::{AnyEncoder, AnyTagger, EncoderSpec, TaggerKind, TaggerSpec};
pub use pipeline::{run_pipeline, PipelineConfig, RunManifest, RunOptions, Stage, StageStatus};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/corpus.md")]
    pub struct Corpus;
    #[doc = include_str!("../../../book/src/encoders.md")]
    pub struct Encoders;
    #[doc = include_str!("../../../book/src/roles.md")]
    pub struct Roles;
    #[doc = include_str!("../../../book/src/pseudo.md")]
    pub struct Pseudo;
    #[doc = include_str!("../../../book/src/pretraining.md")]
    pub struct Pretraining;
    #[doc = include_str!("../../../book/src/prototypes.md")]
    pub struct Prototypes;
    #[doc = include_str!("../../../book/src/episodes.md")]
    pub struct Episodes;
    #[doc = include_str!("../../../book/src/pipeline.md")]
    pub struct Pipeline;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct Cli;
    #[doc = include_str!("../../../book/src/formats.md")]
    pub struct Formats;
}
