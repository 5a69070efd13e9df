use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use uap_core::baseline::BaselineConfig;
use uap_core::encoders::ToyConfig;
use uap_core::eval::{CosineConfig, SweepKind};
use uap_core::{ClConfig, EvalConfig, PromptKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum CommandKind {
    Synth,
    Bank,
    TrainCl,
    TrainBaseline,
    Eval,
    Sweep,
    Analyze,
    Overlay,
}

impl CommandKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CommandKind::Synth => "synth",
            CommandKind::Bank => "bank",
            CommandKind::TrainCl => "train-cl",
            CommandKind::TrainBaseline => "train-baseline",
            CommandKind::Eval => "eval",
            CommandKind::Sweep => "sweep",
            CommandKind::Analyze => "analyze",
            CommandKind::Overlay => "overlay",
        }
    }
}

/// What `eval` measures.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum EvalTarget {
    /// The perturbation in `uap`.
    #[default]
    Uap,
    /// A fresh uniform-noise perturbation at the evaluation budget.
    Noise,
    /// A per-image attack on each test image with its own prompts.
    ImageDependent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSettings {
    pub kind: SweepKind,
    pub grid: Vec<String>,
    pub seeds: Vec<u64>,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            kind: SweepKind::Temperature,
            grid: Vec::new(),
            seeds: vec![0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OverlaySettings {
    pub prompt: PromptKind,
    /// Sampled prompts when none are listed explicitly.
    pub count: usize,
    pub points: Vec<[usize; 2]>,
    /// `[row_min, col_min, row_max, col_max]`, inclusive.
    pub boxes: Vec<[usize; 4]>,
}

impl Default for OverlaySettings {
    fn default() -> Self {
        Self {
            prompt: PromptKind::Point,
            count: 2,
            points: Vec::new(),
            boxes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSettings {
    pub n: usize,
    pub first_seed: u64,
    pub two_blob: bool,
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self {
            n: 20,
            first_seed: 0,
            two_blob: false,
        }
    }
}

/// Everything a run needs. Written to `config.json` in every run directory;
/// `uap run --config <that file>` repeats the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: Option<CommandKind>,
    pub out_dir: Option<PathBuf>,
    /// `toy`, or the path of a checkpoint descriptor JSON.
    pub encoder: String,
    pub toy: ToyConfig,
    /// When set, replaces the seed of every nested config.
    pub seed: Option<u64>,
    pub train_corpus: Option<PathBuf>,
    pub bank_corpus: Option<PathBuf>,
    pub test_corpus: Option<PathBuf>,
    pub bank: Option<PathBuf>,
    pub uap: Option<PathBuf>,
    /// Rows of a new memory bank; all corpus images when unset.
    pub bank_size: Option<usize>,
    pub eval_target: EvalTarget,
    pub cl: ClConfig,
    pub baseline: BaselineConfig,
    pub eval: EvalConfig,
    pub cosine: CosineConfig,
    pub sweep: SweepSettings,
    pub overlay: OverlaySettings,
    pub synth: SynthSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: None,
            out_dir: None,
            encoder: "toy".into(),
            toy: ToyConfig::default(),
            seed: None,
            train_corpus: None,
            bank_corpus: None,
            test_corpus: None,
            bank: None,
            uap: None,
            bank_size: None,
            eval_target: EvalTarget::Uap,
            cl: ClConfig::default(),
            baseline: BaselineConfig::default(),
            eval: EvalConfig::default(),
            cosine: CosineConfig::default(),
            sweep: SweepSettings::default(),
            overlay: OverlaySettings::default(),
            synth: SynthSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Pushes the top-level seed into the nested configs and makes paths
    /// absolute so the snapshot does not depend on the working directory.
    pub fn resolve(&mut self) -> Result<()> {
        if let Some(s) = self.seed {
            self.cl.seed = s;
            self.baseline.seed = s;
            self.eval.seed = s;
            self.cosine.seed = s;
        }
        for p in [
            &mut self.out_dir,
            &mut self.train_corpus,
            &mut self.bank_corpus,
            &mut self.test_corpus,
            &mut self.bank,
            &mut self.uap,
        ]
        .into_iter()
        .flatten()
        {
            *p = std::path::absolute(&*p).with_context(|| format!("resolving {}", p.display()))?;
        }
        if self.encoder != "toy" {
            self.encoder = std::path::absolute(&self.encoder)?.to_string_lossy().into_owned();
        }
        Ok(())
    }

    pub fn command(&self) -> Result<CommandKind> {
        self.command.context("no command given and none recorded in the config")
    }

    pub fn out_dir(&self) -> Result<&Path> {
        match &self.out_dir {
            Some(p) => Ok(p),
            None => bail!("{} needs an output directory (--out)", self.command()?.as_str()),
        }
    }

    /// Fails unless `path` is set and exists.
    pub fn input<'a>(&self, path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
        let cmd = self.command()?.as_str();
        let p = path.as_deref().with_context(|| format!("{cmd} needs {flag}"))?;
        if !p.exists() {
            bail!("{flag} {} does not exist", p.display());
        }
        Ok(p)
    }

    pub fn snapshot(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
