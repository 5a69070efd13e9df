use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use uap_core::augment::AugmentKind;
use uap_core::baseline::BaselineMode;
use uap_core::eval::{PromptSampling, SweepKind};
use uap_core::optim::InitMode;
use uap_core::types::Shape3;
use uap_core::PromptKind;

use crate::config::{CommandKind, EvalTarget, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "uap",
    version,
    about = "Train and evaluate universal adversarial perturbations"
)]
pub struct Cli {
    /// JSON run config; flags given on the command line override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Write synthetic scenes as PNG files.
    Synth(SynthArgs),
    /// Embed a corpus into a memory bank of negatives.
    Bank(BankArgs),
    /// Train a perturbation with the contrastive objective.
    TrainCl(TrainClArgs),
    /// Train a perturbation with the supervised mask-removal attack.
    TrainBaseline(TrainBaselineArgs),
    /// Clean versus adversarial mIoU on a held-out corpus.
    Eval(EvalArgs),
    /// Train and evaluate one perturbation per grid setting.
    Sweep(SweepArgs),
    /// Cosine similarities of anchor, positive, negative and adversarial pairs.
    Analyze(AnalyzeArgs),
    /// Side-by-side clean/adversarial panels.
    Overlay(OverlayArgs),
    /// Repeat the command recorded in --config.
    Run(CommonArgs),
}

impl Cmd {
    fn kind(&self) -> Option<CommandKind> {
        Some(match self {
            Cmd::Synth(_) => CommandKind::Synth,
            Cmd::Bank(_) => CommandKind::Bank,
            Cmd::TrainCl(_) => CommandKind::TrainCl,
            Cmd::TrainBaseline(_) => CommandKind::TrainBaseline,
            Cmd::Eval(_) => CommandKind::Eval,
            Cmd::Sweep(_) => CommandKind::Sweep,
            Cmd::Analyze(_) => CommandKind::Analyze,
            Cmd::Overlay(_) => CommandKind::Overlay,
            Cmd::Run(_) => return None,
        })
    }

    /// Applies the flags of this command on top of `cfg`.
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(k) = self.kind() {
            cfg.command = Some(k);
        }
        match self {
            Cmd::Synth(a) => a.apply(cfg),
            Cmd::Bank(a) => a.apply(cfg),
            Cmd::TrainCl(a) => a.apply(cfg),
            Cmd::TrainBaseline(a) => a.apply(cfg),
            Cmd::Eval(a) => a.apply(cfg),
            Cmd::Sweep(a) => a.apply(cfg),
            Cmd::Analyze(a) => a.apply(cfg),
            Cmd::Overlay(a) => a.apply(cfg),
            Cmd::Run(a) => a.apply(cfg),
        }
    }
}

fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
    if let Some(v) = v {
        *slot = v.clone();
    }
}

fn set_some<T: Clone>(slot: &mut Option<T>, v: &Option<T>) {
    if v.is_some() {
        *slot = v.clone();
    }
}

fn parse_shape(s: &str) -> Result<Shape3, String> {
    let parts: Vec<usize> = s
        .split(['x', 'X', ','])
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("bad extent '{p}': {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(format!("expected HxWxC, got '{s}'")),
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Dependent,
    Agnostic,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `toy` or a checkpoint descriptor JSON.
    #[arg(long)]
    pub encoder: Option<String>,
    /// Toy segmenter input shape, e.g. 64x64x3.
    #[arg(long, value_parser = parse_shape)]
    pub input_shape: Option<Shape3>,
    /// Toy segmenter feature grid, e.g. 8x8x16.
    #[arg(long, value_parser = parse_shape)]
    pub feature_shape: Option<Shape3>,
    /// Seed of the toy segmenter weights.
    #[arg(long)]
    pub toy_seed: Option<u64>,
    /// Seed for every randomized step of the run.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl CommonArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        set_some(&mut cfg.out_dir, &self.out);
        set(&mut cfg.encoder, &self.encoder);
        set(&mut cfg.toy.input_shape, &self.input_shape);
        set(&mut cfg.toy.feature_shape, &self.feature_shape);
        set(&mut cfg.toy.seed, &self.toy_seed);
        set_some(&mut cfg.seed, &self.seed);
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub first_seed: Option<u64>,
    /// Also write the two-blob test image.
    #[arg(long)]
    pub two_blob: bool,
}

impl SynthArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        self.common.apply(cfg);
        set(&mut cfg.synth.n, &self.n);
        set(&mut cfg.synth.first_seed, &self.first_seed);
        cfg.synth.two_blob |= self.two_blob;
    }
}

#[derive(Debug, Args)]
pub struct BankArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Directory of natural images.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Number of rows; defaults to the whole corpus.
    #[arg(long)]
    pub m: Option<usize>,
}

impl BankArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        self.common.apply(cfg);
        set_some(&mut cfg.bank_corpus, &self.corpus);
        set_some(&mut cfg.bank_size, &self.m);
    }
}

#[derive(Debug, Args)]
pub struct TrainClArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Images used by the add_image augmentation.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Memory bank file.
    #[arg(long)]
    pub bank: Option<PathBuf>,
    #[arg(long, value_parser = |s: &str| s.parse::<AugmentKind>().map_err(|e| e.to_string()))]
    pub aug: Option<AugmentKind>,
    #[arg(long)]
    pub weight: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_parser = parse_init)]
    pub init: Option<InitMode>,
}

fn parse_init(s: &str) -> Result<InitMode, String> {
    match s {
        "zeros" => Ok(InitMode::Zeros),
        "uniform" => Ok(InitMode::Uniform),
        other => Err(format!("unknown init '{other}' (zeros, uniform)")),
    }
}

impl TrainClArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        self.common.apply(cfg);
        set_some(&mut cfg.train_corpus, &self.corpus);
        set_some(&mut cfg.bank, &self.bank);
        let cl = &mut cfg.cl;
        if let Some(a) = self.aug {
            cl.augment = a;
            cl.augment_spec = None;
        }
        set(&mut cl.weight, &self.weight);
        set(&mut cl.tau, &self.tau);
        set(&mut cl.k, &self.k);
        set(&mut cl.epsilon, &self.eps);
        set(&mut cl.steps, &self.steps);
        set(&mut cl.lr, &self.lr);
        set(&mut cl.init, &self.init);
    }
}

#[derive(Debug, Args)]
pub struct TrainBaselineArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Training images; the dependent mode attacks the first one.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub prompts_per_image: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    pub target_logit: Option<f64>,
}

impl TrainBaselineArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        self.common.apply(cfg);
        set_some(&mut cfg.train_corpus, &self.corpus);
        let b = &mut cfg.baseline;
        if let Some(m) = self.mode {
            b.mode = match m {
                ModeArg::Dependent => BaselineMode::ImageDependent,
                ModeArg::Agnostic => BaselineMode::ImageAgnostic,
            };
        }
        set(&mut b.epsilon, &self.eps);
        set(&mut b.steps, &self.steps);
        set(&mut b.lr, &self.lr);
        set(&mut b.prompts_per_image, &self.prompts_per_image);
        set(&mut b.target_logit, &self.target_logit);
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PromptArg {
    Point,
    Box,
}

impl From<PromptArg> for PromptKind {
    fn from(p: PromptArg) -> Self {
        match p {
            PromptArg::Point => PromptKind::Point,
            PromptArg::Box => PromptKind::Box,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SamplingArg {
    Uniform,
    Foreground,
}

/// Flags shared by every command that evaluates on a test corpus.
#[derive(Debug, Args)]
pub struct EvalFlags {
    /// Number of test images.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, value_enum)]
    pub prompt: Option<PromptArg>,
    #[arg(long)]
    pub prompts_per_image: Option<usize>,
    #[arg(long, value_enum)]
    pub sampling: Option<SamplingArg>,
    /// Feed `x + v` to the model without clamping to [0,1].
    #[arg(long)]
    pub no_clamp: bool,
}

impl EvalFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        let e = &mut cfg.eval;
        set(&mut e.n_images, &self.n);
        if let Some(p) = self.prompt {
            e.prompt_kind = p.into();
        }
        set(&mut e.prompts_per_image, &self.prompts_per_image);
        if let Some(s) = self.sampling {
            e.sampling = match s {
                SamplingArg::Uniform => PromptSampling::Uniform,
                SamplingArg::Foreground => PromptSampling::Foreground,
            };
        }
        if self.no_clamp {
            e.clamp_adv = false;
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub eval: EvalFlags,
    #[arg(long)]
    pub uap: Option<PathBuf>,
    #[arg(long)]
    pub test_corpus: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub target: Option<EvalTarget>,
    /// Budget of the noise perturbation and the per-image attack.
    #[arg(long)]
    pub eps: Option<f64>,
}

impl EvalArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        self.common.apply(cfg);
        self.eval.apply(cfg);
        set_some(&mut cfg.uap, &self.uap);
        set_some(&mut cfg.test_corpus, &self.test_corpus);
        set(&mut cfg.eval_target, &self.target);
        set(&mut cfg.baseline.epsilon, &self.eps);
    }
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub eval: EvalFlags,
    #[arg(long, value_parser = |s: &str| s.parse::<SweepKind>().map_err(|e| e.to_string()))]
    pub kind: Option<SweepKind>,
    /// Comma-separated settings.
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<String>>,
    /// Comma-separated training seeds; each cell averages over them.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub bank: Option<PathBuf>,
    #[arg(long)]
    pub test_corpus: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
}

impl SweepArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        self.common.apply(cfg);
        self.eval.apply(cfg);
        set(&mut cfg.sweep.kind, &self.kind);
        set(&mut cfg.sweep.grid, &self.grid);
        set(&mut cfg.sweep.seeds, &self.seeds);
        set_some(&mut cfg.train_corpus, &self.corpus);
        set_some(&mut cfg.bank, &self.bank);
        set_some(&mut cfg.test_corpus, &self.test_corpus);
        set(&mut cfg.cl.steps, &self.steps);
        set(&mut cfg.cl.k, &self.k);
    }
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub uap: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub weight: Option<f64>,
    #[arg(long)]
    pub draws: Option<usize>,
}

impl AnalyzeArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        self.common.apply(cfg);
        set_some(&mut cfg.uap, &self.uap);
        set_some(&mut cfg.test_corpus, &self.corpus);
        set(&mut cfg.cosine.weight, &self.weight);
        set(&mut cfg.cosine.draws, &self.draws);
    }
}

fn parse_point(s: &str) -> Result<[usize; 2], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|e| format!("{e}")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| format!("expected ROW,COL, got '{s}'"))
}

fn parse_box(s: &str) -> Result<[usize; 4], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|e| format!("{e}")))
        .collect::<Result<_, _>>()?;
    v.try_into()
        .map_err(|_| format!("expected ROW0,COL0,ROW1,COL1, got '{s}'"))
}

#[derive(Debug, Args)]
pub struct OverlayArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub uap: Option<PathBuf>,
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Kind of the sampled prompts.
    #[arg(long, value_enum)]
    pub prompt: Option<PromptArg>,
    /// Number of sampled prompts.
    #[arg(long)]
    pub count: Option<usize>,
    /// Explicit point prompt ROW,COL; repeatable.
    #[arg(long = "point", value_parser = parse_point)]
    pub points: Vec<[usize; 2]>,
    /// Explicit box prompt ROW0,COL0,ROW1,COL1; repeatable.
    #[arg(long = "box", value_parser = parse_box)]
    pub boxes: Vec<[usize; 4]>,
}

impl OverlayArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        self.common.apply(cfg);
        set_some(&mut cfg.uap, &self.uap);
        set_some(&mut cfg.test_corpus, &self.images);
        let o = &mut cfg.overlay;
        if let Some(p) = self.prompt {
            o.prompt = p.into();
        }
        set(&mut o.count, &self.count);
        if !self.points.is_empty() || !self.boxes.is_empty() {
            o.points = self.points.clone();
            o.boxes = self.boxes.clone();
        }
    }
}
