use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{evaluate_uap, write_line_plot_svg, EvalConfig};
use crate::augment::AugmentKind;
use crate::cl_attack::{train_uap_cl, ClConfig};
use crate::corpus::Corpus;
use crate::encoders::Segmenter;
use crate::error::{Result, UapError};
use crate::membank::MemoryBank;
use crate::ops::ordered_mean;
use crate::par;
use crate::uapfile::save_uap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    Augmentation,
    Weight,
    Temperature,
    Negatives,
}

impl SweepKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepKind::Augmentation => "augmentation",
            SweepKind::Weight => "weight",
            SweepKind::Temperature => "temperature",
            SweepKind::Negatives => "negatives",
        }
    }

    /// Applies one grid setting to a copy of `base`.
    pub fn apply(self, base: &ClConfig, setting: &str) -> Result<ClConfig> {
        let mut cfg = base.clone();
        let bad =
            |e: &dyn std::fmt::Display| UapError::Config(format!("bad {} setting '{setting}': {e}", self.as_str()));
        match self {
            SweepKind::Augmentation => {
                cfg.augment = setting.parse::<AugmentKind>()?;
                cfg.augment_spec = None;
            }
            SweepKind::Weight => cfg.weight = setting.parse().map_err(|e| bad(&e))?,
            SweepKind::Temperature => cfg.tau = setting.parse().map_err(|e| bad(&e))?,
            SweepKind::Negatives => cfg.k = setting.parse().map_err(|e| bad(&e))?,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl FromStr for SweepKind {
    type Err = UapError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "augmentation" | "aug" => Ok(SweepKind::Augmentation),
            "weight" => Ok(SweepKind::Weight),
            "temperature" | "tau" => Ok(SweepKind::Temperature),
            "negatives" | "k" => Ok(SweepKind::Negatives),
            other => Err(UapError::Config(format!("unknown sweep kind '{other}'"))),
        }
    }
}

pub struct SweepInputs<'a> {
    pub segmenter: &'a dyn Segmenter,
    pub aug_corpus: &'a Corpus,
    pub bank: &'a MemoryBank,
    pub test: &'a Corpus,
    pub base: ClConfig,
    pub eval: EvalConfig,
    /// Training seeds per cell; the cell's mIoU is their mean.
    pub seeds: Vec<u64>,
    /// Where per-cell artifacts, the CSV and the plot go. Nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub setting: String,
    /// Mean mIoU over seeds, in percent.
    pub miou: Option<f64>,
    pub per_seed: Vec<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub kind: SweepKind,
    pub cells: Vec<SweepCell>,
}

impl SweepReport {
    /// `setting,miou_percent`; failed cells have an empty value.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("setting,miou_percent\n");
        for c in &self.cells {
            match c.miou {
                Some(m) => out.push_str(&format!("{},{:.2}\n", c.setting, m)),
                None => out.push_str(&format!("{},\n", c.setting)),
            }
        }
        out
    }

    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| c.error.is_some()).count()
    }
}

fn cell_dir(out: &Path, setting: &str) -> PathBuf {
    let safe: String = setting
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    out.join("cells").join(safe)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| UapError::io(path, e))
}

fn run_cell(kind: SweepKind, setting: &str, inputs: &SweepInputs<'_>) -> Result<Vec<f64>> {
    let cfg = kind.apply(&inputs.base, setting)?;
    let dir = inputs.out_dir.as_deref().map(|o| cell_dir(o, setting));
    let mut out = Vec::with_capacity(inputs.seeds.len());
    for &seed in &inputs.seeds {
        let cfg = ClConfig { seed, ..cfg.clone() };
        let trained = train_uap_cl(inputs.segmenter.encoder(), inputs.aug_corpus, inputs.bank, &cfg)?;
        let report = evaluate_uap(inputs.segmenter, &trained.uap, inputs.test, &inputs.eval)?;
        if let Some(dir) = &dir {
            let d = dir.join(format!("seed{seed}"));
            std::fs::create_dir_all(&d).map_err(|e| UapError::io(&d, e))?;
            save_uap(&trained.uap, &d.join("uap.bin"))?;
            write(&d.join("report.csv"), &report.to_csv())?;
            write(&d.join("loss.csv"), &trained.trace_csv())?;
        }
        out.push(report.miou);
    }
    Ok(out)
}

/// Trains and evaluates one UAP per (setting, seed). Failed cells are
/// recorded and do not stop the sweep.
pub fn sweep(kind: SweepKind, grid: &[String], inputs: &SweepInputs<'_>) -> Result<SweepReport> {
    if grid.is_empty() {
        return Err(UapError::Config("sweep grid is empty".into()));
    }
    if inputs.seeds.is_empty() {
        return Err(UapError::Config("sweep needs at least one seed".into()));
    }
    let cells = par::map(grid, |setting| match run_cell(kind, setting, inputs) {
        Ok(per_seed) => SweepCell {
            setting: setting.clone(),
            miou: Some(ordered_mean(per_seed.iter().copied())),
            per_seed,
            error: None,
        },
        Err(e) => {
            log::error!("sweep cell {setting} failed: {e}");
            SweepCell {
                setting: setting.clone(),
                miou: None,
                per_seed: Vec::new(),
                error: Some(e.to_string()),
            }
        }
    });
    let report = SweepReport { kind, cells };
    if let Some(out) = &inputs.out_dir {
        std::fs::create_dir_all(out).map_err(|e| UapError::io(out, e))?;
        write(&out.join("sweep.csv"), &report.to_csv())?;
        write(
            &out.join("sweep.json"),
            &serde_json::to_string_pretty(&report).expect("report serializes"),
        )?;
        let labels: Vec<String> = report.cells.iter().map(|c| c.setting.clone()).collect();
        let values: Vec<Option<f64>> = report.cells.iter().map(|c| c.miou).collect();
        if let Err(e) = write_line_plot_svg(
            &out.join("sweep.svg"),
            &format!("{} sweep", kind.as_str()),
            "mIoU (%)",
            &labels,
            &values,
        ) {
            log::warn!("plot not written: {e}");
        }
    }
    Ok(report)
}
