use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use log::info;
use serde_json::json;
use uap_core::corpus::save_png;
use uap_core::encoders::{load_external_segmenter, ModelDescriptor, ToySegmenter};
use uap_core::eval::{evaluate_image_dependent, evaluation_prompts, SweepInputs};
use uap_core::synth::{scene, two_blob};
use uap_core::*;

use crate::config::{CommandKind, EvalTarget, RunConfig};
use crate::logging::LogBuffer;

pub enum Outcome {
    Done,
    /// Sweep finished with this many failed cells.
    PartialSweep(usize),
}

/// Output of a command, written only after all work succeeded.
enum Artifact {
    Bytes(PathBuf, Vec<u8>),
    Png(PathBuf, ImageTensor),
    Bank(PathBuf, MemoryBank),
}

impl Artifact {
    fn write(&self, out: &Path) -> Result<()> {
        let (Artifact::Bytes(name, _) | Artifact::Png(name, _) | Artifact::Bank(name, _)) = self;
        let path = out.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        match self {
            Artifact::Bytes(_, b) => std::fs::write(&path, b).with_context(|| format!("writing {}", path.display()))?,
            Artifact::Png(_, img) => save_png(img, &path)?,
            Artifact::Bank(_, bank) => save_membank(bank, &path)?,
        }
        Ok(())
    }
}

type Files = Vec<Artifact>;

fn text(name: &str, s: String) -> Artifact {
    Artifact::Bytes(name.into(), s.into_bytes())
}

fn pretty(v: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(v).expect("value serializes")
}

fn segmenter(cfg: &RunConfig) -> Result<SegmenterHandle> {
    if cfg.encoder == "toy" {
        return Ok(Arc::new(ToySegmenter::new(cfg.toy)?));
    }
    let desc = ModelDescriptor::from_json_file(Path::new(&cfg.encoder))?;
    Ok(load_external_segmenter(&desc)?)
}

struct Named<'a> {
    what: &'static str,
    dir: Option<&'a Path>,
    digests: BTreeSet<String>,
}

impl<'a> Named<'a> {
    fn corpus(what: &'static str, dir: &'a Path, c: &Corpus) -> Self {
        Self {
            what,
            dir: Some(dir),
            digests: c.digests(),
        }
    }
}

/// Fails when two sets share a directory or any image content.
fn ensure_disjoint(sets: &[Named<'_>]) -> Result<()> {
    for (i, a) in sets.iter().enumerate() {
        for b in &sets[i + 1..] {
            if let (Some(da), Some(db)) = (a.dir, b.dir) {
                if da.canonicalize()? == db.canonicalize()? {
                    bail!(
                        "the {} and the {} are the same directory {}",
                        a.what,
                        b.what,
                        da.display()
                    );
                }
            }
            let shared = a.digests.intersection(&b.digests).count();
            if shared > 0 {
                bail!("{shared} image(s) appear in both the {} and the {}", a.what, b.what);
            }
        }
    }
    Ok(())
}

fn load_corpus(dir: &Path, shape: (usize, usize, usize), what: &str) -> Result<Corpus> {
    let c = ingest_corpus(dir, shape).with_context(|| format!("loading the {what}"))?;
    info!("{what}: {} images from {}", c.len(), dir.display());
    Ok(c)
}

fn load_bank(cfg: &RunConfig, seg: &dyn Segmenter) -> Result<MemoryBank> {
    let path = cfg.input(&cfg.bank, "--bank")?;
    let bank = load_membank(path)?;
    bank.check_encoder(seg.encoder())
        .with_context(|| format!("memory bank {}", path.display()))?;
    Ok(bank)
}

fn bank_digests(bank: &MemoryBank) -> BTreeSet<String> {
    bank.source_digests().iter().cloned().collect()
}

pub fn run(cfg: &RunConfig, log: &LogBuffer) -> Result<Outcome> {
    let cmd = cfg.command()?;
    let out = cfg.out_dir()?.to_path_buf();
    info!("uap {} -> {}", cmd.as_str(), out.display());

    let mut outcome = Outcome::Done;
    let files = match cmd {
        CommandKind::Synth => synth(cfg)?,
        CommandKind::Bank => bank(cfg)?,
        CommandKind::TrainCl => train_cl(cfg)?,
        CommandKind::TrainBaseline => train_baseline(cfg)?,
        CommandKind::Eval => eval(cfg)?,
        CommandKind::Sweep => {
            let (files, failed) = sweep_cmd(cfg, &out)?;
            if failed > 0 {
                outcome = Outcome::PartialSweep(failed);
            }
            files
        }
        CommandKind::Analyze => analyze(cfg)?,
        CommandKind::Overlay => overlay(cfg, &out)?,
    };

    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    for a in &files {
        a.write(&out)?;
    }
    std::fs::write(out.join("config.json"), cfg.snapshot())?;
    info!("done");
    std::fs::write(out.join("run.log"), log.contents())?;
    Ok(outcome)
}

fn synth(cfg: &RunConfig) -> Result<Files> {
    let shape = cfg.toy.input_shape;
    let s = &cfg.synth;
    let mut files: Files = (s.first_seed..s.first_seed + s.n as u64)
        .map(|seed| Artifact::Png(format!("scene_{seed:05}.png").into(), scene(seed, shape)))
        .collect();
    if s.two_blob {
        files.push(Artifact::Png("two_blob.png".into(), two_blob(shape).0));
    }
    info!("{} images of {}x{}x{}", files.len(), shape.0, shape.1, shape.2);
    Ok(files)
}

fn bank(cfg: &RunConfig) -> Result<Files> {
    let seg = segmenter(cfg)?;
    let dir = cfg.input(&cfg.bank_corpus, "--corpus")?;
    let corpus = load_corpus(dir, seg.input_shape(), "bank corpus")?;
    let m = cfg.bank_size.unwrap_or(corpus.len());
    let bank = build_membank(seg.encoder(), &corpus, m)?;
    info!(
        "memory bank: {} x {}, checksum {}",
        bank.len(),
        bank.dim(),
        bank.checksum()
    );
    Ok(vec![Artifact::Bank("bank.bin".into(), bank)])
}

fn uap_files(outcome: &TrainOutcome) -> Files {
    vec![
        Artifact::Bytes("uap.bin".into(), uapfile::encode_uap(&outcome.uap)),
        text("loss.csv", outcome.trace_csv()),
    ]
}

fn log_trace(outcome: &TrainOutcome) {
    if let (Some(first), Some(last)) = (outcome.trace.first(), outcome.trace.last()) {
        info!(
            "{} steps, loss {:.4} -> {:.4}, |v|_inf {:.6}",
            outcome.trace.len(),
            first.loss,
            last.loss,
            outcome.uap.linf_norm()
        );
    }
}

fn train_cl(cfg: &RunConfig) -> Result<Files> {
    let seg = segmenter(cfg)?;
    let dir = cfg.input(&cfg.train_corpus, "--corpus")?;
    let bank = load_bank(cfg, seg.as_ref())?;
    let train = load_corpus(dir, seg.input_shape(), "training corpus")?;
    ensure_disjoint(&[
        Named::corpus("training corpus", dir, &train),
        Named {
            what: "memory bank",
            dir: None,
            digests: bank_digests(&bank),
        },
    ])?;
    let outcome = train_uap_cl(seg.encoder(), &train, &bank, &cfg.cl)?;
    log_trace(&outcome);
    Ok(uap_files(&outcome))
}

fn train_baseline(cfg: &RunConfig) -> Result<Files> {
    let seg = segmenter(cfg)?;
    let dir = cfg.input(&cfg.train_corpus, "--corpus")?;
    let train = load_corpus(dir, seg.input_shape(), "training corpus")?;
    let outcome = run_baseline(seg.as_ref(), &train, &cfg.baseline)?;
    log_trace(&outcome);
    Ok(uap_files(&outcome))
}

fn eval(cfg: &RunConfig) -> Result<Files> {
    let seg = segmenter(cfg)?;
    let dir = cfg.input(&cfg.test_corpus, "--test-corpus")?;
    let uap = match cfg.eval_target {
        EvalTarget::Uap => Some(load_uap(cfg.input(&cfg.uap, "--uap")?)?),
        _ => None,
    };
    let test = load_corpus(dir, seg.input_shape(), "test corpus")?;
    let report = match (&uap, cfg.eval_target) {
        (Some(uap), _) => evaluate_uap(seg.as_ref(), uap, &test, &cfg.eval)?,
        (None, EvalTarget::Noise) => {
            random_noise_baseline(seg.as_ref(), &test, &cfg.eval, cfg.baseline.epsilon, cfg.eval.seed)?
        }
        (None, _) => evaluate_image_dependent(seg.as_ref(), &test, &cfg.eval, &cfg.baseline)?,
    };
    info!("mIoU {} over {} prompts", report.miou_display(), report.per_image.len());
    let summary = json!({
        "target": cfg.eval_target,
        "miou": report.miou,
        "n_images": cfg.eval.n_images,
        "prompts": report.per_image.len(),
        "clamp_adv": report.clamp_adv,
        "config_hash": report.config_hash,
        "uap_meta": report.uap_meta,
    });
    Ok(vec![
        text("report.csv", report.to_csv()),
        text("summary.json", pretty(&summary)),
    ])
}

fn sweep_cmd(cfg: &RunConfig, out: &Path) -> Result<(Files, usize)> {
    let seg = segmenter(cfg)?;
    let train_dir = cfg.input(&cfg.train_corpus, "--corpus")?;
    let test_dir = cfg.input(&cfg.test_corpus, "--test-corpus")?;
    let bank = load_bank(cfg, seg.as_ref())?;
    let shape = seg.input_shape();
    let train = load_corpus(train_dir, shape, "training corpus")?;
    let test = load_corpus(test_dir, shape, "test corpus")?;
    ensure_disjoint(&[
        Named::corpus("training corpus", train_dir, &train),
        Named {
            what: "memory bank",
            dir: None,
            digests: bank_digests(&bank),
        },
        Named::corpus("test corpus", test_dir, &test),
    ])?;
    if cfg.eval.n_images > test.len() {
        bail!("--n {} exceeds the {} test images", cfg.eval.n_images, test.len());
    }
    let inputs = SweepInputs {
        segmenter: seg.as_ref(),
        aug_corpus: &train,
        bank: &bank,
        test: &test,
        base: cfg.cl.clone(),
        eval: cfg.eval.clone(),
        seeds: cfg.sweep.seeds.clone(),
        out_dir: Some(out.to_path_buf()),
    };
    let report = sweep(cfg.sweep.kind, &cfg.sweep.grid, &inputs)?;
    for c in &report.cells {
        match (c.miou, &c.error) {
            (Some(m), _) => info!("{} = {}: mIoU {m:.2}", cfg.sweep.kind.as_str(), c.setting),
            (None, e) => info!(
                "{} = {}: failed ({})",
                cfg.sweep.kind.as_str(),
                c.setting,
                e.as_deref().unwrap_or("")
            ),
        }
    }
    Ok((Files::new(), report.failures()))
}

fn analyze(cfg: &RunConfig) -> Result<Files> {
    let seg = segmenter(cfg)?;
    let uap = load_uap(cfg.input(&cfg.uap, "--uap")?)?;
    let dir = cfg.input(&cfg.test_corpus, "--corpus")?;
    let corpus = load_corpus(dir, seg.input_shape(), "corpus")?;
    let report = cosine_analysis(seg.encoder(), &uap, &corpus, &cfg.cosine)?;
    info!(
        "cosine: positive {:.3}, negative {:.3}, adv/clean {:.3}, random {:.3}",
        report.positive, report.negative, report.adv_clean, report.random_pair
    );
    Ok(vec![
        text("cosine.csv", report.to_csv()),
        text("cosine.json", pretty(&report)),
    ])
}

fn overlay(cfg: &RunConfig, out: &Path) -> Result<Files> {
    let seg = segmenter(cfg)?;
    let uap = load_uap(cfg.input(&cfg.uap, "--uap")?)?;
    let dir = cfg.input(&cfg.test_corpus, "--images")?;
    let images = load_corpus(dir, seg.input_shape(), "overlay images")?;
    let o = &cfg.overlay;
    let mut prompts: Vec<Prompt> = o.points.iter().map(|&[row, col]| Prompt::Point { row, col }).collect();
    prompts.extend(o.boxes.iter().map(|&[row_min, col_min, row_max, col_max]| Prompt::Box {
        row_min,
        col_min,
        row_max,
        col_max,
    }));
    if prompts.is_empty() {
        let ecfg = EvalConfig {
            prompt_kind: o.prompt,
            prompts_per_image: o.count,
            ..cfg.eval.clone()
        };
        prompts = evaluation_prompts(seg.as_ref(), &images.get(0).image, 0, &ecfg)?;
    }
    for p in &prompts {
        p.validate(seg.input_shape().0, seg.input_shape().1)?;
    }
    let records = emit_overlays(seg.as_ref(), &uap, &images, &prompts, &out.join("panels"))?;
    let mut csv = String::from("image_id,prompt_kind,row,col,clean_area,adv_area,file\n");
    for r in &records {
        let (row, col) = r.prompt.anchor();
        let file = r.path.strip_prefix(out).unwrap_or(&r.path);
        csv.push_str(&format!(
            "{},{},{row},{col},{},{},{}\n",
            r.image_id,
            r.prompt.kind().as_str(),
            r.clean_area,
            r.adv_area,
            file.display()
        ));
    }
    info!("{} panels", records.len());
    Ok(vec![text("overlays.csv", csv)])
}
