use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use futureseg::data::{generate_dataset, generate_validation, read_segv, write_segv, SegDataset, SegMap, SegSequence};
use futureseg::gradcheck;
use futureseg::train_eval::{
    evaluate_copy_last, evaluate_model, load_checkpoint, predict_autoregressive, save_checkpoint, train_with,
    ConfusionMatrix, EvalOptions, MetricsReport,
};
use futureseg::INPUT_FRAMES;

mod settings;

use settings::Settings;

const SNAPSHOT: &str = "config.txt";

#[derive(Parser, Debug)]
#[command(name = "futureseg", version, about = "Predict future semantic segmentation maps with multi-scale ConvLSTMs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic train.segv and val.segv.
    Generate(Common),
    /// Train a model; writes checkpoint.fsck, metrics.jsonl and report.json.
    Train(Common),
    /// Score a checkpoint (or a prediction file) against ground truth, next to copy-last.
    Eval(Common),
    /// Write autoregressive predictions for the first window of every sequence.
    Predict(Common),
    /// Run the 64-bit finite-difference gradient suite.
    Gradcheck(Common),
}

#[derive(Args, Debug, Default)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Temporal module: none, uni or bi.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    horizon: Option<usize>,
    /// Dataset: a SEGV file, or a directory holding train.segv and val.segv.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint to evaluate or predict with.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Predicted SEGV file to score (eval only).
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Override any setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn settings(&self) -> Result<Settings> {
        let mut s = Settings::default();
        if let Some(path) = &self.config {
            s.apply_file(path)?;
        }
        for pair in &self.overrides {
            s.set_pair(pair)?;
        }
        if let Some(v) = self.seed {
            s.set("seed", &v.to_string())?;
        }
        if let Some(v) = self.epochs {
            s.set("epochs", &v.to_string())?;
        }
        if let Some(v) = &self.mode {
            s.set("mode", v)?;
        }
        if let Some(v) = self.horizon {
            s.set("horizon", &v.to_string())?;
        }
        Ok(s)
    }

    fn out_dir(&self) -> Result<PathBuf> {
        let dir = self.out.clone().unwrap_or_else(|| PathBuf::from("."));
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    fn data_path(&self) -> Result<&Path> {
        self.data.as_deref().context("--data is required")
    }
}

fn write_snapshot(dir: &Path, settings: &Settings) -> Result<()> {
    let path = dir.join(SNAPSHOT);
    fs::write(&path, settings.render()).with_context(|| format!("writing {}", path.display()))
}

fn read_dataset(path: &Path) -> Result<SegDataset> {
    read_segv(path).with_context(|| format!("reading {}", path.display()))
}

/// `(train, validation)` from `--data`: a directory with both files, or a single training file.
fn training_data(path: &Path) -> Result<(SegDataset, Option<SegDataset>)> {
    if path.is_dir() {
        let val = path.join("val.segv");
        let val = if val.exists() { Some(read_dataset(&val)?) } else { None };
        Ok((read_dataset(&path.join("train.segv"))?, val))
    } else {
        Ok((read_dataset(path)?, None))
    }
}

/// The dataset to evaluate on: `val.segv` inside a directory, or the file itself.
fn evaluation_data(path: &Path) -> Result<SegDataset> {
    if path.is_dir() {
        read_dataset(&path.join("val.segv"))
    } else {
        read_dataset(path)
    }
}

fn generate(args: &Common) -> Result<()> {
    let settings = args.settings()?;
    let cfg = settings.gen_config()?;
    let val_count: usize = settings.get("val_sequences")?;
    let dir = args.out_dir()?;
    let train = generate_dataset(&cfg)?;
    let val = generate_validation(&cfg, val_count)?;
    write_segv(dir.join("train.segv"), &train)?;
    write_segv(dir.join("val.segv"), &val)?;
    write_snapshot(&dir, &settings)?;
    println!(
        "wrote {} training and {} validation sequences to {}",
        train.len(),
        val.len(),
        dir.display()
    );
    Ok(())
}

fn train(args: &Common) -> Result<()> {
    let settings = args.settings()?;
    let cfg = settings.train_config()?;
    let (train_data, val_data) = training_data(args.data_path()?)?;
    let dir = args.out_dir()?;
    write_snapshot(&dir, &settings)?;
    let mut log = BufWriter::new(File::create(dir.join("metrics.jsonl"))?);
    let mut log_err = None;
    let outcome = train_with(&cfg, &train_data, val_data.as_ref(), |m| {
        let line = serde_json::to_string(m).expect("metrics serialise");
        println!("{line}");
        if let Err(e) = writeln!(log, "{line}") {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e).context("writing metrics.jsonl");
    }
    log.flush()?;
    save_checkpoint(dir.join("checkpoint.fsck"), &outcome.checkpoint)?;
    if let Some(report) = &outcome.report {
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
        println!("best checkpoint: epoch {}, validation mIoU {:.4}", outcome.checkpoint.epochs, report.miou);
    }
    Ok(())
}

fn eval_threads() -> Result<Option<usize>> {
    match std::env::var("FUTURESEG_THREADS") {
        Ok(v) => {
            let n: usize = v.parse().with_context(|| format!("FUTURESEG_THREADS={v:?}"))?;
            if n == 0 {
                bail!("FUTURESEG_THREADS must be at least 1");
            }
            Ok(Some(n))
        }
        Err(_) => Ok(None),
    }
}

fn fmt_iou(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".to_string(), |v| format!("{v:.4}"))
}

fn print_side_by_side(model: &MetricsReport, copy: &MetricsReport, label: &str) {
    println!("{:<14} {:>10} {:>10}", "metric", label, "copy-last");
    println!("{:<14} {:>10.4} {:>10.4}", "mIoU", model.miou, copy.miou);
    for (h, (a, b)) in model.per_horizon_miou.iter().zip(&copy.per_horizon_miou).enumerate() {
        println!("{:<14} {:>10.4} {:>10.4}", format!("horizon {}", h + 1), a, b);
    }
    for (c, (a, b)) in model.per_class_iou.iter().zip(&copy.per_class_iou).enumerate() {
        println!("{:<14} {:>10} {:>10}", format!("IoU class {c}"), fmt_iou(*a), fmt_iou(*b));
    }
}

/// Scores predicted sequence `i`, frame `j` against ground-truth sequence `i`, frame `4 + j`.
fn score_predictions(pred: &SegDataset, gt: &SegDataset) -> Result<(MetricsReport, MetricsReport)> {
    if pred.len() != gt.len() || pred.num_classes != gt.num_classes {
        bail!(
            "prediction file has {} sequences over {} classes, ground truth {} over {}",
            pred.len(),
            pred.num_classes,
            gt.len(),
            gt.num_classes
        );
    }
    let horizon = pred.sequences.iter().map(SegSequence::len).max().unwrap_or(0);
    let k = gt.num_classes;
    let mut model: Vec<ConfusionMatrix> = (0..=horizon).map(|_| ConfusionMatrix::new(k)).collect();
    let mut copy = model.clone();
    for (i, (p, g)) in pred.sequences.iter().zip(&gt.sequences).enumerate() {
        if g.len() < INPUT_FRAMES + p.len() {
            bail!("ground-truth sequence {i} has {} frames, needs {}", g.len(), INPUT_FRAMES + p.len());
        }
        let last = &g.frames[INPUT_FRAMES - 1];
        for (j, frame) in p.frames.iter().enumerate() {
            let truth = &g.frames[INPUT_FRAMES + j];
            for idx in [0, j + 1] {
                model[idx].add(frame, truth)?;
                copy[idx].add(last, truth)?;
            }
        }
    }
    let finish = |cms: &[ConfusionMatrix]| -> Result<MetricsReport> {
        let mut r = MetricsReport::from_confusion(&cms[0])?;
        r.per_horizon_miou = cms[1..].iter().filter_map(ConfusionMatrix::miou).collect();
        Ok(r)
    };
    Ok((finish(&model)?, finish(&copy)?))
}

fn eval(args: &Common) -> Result<()> {
    let settings = args.settings()?;
    let gt = evaluation_data(args.data_path()?)?;
    let (model, copy, label) = match (&args.pred, &args.checkpoint) {
        (Some(pred), None) => {
            let pred = read_dataset(pred)?;
            let (m, c) = score_predictions(&pred, &gt)?;
            (m, c, "predicted")
        }
        (None, Some(ckpt)) => {
            let ckpt = load_checkpoint(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let opts = EvalOptions {
                horizon: settings.get("horizon")?,
                threads: eval_threads()?,
            };
            let m = evaluate_model(&ckpt, &gt, opts)?;
            let c = evaluate_copy_last(&gt, opts)?;
            (m, c, "model")
        }
        _ => bail!("eval needs exactly one of --checkpoint or --pred"),
    };
    print_side_by_side(&model, &copy, label);
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        let both = serde_json::json!({ label: model, "copy_last": copy });
        fs::write(dir.join("eval.json"), serde_json::to_string_pretty(&both)?)?;
        write_snapshot(dir, &settings)?;
    }
    Ok(())
}

fn predict(args: &Common) -> Result<()> {
    let settings = args.settings()?;
    let horizon: usize = settings.get("horizon")?;
    let ckpt_path = args.checkpoint.as_deref().context("--checkpoint is required")?;
    let ckpt = load_checkpoint(ckpt_path).with_context(|| format!("loading {}", ckpt_path.display()))?;
    let data = evaluation_data(args.data_path()?)?;
    let sequences = data
        .sequences
        .iter()
        .enumerate()
        .map(|(i, seq)| {
            if seq.len() < INPUT_FRAMES {
                bail!("sequence {i} has only {} frames", seq.len());
            }
            let inputs: Vec<&SegMap> = seq.frames[..INPUT_FRAMES].iter().collect();
            Ok(SegSequence {
                frames: predict_autoregressive(&ckpt, &inputs, horizon)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let out = SegDataset {
        sequences,
        ..data.clone()
    };
    let dir = args.out_dir()?;
    write_segv(dir.join("pred.segv"), &out)?;
    write_snapshot(&dir, &settings)?;
    println!("wrote {} predicted sequences of {horizon} frames", out.len());
    Ok(())
}

fn gradcheck_cmd(args: &Common) -> Result<()> {
    let settings = args.settings()?;
    let reports = gradcheck::full_suite(settings.get("seed")?)?;
    let mut failed = 0;
    println!("{:<34} {:>12} {:>10} {:>8}", "operation", "max rel err", "tolerance", "checked");
    for r in &reports {
        println!(
            "{:<34} {:>12.3e} {:>10.0e} {:>8} {}",
            r.name,
            r.max_rel_error,
            r.tolerance,
            r.checked,
            if r.passed() { "ok" } else { "FAIL" }
        );
        failed += usize::from(!r.passed());
    }
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        write_snapshot(dir, &settings)?;
    }
    if failed > 0 {
        bail!("{failed} gradient checks failed");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
