//! Command-line front end. `run` returns the process exit code:
//! 0 on success, 1 for usage errors, 2 for runtime failures.

use std::ffi::OsString;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{Preset, RunConfig};
use crate::data_pipeline::{
    assign_folds, build_sample_pairs, load_fold_override, load_manifest, normalize_to_signed_unit, participant_counts,
    FoldSplit, Modality, StudyLoader, StudyRecord,
};
use crate::error::Error;
use crate::metrics::{evaluate_pair, metrics_csv, MetricReport};
use crate::phantom::{generate_cohort, PhantomConfig, PhantomPreset};
use crate::trainer::{load_samples, predict_volume, run_crossval, Arch, Trainer};
use crate::volume::{read_volume, write_volume, Volume};

#[derive(Debug, Parser)]
#[command(name = "longflair", version, about = "Time-lag conditioned longitudinal FLAIR synthesis")]
struct Cli {
    /// TOML run configuration layered over the preset.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Overrides the training (or phantom) seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// desk_scale or paper_scale; for `phantom` also isbi-shape or desk.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic longitudinal cohort and its manifest.
    Phantom(PhantomArgs),
    /// Train one model on all folds but one.
    Train(TrainArgs),
    /// Synthesize a follow-up FLAIR from four source volumes.
    Predict(PredictArgs),
    /// Score predicted volumes against references.
    Evaluate(EvaluateArgs),
    /// K-fold cross-validation at the participant level.
    Crossval(CrossvalArgs),
}

#[derive(Debug, Args)]
struct PhantomArgs {
    /// Cube side in voxels.
    #[arg(long)]
    side: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    /// Volume file extension: nii, nii.gz or vol.
    #[arg(long)]
    format: Option<String>,
}

#[derive(Debug, Args)]
struct DataArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    folds: Option<usize>,
    /// JSON map from participant id to fold index.
    #[arg(long, value_name = "FILE")]
    fold_override: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainingArgs {
    #[arg(long)]
    arch: Option<Arch>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    epochs_const: Option<usize>,
    #[arg(long)]
    epochs_decay: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    training: TrainingArgs,
    /// Held-out validation fold.
    #[arg(long, default_value_t = 0)]
    fold: usize,
}

#[derive(Debug, Args)]
struct CrossvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    training: TrainingArgs,
}

#[derive(Debug, Args)]
struct PredictArgs {
    /// Checkpoint stem (`run/best`, `run/best.ckpt` or `run/best.json`).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    mprage: PathBuf,
    #[arg(long)]
    t2: PathBuf,
    #[arg(long)]
    pd: PathBuf,
    #[arg(long)]
    flair: PathBuf,
    /// Time lag in days, at least 1.
    #[arg(long, value_parser = clap::value_parser!(i64).range(1..))]
    days: i64,
    /// Follow-up FLAIR to score the prediction against.
    #[arg(long)]
    target: Option<PathBuf>,
    /// PNG with the mid-axial slice of source, prediction and target.
    #[arg(long, value_name = "FILE")]
    preview: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long, value_name = "DIR")]
    pred: PathBuf,
    #[arg(long = "ref", value_name = "DIR")]
    reference: PathBuf,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] Error),
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            1
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::Phantom(a) => phantom(&cli, a),
        Command::Train(a) => train(&cli, a),
        Command::Predict(a) => predict(&cli, a),
        Command::Evaluate(a) => evaluate(&cli, a),
        Command::Crossval(a) => crossval(&cli, a),
    }
}

fn phantom(cli: &Cli, a: &PhantomArgs) -> CliResult<()> {
    let preset = match cli.preset.as_deref() {
        None | Some("desk") | Some("desk_scale") => PhantomPreset::Desk,
        Some("isbi-shape") | Some("paper_scale") => PhantomPreset::IsbiShape,
        Some(other) => return usage(format!("unknown phantom preset {other:?} (valid: isbi-shape, desk)")),
    };
    let mut cfg = PhantomConfig::preset(preset);
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.side {
        cfg.side = s;
    }
    if let Some(n) = a.noise {
        cfg.noise = n;
    }
    if let Some(f) = &a.format {
        cfg.extension = f.clone();
    }
    if let Err(e) = cfg.validate() {
        return usage(e.to_string());
    }
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("phantom"));
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let summary = generate_cohort(&cfg, &out)?;
    let n_records: usize = summary.participants.iter().map(|p| p.days.len()).sum();
    println!(
        "wrote {} participants, {} examinations; manifest {}",
        summary.participants.len(),
        n_records,
        summary.manifest.display()
    );
    Ok(())
}

/// Resolves the run configuration: preset, then `--config`, then flags.
fn resolve_config(cli: &Cli, data: &DataArgs, training: &TrainingArgs) -> CliResult<RunConfig> {
    let fallback = match cli.preset.as_deref() {
        Some(p) => match p.parse::<Preset>() {
            Ok(p) => p,
            Err(e) => return usage(e.to_string()),
        },
        None => Preset::DeskScale,
    };
    let mut table = match &cli.config {
        Some(path) => RunConfig::read_table(path)?,
        None => toml::Table::new(),
    };
    if cli.preset.is_some() {
        table.insert("preset".into(), fallback.name().into());
    }
    let section = |t: &mut toml::Table, name: &str| -> toml::Table {
        match t.remove(name) {
            Some(toml::Value::Table(s)) => s,
            _ => toml::Table::new(),
        }
    };
    let mut tr = section(&mut table, "train");
    if let Some(a) = training.arch {
        tr.insert("arch".into(), a.name().into());
    }
    if let Some(s) = cli.seed {
        tr.insert("seed".into(), toml::Value::Integer(s as i64));
    }
    if let Some(n) = training.max_steps {
        tr.insert("max_steps".into(), toml::Value::Integer(n as i64));
    }
    if let Some(n) = training.epochs_const {
        tr.insert("epochs_const".into(), toml::Value::Integer(n as i64));
    }
    if let Some(n) = training.epochs_decay {
        tr.insert("epochs_decay".into(), toml::Value::Integer(n as i64));
    }
    table.insert("train".into(), tr.into());
    let mut da = section(&mut table, "data");
    if let Some(m) = &data.manifest {
        da.insert("manifest".into(), m.display().to_string().into());
    }
    if let Some(k) = data.folds {
        da.insert("folds".into(), toml::Value::Integer(k as i64));
    }
    if let Some(f) = &data.fold_override {
        da.insert("fold_override".into(), f.display().to_string().into());
    }
    table.insert("data".into(), da.into());
    RunConfig::from_table(table, fallback).or_else(|e| usage(e.to_string()))
}

fn load_cohort(cfg: &RunConfig) -> CliResult<(Vec<StudyRecord>, FoldSplit)> {
    let Some(manifest) = &cfg.data.manifest else {
        return usage("no manifest given (use --manifest or data.manifest in the config)");
    };
    let records = load_manifest(manifest)?;
    let override_map = match &cfg.data.fold_override {
        Some(p) => Some(load_fold_override(p)?),
        None => None,
    };
    let split = assign_folds(
        &participant_counts(&records),
        cfg.data.folds,
        cfg.data.fold_seed,
        override_map.as_ref(),
    )?;
    Ok((records, split))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(BufWriter::new(f), value).map_err(Error::from)?;
    Ok(())
}

fn prepare_out_dir(cli: &Cli, default: &str, cfg: &RunConfig) -> CliResult<PathBuf> {
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(default));
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let p = out.join("config.toml");
    std::fs::write(&p, cfg.to_toml()?).map_err(|e| Error::io(&p, e))?;
    Ok(out)
}

fn train(cli: &Cli, a: &TrainArgs) -> CliResult<()> {
    let cfg = resolve_config(cli, &a.data, &a.training)?;
    let (records, split) = load_cohort(&cfg)?;
    if a.fold >= split.k {
        return usage(format!("--fold {} must be below the fold count {}", a.fold, split.k));
    }
    let out = prepare_out_dir(cli, "run", &cfg)?;
    write_json(&out.join("folds.json"), &split)?;
    let pairs = build_sample_pairs(&records);
    let (train_p, val_p) = split.split_pairs(&pairs, a.fold);
    let n_classes = (cfg.train.arch == Arch::Acgan).then_some(cfg.train.n_classes);
    let mut loader = StudyLoader::new(cfg.data.crop_spec(), n_classes, cfg.data.cache);
    let train_s = load_samples(&mut loader, &train_p)?;
    let val_s = load_samples(&mut loader, &val_p)?;
    log::info!("fold {}: {} training and {} validation samples", a.fold, train_s.len(), val_s.len());
    let mut trainer = Trainer::<f32>::new(cfg.train.clone(), cfg.model.clone(), cfg.data.crop_spec())?;
    trainer.set_fold(Some(a.fold));
    let outcome = trainer.fit(&train_s, &val_s, Some(&out))?;
    println!(
        "trained {} for {} steps; validation L1 {:.5} -> {:.5} (best at epoch {})",
        cfg.train.arch,
        trainer.steps(),
        outcome.initial_val_l1(),
        outcome.final_val_l1(),
        outcome.best_epoch
    );
    Ok(())
}

fn crossval(cli: &Cli, a: &CrossvalArgs) -> CliResult<()> {
    let cfg = resolve_config(cli, &a.data, &a.training)?;
    let (records, split) = load_cohort(&cfg)?;
    let out = prepare_out_dir(cli, "crossval", &cfg)?;
    write_json(&out.join("folds.json"), &split)?;
    let report = run_crossval(&records, &split, &cfg.train, &cfg.model, &cfg.data.crop_spec(), Some(&out))?;
    print!("{}", report.to_csv()?);
    Ok(())
}

fn predict(cli: &Cli, a: &PredictArgs) -> CliResult<()> {
    let trainer = Trainer::<f32>::load_checkpoint(&a.checkpoint)?;
    let crop = trainer.crop().clone();
    let mut generator = trainer.bundle().generator.clone();
    let paths = [&a.mprage, &a.t2, &a.pd, &a.flair];
    let raw: Vec<Volume> = paths.iter().map(|p| read_volume(p)).collect::<crate::Result<_>>()?;
    let pred = predict_volume(&mut generator, &raw, &crop, a.days)?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("prediction.nii.gz"));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_volume(&out, &pred)?;
    println!("wrote {} ({:?} voxels, lag {} days)", out.display(), pred.shape(), a.days);
    let target = match &a.target {
        Some(p) => Some(normalize_to_signed_unit(&crop.apply(&read_volume(p)?)?)?),
        None => None,
    };
    if let Some(t) = &target {
        let r = evaluate_pair("prediction", &pred, t)?;
        print!("{}", metrics_csv(&[r])?);
    }
    if let Some(p) = &a.preview {
        let source = normalize_to_signed_unit(&crop.apply(&raw[Modality::Flair.channel()])?)?;
        let mut panels = vec![&source, &pred];
        panels.extend(target.as_ref());
        write_preview(p, &panels)?;
    }
    Ok(())
}

/// Mid-axial slices placed side by side, each mapped from [-1, 1] to 8 bits.
fn write_preview(path: &Path, volumes: &[&Volume]) -> CliResult<()> {
    let [w, h, d] = volumes[0].shape();
    let z = d / 2;
    let width = w * volumes.len();
    let mut pixels = vec![0u8; width * h];
    for (k, v) in volumes.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let val = ((v.get(x, y, z) + 1.0) * 127.5).round().clamp(0.0, 255.0);
                // Rows run top to bottom with y increasing upward.
                pixels[(h - 1 - y) * width + k * w + x] = val as u8;
            }
        }
    }
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(f), width as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let fmt = |e: png::EncodingError| Error::Format(format!("{}: {e}", path.display()));
    enc.write_header().map_err(fmt)?.write_image_data(&pixels).map_err(fmt)?;
    Ok(())
}

/// Volume files in `dir`, keyed by file name without the volume extension.
fn volume_files(dir: &Path) -> CliResult<Vec<(String, PathBuf)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let stem = [".nii.gz", ".nii", ".vol"].iter().find_map(|ext| name.strip_suffix(ext));
        if let Some(stem) = stem {
            out.push((stem.to_string(), path));
        }
    }
    out.sort();
    Ok(out)
}

fn evaluate(cli: &Cli, a: &EvaluateArgs) -> CliResult<()> {
    let preds = volume_files(&a.pred)?;
    let refs = volume_files(&a.reference)?;
    let names = |v: &[(String, PathBuf)]| v.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>();
    let (pn, rn) = (names(&preds), names(&refs));
    if pn.is_empty() {
        return Err(Error::invalid(format!("no volumes in {}", a.pred.display())).into());
    }
    if pn != rn {
        let only_pred: Vec<_> = pn.iter().filter(|n| !rn.contains(n)).cloned().collect();
        let only_ref: Vec<_> = rn.iter().filter(|n| !pn.contains(n)).cloned().collect();
        return Err(Error::invalid(format!(
            "prediction and reference volumes differ; only predicted: [{}]; only reference: [{}]",
            only_pred.join(", "),
            only_ref.join(", ")
        ))
        .into());
    }
    let mut reports: Vec<MetricReport> = Vec::with_capacity(preds.len());
    for ((id, p), (_, r)) in preds.iter().zip(&refs) {
        reports.push(evaluate_pair(id, &read_volume(p)?, &read_volume(r)?)?);
    }
    let text = metrics_csv(&reports)?;
    match &cli.out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e))?,
        None => print!("{text}"),
    }
    Ok(())
}
