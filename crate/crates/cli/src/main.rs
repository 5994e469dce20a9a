use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use lobster::checkpoint::{self, Checkpoint, SaveOptions};
use lobster::config::parse_kv;
use lobster::experiment::{load_splits, Arch, DatasetKind, SYNTHETIC_VAL_SIZE};
use lobster::metrics::{self, CsvSink, MetricsRow, StageKind, FLOPS_CONVENTION};
use lobster::train::{train, RunResult, TrainConfig};

#[derive(Parser)]
#[command(name = "lobster", version, about = "Sparse training with gated weight decay and loss-bounded pruning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Train and prune a model; writes model.lobs and metrics.csv.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Summarise a metrics file.
    Report(ReportArgs),
}

#[derive(clap::Args)]
struct TrainArgs {
    /// key = value config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root holding mnist/ and fashion-mnist/ IDX directories.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// lenet300 or lenet5
    #[arg(long)]
    arch: Option<String>,
    /// mnist, fashion-mnist or synthetic
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "run")]
    out: PathBuf,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    /// lobster, l2 or none
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    pwe: Option<usize>,
    #[arg(long)]
    twt: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    val_size: Option<usize>,
    /// Use only the first N training samples.
    #[arg(long)]
    train_limit: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalSplit {
    Train,
    Val,
    Test,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to the dataset the checkpoint was trained on.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "val")]
    split: EvalSplit,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Csv,
    Json,
}

#[derive(clap::Args)]
struct ReportArgs {
    #[arg(long)]
    metrics: PathBuf,
    /// Recompute the final sparsity from this checkpoint's masks.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
    /// Write to a file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Everything a run needs: trainer settings plus data selection.
struct RunSettings {
    train: TrainConfig,
    arch: Arch,
    dataset: DatasetKind,
    data_dir: PathBuf,
    train_limit: Option<usize>,
}

impl RunSettings {
    fn from_text(text: &str) -> Result<Self> {
        let mut s = Self {
            train: TrainConfig::default(),
            arch: Arch::Lenet300,
            dataset: DatasetKind::Mnist,
            data_dir: PathBuf::from("data"),
            train_limit: None,
        };
        let mut val_set = false;
        for (k, v) in parse_kv(text)? {
            s.set(&k, &v)?;
            val_set |= k == "val_size";
        }
        if !val_set && s.dataset == DatasetKind::Synthetic {
            s.train.val_size = SYNTHETIC_VAL_SIZE;
        }
        Ok(s)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "arch" => self.arch = value.parse()?,
            "dataset" => self.dataset = value.parse()?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "train_limit" => {
                self.train_limit = Some(value.parse().with_context(|| format!("invalid train_limit `{value}`"))?)
            }
            _ => self.train.set(key, value)?,
        }
        Ok(())
    }

    fn to_text(&self) -> String {
        let mut out = format!(
            "arch = {}\ndataset = {}\ndata_dir = {}\n",
            self.arch,
            self.dataset,
            self.data_dir.display()
        );
        if let Some(l) = self.train_limit {
            writeln!(out, "train_limit = {l}").unwrap();
        }
        out + &self.train.to_kv_text()
    }
}

fn trace_text(run: &RunResult) -> String {
    let mut out = String::from("stage,epochs,end,best_loss,boundary,threshold,pruned,pruned_loss,probes\n");
    for s in &run.stages {
        writeln!(
            out,
            "{},{},{:?},{},{},{},{},{},{}",
            s.stage, s.epochs, s.end, s.best_loss, s.boundary, s.threshold, s.pruned, s.pruned_loss, s.probes
        )
        .unwrap();
    }
    out
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut text = match &args.config {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?,
        None => String::new(),
    };
    let flags: [(&str, Option<String>); 14] = [
        ("arch", args.arch),
        ("dataset", args.dataset),
        ("data_dir", args.data_dir.map(|p| p.display().to_string())),
        ("seed", args.seed.map(|v| v.to_string())),
        ("lr", args.lr.map(|v| v.to_string())),
        ("lambda", args.lambda.map(|v| v.to_string())),
        ("momentum", args.momentum.map(|v| v.to_string())),
        ("variant", args.variant),
        ("pwe", args.pwe.map(|v| v.to_string())),
        ("twt", args.twt.map(|v| v.to_string())),
        ("batch_size", args.batch_size.map(|v| v.to_string())),
        ("max_epochs", args.max_epochs.map(|v| v.to_string())),
        ("val_size", args.val_size.map(|v| v.to_string())),
        ("train_limit", args.train_limit.map(|v| v.to_string())),
    ];
    // flags replace file entries with the same key
    let overridden: Vec<(&str, String)> = flags.into_iter().filter_map(|(k, v)| v.map(|v| (k, v))).collect();
    let kept: Vec<(String, String)> = parse_kv(&text)?
        .into_iter()
        .filter(|(k, _)| !overridden.iter().any(|(o, _)| o == k))
        .collect();
    text = kept
        .iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .chain(overridden.iter().map(|(k, v)| format!("{k} = {v}\n")))
        .collect();
    let settings = RunSettings::from_text(&text)?;
    settings.train.validate()?;

    let data = load_splits(
        settings.dataset,
        &settings.data_dir,
        settings.train.val_size,
        settings.train_limit,
        settings.train.seed,
    )
    .with_context(|| format!("loading {} from {}", settings.dataset, settings.data_dir.display()))?;
    let model = settings.arch.build(settings.train.seed)?;

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let metrics_path = args.out.join("metrics.csv");
    let ckpt_path = args.out.join("model.lobs");
    let mut sink = CsvSink::create(&metrics_path)?;
    info!(
        "training {} on {} ({} train / {} val)",
        settings.arch,
        settings.dataset,
        data.train.len(),
        data.validation.len()
    );
    let run = train(model, &data, &settings.train, &mut sink)?;
    let config = settings.to_text();
    fs::write(args.out.join("config.txt"), &config)?;
    checkpoint::save(
        &Checkpoint {
            model: run.model.clone(),
            config,
            trace: trace_text(&run),
        },
        &ckpt_path,
        SaveOptions::default(),
    )?;
    let sp = metrics::sparsity(&run.model);
    println!("epochs: {}", run.epochs.len());
    println!("stages: {}", run.stages.len());
    println!("budget_exhausted: {}", run.budget_exhausted);
    println!("sparsity_pct: {}", sp.sparsity_pct());
    if let Some(t) = run.test {
        println!("test_top1_error_pct: {}", 100.0 * t.top1_error);
    }
    println!("checkpoint: {}", ckpt_path.display());
    println!("metrics: {}", metrics_path.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let ckpt = checkpoint::load(&args.checkpoint)?;
    let mut settings = RunSettings::from_text(&ckpt.config).context("checkpoint config")?;
    if let Some(d) = args.dataset {
        settings.dataset = d.parse()?;
    }
    if let Some(d) = args.data_dir {
        settings.data_dir = d;
    }
    let data = load_splits(
        settings.dataset,
        &settings.data_dir,
        settings.train.val_size,
        settings.train_limit,
        settings.train.seed,
    )?;
    let (name, set) = match args.split {
        EvalSplit::Train => ("train", &data.train),
        EvalSplit::Val => ("val", &data.validation),
        EvalSplit::Test => ("test", data.test.as_ref().expect("test split is always loaded")),
    };
    let eval = ckpt.model.evaluate(set)?;
    let sp = metrics::sparsity(&ckpt.model);
    println!("split: {name}");
    println!("samples: {}", set.len());
    println!("loss: {}", eval.loss);
    println!("top1_error_pct: {}", 100.0 * eval.top1_error);
    println!("sparsity_pct: {}", sp.sparsity_pct());
    println!("alive: {}/{}", sp.alive, sp.total);
    println!("flops: {}", metrics::flops(&ckpt.model)?);
    println!("flops_convention: {FLOPS_CONVENTION}");
    Ok(())
}

fn check_row(row: &MetricsRow) -> Result<()> {
    let alive: usize = row.layers.iter().map(|l| l.alive).sum();
    let total: usize = row.layers.iter().map(|l| l.total).sum();
    if alive != row.alive || total != row.total {
        bail!(
            "epoch {}: per-layer counts {alive}/{total} disagree with the global {}/{}",
            row.epoch,
            row.alive,
            row.total
        );
    }
    let pct = 100.0 * (total - alive) as f64 / total.max(1) as f64;
    if pct != row.sparsity_pct {
        bail!("epoch {}: logged sparsity {} but counts give {pct}", row.epoch, row.sparsity_pct);
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let rows = metrics::read_csv(&args.metrics)?;
    let Some(last) = rows.last() else {
        bail!("{}: no metrics rows", args.metrics.display());
    };
    rows.iter().try_for_each(check_row)?;
    let mut layers = last.layers.clone();
    if let Some(path) = &args.checkpoint {
        let ckpt = checkpoint::load(path)?;
        let sp = metrics::sparsity(&ckpt.model);
        if sp.alive != last.alive || sp.total != last.total {
            bail!(
                "checkpoint masks give {}/{} alive but the final metrics row says {}/{}",
                sp.alive,
                sp.total,
                last.alive,
                last.total
            );
        }
        layers = sp.layers;
    }

    let prune_rows: Vec<&MetricsRow> = rows.iter().filter(|r| r.stage == StageKind::Prune).collect();
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let text = match args.format {
        Format::Json => metrics::to_json(&rows)?,
        Format::Csv => {
            let mut out = String::from("stage,epoch,val_loss,test_top1,sparsity_pct,alive,total,threshold,flops\n");
            for r in &prune_rows {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{}",
                    r.stage_index,
                    r.epoch,
                    r.val_loss,
                    opt(r.test_top1),
                    r.sparsity_pct,
                    r.alive,
                    r.total,
                    opt(r.threshold),
                    r.flops
                )?;
            }
            out.push_str("\nlayer,alive,total,sparsity_pct\n");
            for l in &layers {
                writeln!(out, "{},{},{},{}", l.layer, l.alive, l.total, l.sparsity_pct())?;
            }
            out
        }
        Format::Table => {
            let mut out = String::new();
            writeln!(out, "{} epochs, {} pruning stages", rows.iter().filter(|r| r.stage == StageKind::Learn).count(), prune_rows.len())?;
            writeln!(out, "{:>5} {:>6} {:>12} {:>9} {:>12} {:>12}", "stage", "epoch", "val_loss", "sparsity", "threshold", "flops")?;
            for r in &prune_rows {
                writeln!(
                    out,
                    "{:>5} {:>6} {:>12.6} {:>8.3}% {:>12.4e} {:>12}",
                    r.stage_index,
                    r.epoch,
                    r.val_loss,
                    r.sparsity_pct,
                    r.threshold.unwrap_or(0.0),
                    r.flops
                )?;
            }
            if let Some(t) = last.test_top1 {
                writeln!(out, "final test top-1 error: {t:.3}%")?;
            }
            writeln!(out, "final sparsity: {:.3}% ({}/{} alive)", last.sparsity_pct, last.alive, last.total)?;
            writeln!(out, "\n{:<8} {:>10} {:>10} {:>10}", "layer", "alive", "total", "surviving")?;
            for l in &layers {
                writeln!(
                    out,
                    "{:<8} {:>10} {:>10} {:>9.3}%",
                    l.layer,
                    l.alive,
                    l.total,
                    100.0 - l.sparsity_pct()
                )?;
            }
            writeln!(out, "\nflops convention: {FLOPS_CONVENTION}")?;
            out
        }
    };
    match &args.out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
