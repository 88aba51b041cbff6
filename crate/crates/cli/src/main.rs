mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mlfuse::data::{generate_correspondence_dataset, generate_quality_dataset, Dataset, Split};
use mlfuse::gradcheck::{primitive_suite, tiny_model_report, GRAD_TOLERANCE};
use mlfuse::model::{Model, Task};
use mlfuse::params::ParamStore;
use mlfuse::training::{ablate, ablation_rows, evaluate, fit, write_history, Checkpoint};
use mlfuse::{Error, Result};

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "mlfuse", version, about = "Multi-level fusion quality assessment on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat TOML config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `task` (quality | correspondence).
    #[arg(long)]
    task: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a planted-signal dataset: manifest plus image blobs.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a manifest; writes checkpoints and history.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory holding manifest.jsonl.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Overrides `variant`.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Print SRCC/PLCC of a checkpoint on one split of a manifest.
    Eval {
        /// Defaults to config.toml beside the checkpoint when present.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Train every ablation setting and write the report.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Finite-difference check of the primitives and the tiny models.
    Gradcheck {
        /// Model to check; both when omitted.
        #[arg(long, value_enum)]
        model: Option<ModelArg>,
        #[arg(long, value_enum, default_value = "f64")]
        dtype: DtypeArg,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum SplitArg {
    Train,
    Test,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum ModelArg {
    Mglf,
    Mpef,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum DtypeArg {
    F32,
    F64,
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        2
    } else if e.is_io() {
        3
    } else {
        1
    }
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load_or_default(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(task) = &common.task {
        cfg.task = task.parse::<Task>()?.name().into();
    }
    Ok(cfg)
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.into(),
        source: e,
    })
}

fn load_data(dir: &Path, cfg: &RunConfig) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(Error::Io {
            path: dir.into(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "data directory not found"),
        });
    }
    Dataset::load(dir, cfg.synth()?)
}

fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let synth = cfg.synth()?;
    let mut data = match cfg.task()? {
        Task::PerceptualQuality => generate_quality_dataset(&synth, cfg.n, cfg.seed)?,
        Task::Correspondence => generate_correspondence_dataset(&synth, cfg.n, cfg.seed)?,
    };
    data.split(cfg.train_ratio, cfg.seed)?;
    create_out(out)?;
    data.save(out)?;
    cfg.echo(out)?;
    println!(
        "wrote {} records ({} train / {} test) to {}",
        data.len(),
        data.indices(Split::Train).len(),
        data.indices(Split::Test).len(),
        out.display()
    );
    Ok(())
}

fn train(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<()> {
    let model_cfg = cfg.model()?;
    let train_cfg = cfg.train()?;
    let data = load_data(data_dir, cfg)?;
    create_out(out)?;
    cfg.echo(out)?;
    let fitted = fit(&model_cfg, &data, &train_cfg, &mut |r| {
        let fmt = |v: Option<f64>| v.map_or("-".to_owned(), |v| format!("{v:.4}"));
        println!(
            "epoch {:>3} {:<5} loss {:.6} srcc {} plcc {}",
            r.epoch,
            if r.split == Split::Train { "train" } else { "test" },
            r.loss,
            fmt(r.srcc),
            fmt(r.plcc)
        );
    })?;
    let o = &fitted.outcome;
    o.last.save(&out.join("last.ckpt"))?;
    o.best.save(&out.join("best.ckpt"))?;
    write_history(&out.join("history.jsonl"), &o.history)?;
    println!("best epoch {}; checkpoints in {}", o.best_epoch, out.display());
    Ok(())
}

fn eval(config: Option<&Path>, checkpoint: &Path, data_dir: &Path, split: SplitArg) -> Result<()> {
    let beside = checkpoint.parent().map(|p| p.join("config.toml")).filter(|p| p.is_file());
    let cfg = RunConfig::load_or_default(config.or(beside.as_deref()))?;
    let model_cfg = cfg.model()?;
    let ck = Checkpoint::<f32>::load(checkpoint)?;
    let mut store = ParamStore::new();
    let model = Model::build(&model_cfg, &mut store, cfg.seed)?;
    ck.restore(&mut store)?;
    let data = load_data(data_dir, &cfg)?;
    let split = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let c = evaluate(&model, &store, &data, &data.indices(split), cfg.batch_size)?;
    println!("srcc {:.6} plcc {:.6}", c.srcc, c.plcc);
    Ok(())
}

fn run_ablation(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<()> {
    let base = cfg.model()?;
    let train_cfg = cfg.train()?;
    let data = load_data(data_dir, cfg)?;
    create_out(out)?;
    cfg.echo(out)?;
    let report = ablate(&data, &base, &train_cfg, &ablation_rows(base.task), &mut |row| {
        let fmt = |v: Option<f64>| v.map_or("undefined".to_owned(), |v| format!("{v:.4}"));
        println!("{:<30} srcc {} plcc {}", row.setting.setting, fmt(row.srcc), fmt(row.plcc));
    })?;
    report.save(&out.join("ablation.jsonl"))
}

/// Returns whether every check met the tolerance.
fn gradcheck(model: Option<ModelArg>, dtype: DtypeArg) -> Result<bool> {
    if let DtypeArg::F32 = dtype {
        return Err(Error::Config("finite-difference checks run in f64 only".into()));
    }
    let mut worst: f64 = 0.0;
    for (name, err) in primitive_suite()? {
        println!("primitive {name:<24} {err:.3e}");
        worst = worst.max(err);
    }
    let tasks: Vec<Task> = match model {
        Some(ModelArg::Mglf) => vec![Task::PerceptualQuality],
        Some(ModelArg::Mpef) => vec![Task::Correspondence],
        None => vec![Task::PerceptualQuality, Task::Correspondence],
    };
    for task in tasks {
        let report = tiny_model_report(task)?;
        for (group, err) in &report.groups {
            println!("{:<9} {group:<24} {err:.3e}", task.block_kind().prefix());
        }
        worst = worst.max(report.max_error());
    }
    let passed = worst <= GRAD_TOLERANCE;
    println!(
        "max relative error {worst:.3e} (tolerance {GRAD_TOLERANCE:.0e}): {}",
        if passed { "pass" } else { "FAIL" }
    );
    Ok(passed)
}

/// `Ok(false)` means the command ran but a numerical check failed.
fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Synth { common, n, out } => {
            let mut cfg = resolve(&common)?;
            if let Some(n) = n {
                cfg.n = n;
            }
            synth(&cfg, &out).map(|_| true)
        }
        Command::Train {
            common,
            data,
            out,
            epochs,
            variant,
        } => {
            let mut cfg = resolve(&common)?;
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(v) = variant {
                cfg.variant = v;
            }
            train(&cfg, &data, &out).map(|_| true)
        }
        Command::Eval {
            config,
            checkpoint,
            data,
            split,
        } => eval(config.as_deref(), &checkpoint, &data, split).map(|_| true),
        Command::Ablate {
            common,
            data,
            out,
            epochs,
        } => {
            let mut cfg = resolve(&common)?;
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            run_ablation(&cfg, &data, &out).map(|_| true)
        }
        Command::Gradcheck { model, dtype } => gradcheck(model, dtype),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
