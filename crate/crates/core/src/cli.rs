//! The `rwt` command line: argument parsing, config resolution and the five
//! subcommands.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | runtime failure (I/O while writing results, other errors) |
//! | 2 | usage or configuration error, including missing input files |
//! | 3 | unreadable data or checkpoint file (magic, version, truncation, checksum) |
//! | 4 | numerical failure (divergence, non-finite gradient, gradient check above threshold) |

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{self, comparison_tsv};
use crate::model::{checkpoint, ResRnnConfig, Variant};
use crate::nn::CircleConfig;
use crate::phantom::{self, io as dataset_io};
use crate::train::{self, model_grad_check};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_FORMAT: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Gradient-check pass threshold on the maximum relative error.
pub const GRADCHECK_THRESHOLD: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "rwt", version, about = "Regional wall thickness estimation with residual recurrent networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom dataset and its manifest.
    Generate(Common),
    /// Train one model on every subject of a dataset.
    Train(Common),
    /// Evaluate a checkpoint on a dataset.
    Eval(Common),
    /// Five-fold cross-validated comparison of model variants.
    Ablate(Common),
    /// Whole-model finite-difference gradient check on the toy configuration.
    Gradcheck(Common),
}

#[derive(Debug, Args, Default)]
pub struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output file (generate) or directory (other commands).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses every available processor.
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Circle depth for both the temporal and the spatial runner.
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long = "spacing-mm")]
    pub spacing_mm: Option<f64>,
    #[arg(long)]
    pub subjects: Option<usize>,
    /// Dataset file to read.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint file to read (eval).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Training iterations per run.
    #[arg(long)]
    pub iters: Option<usize>,
}

impl Common {
    /// Loads the config file (if any) and applies flag overrides.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.run.seed = s;
            cfg.train.seed = s;
        }
        if let Some(w) = self.workers {
            cfg.run.workers = w;
        }
        if let Some(v) = self.variant {
            cfg.model.variant = v;
        }
        if let Some(d) = self.depth {
            let d = CircleConfig::new(d).map_err(|e| Error::Config(e.to_string()))?;
            cfg.model.temporal_depth = d;
            cfg.model.spatial_depth = d;
        }
        if let Some(s) = self.spacing_mm {
            cfg.run.spacing_mm = Some(s);
        }
        if let Some(n) = self.subjects {
            cfg.run.subjects = n;
        }
        if let Some(p) = &self.data {
            cfg.run.data = Some(p.clone());
        }
        if let Some(p) = &self.checkpoint {
            cfg.run.checkpoint = Some(p.clone());
        }
        if let Some(p) = &self.out {
            cfg.run.out = Some(p.clone());
        }
        if let Some(i) = self.iters {
            cfg.train.max_iters = i;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Maps an error to its documented exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) | Error::InvalidSpec(_) => EXIT_USAGE,
        Error::BadMagic { .. }
        | Error::Version { .. }
        | Error::Truncated(_)
        | Error::Checksum { .. }
        | Error::Malformed(_) => EXIT_FORMAT,
        Error::Diverged { .. } | Error::NonFiniteGradient(_) => EXIT_NUMERIC,
        Error::Shape { .. } | Error::Io(_) => EXIT_RUNTIME,
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: &Command) -> Result<i32> {
    let (common, name) = match cmd {
        Command::Generate(c) => (c, "generate"),
        Command::Train(c) => (c, "train"),
        Command::Eval(c) => (c, "eval"),
        Command::Ablate(c) => (c, "ablate"),
        Command::Gradcheck(c) => (c, "gradcheck"),
    };
    let cfg = common.resolve()?;
    configure_workers(cfg.run.workers);
    match cmd {
        Command::Generate(_) => cmd_generate(&cfg),
        Command::Train(_) => cmd_train(&cfg),
        Command::Eval(_) => cmd_eval(&cfg),
        Command::Ablate(_) => cmd_ablate(&cfg),
        Command::Gradcheck(_) => cmd_gradcheck(&cfg, common.variant.is_some()),
    }
    .inspect(|_| log::debug!("{name} finished"))
}

fn configure_workers(workers: usize) {
    if workers > 0 {
        // Fails only if the pool already exists (repeated in-process runs).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();
    }
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("missing --{flag} (or run.{flag} in the config file)")))
}

fn existing<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    let path = required(p, flag)?;
    if !path.is_file() {
        return Err(Error::Config(format!("--{flag} {} does not exist", path.display())));
    }
    Ok(path)
}

fn output_dir(cfg: &RunConfig) -> Result<&Path> {
    let dir = required(&cfg.run.out, "out")?;
    fs::create_dir_all(dir)
        .map_err(|e| Error::Config(format!("cannot create output directory {}: {e}", dir.display())))?;
    Ok(dir)
}

fn echo_config(cfg: &RunConfig, path: &Path) -> Result<()> {
    fs::write(path, cfg.to_toml()?)?;
    Ok(())
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<i32> {
    if cfg.run.subjects == 0 {
        return Err(Error::InvalidArgument("--subjects must be at least 1".into()));
    }
    let out = required(&cfg.run.out, "out")?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        if !parent.is_dir() {
            return Err(Error::Config(format!("directory {} does not exist", parent.display())));
        }
    }
    let data = phantom::generate_dataset(cfg.run.subjects, cfg.run.seed, &cfg.phantom)?;
    dataset_io::save_dataset(out, &data)?;
    fs::write(dataset_io::manifest_path(out), dataset_io::manifest(&data))?;
    let mut echo = out.as_os_str().to_owned();
    echo.push(".config.toml");
    echo_config(cfg, Path::new(&echo))?;
    println!(
        "wrote {} subjects ({} frames) to {}",
        data.len(),
        data.iter().map(|s| s.frames.len()).sum::<usize>(),
        out.display()
    );
    Ok(EXIT_OK)
}

fn model_for(cfg: &RunConfig, data: &[phantom::CineSequence]) -> Result<ResRnnConfig> {
    let first = data
        .first()
        .ok_or_else(|| Error::InvalidArgument("dataset has no subjects".into()))?;
    let mut m = cfg.model.clone();
    if first.frames.len() != m.frames {
        return Err(Error::Config(format!(
            "dataset has {} frames per subject, model.frames is {}",
            first.frames.len(),
            m.frames
        )));
    }
    m.regions = first.labels.regions();
    m.flat_features()?;
    Ok(m)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<i32> {
    let data_path = existing(&cfg.run.data, "data")?;
    let dir = output_dir(cfg)?;
    echo_config(cfg, &dir.join("config.toml"))?;
    let data = dataset_io::load_dataset(data_path)?;
    let model = model_for(cfg, &data)?;
    let started = Instant::now();
    let outcome = train::train(&data, &model, &cfg.train, None)?;
    checkpoint::save(&dir.join("model.rwtc"), &model, &outcome.params)?;
    fs::write(dir.join("loss.tsv"), train::loss_curve_tsv(&outcome.loss_curve))?;
    let last = outcome.loss_curve.last().map_or(f64::NAN, |p| p.1);
    println!(
        "trained {} for {} iterations in {:.1}s, final loss {last:.6e}; checkpoint {}",
        model.variant,
        cfg.train.max_iters,
        started.elapsed().as_secs_f64(),
        dir.join("model.rwtc").display()
    );
    Ok(EXIT_OK)
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<i32> {
    let data_path = existing(&cfg.run.data, "data")?;
    let ckpt = existing(&cfg.run.checkpoint, "checkpoint")?;
    let dir = output_dir(cfg)?;
    echo_config(cfg, &dir.join("config.toml"))?;
    let (model, params) = checkpoint::load(ckpt)?;
    let data = dataset_io::load_dataset(data_path)?;
    let report = eval::evaluate(&params, &data, &model, cfg.run.spacing_mm)?;
    let table = report.table_tsv();
    fs::write(dir.join("metrics.tsv"), &table)?;
    fs::write(dir.join("per_frame.tsv"), report.per_frame_tsv())?;
    print!("{table}");
    Ok(EXIT_OK)
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<i32> {
    let data_path = existing(&cfg.run.data, "data")?;
    let dir = output_dir(cfg)?;
    echo_config(cfg, &dir.join("config.toml"))?;
    let data = dataset_io::load_dataset(data_path)?;
    let base = model_for(cfg, &data)?;
    let splits = eval::five_fold(&data, cfg.run.seed)?;
    fs::write(dir.join("folds.json"), serde_json::to_string_pretty(&splits).map_err(|e| Error::Malformed(e.to_string()))?)?;
    let cfgs: Vec<ResRnnConfig> = cfg.ablate.variants.iter().map(|&v| base.clone().with_variant(v)).collect();
    let started = Instant::now();
    let results = eval::run_cv(&data, &splits, &cfgs, &cfg.train, cfg.run.spacing_mm)?;
    for r in &results {
        let stem = r.variant().name();
        fs::write(dir.join(format!("{stem}.metrics.tsv")), r.report.table_tsv())?;
        fs::write(dir.join(format!("{stem}.per_frame.tsv")), r.report.per_frame_tsv())?;
    }
    let table = comparison_tsv(&results);
    fs::write(dir.join("ablation.tsv"), &table)?;
    print!("{table}");
    log::info!("ablation took {:.1}s", started.elapsed().as_secs_f64());
    Ok(EXIT_OK)
}

/// Checks every variant (or only the configured one when `only_configured`)
/// on the toy configuration with the configured circle depths.
pub fn cmd_gradcheck(cfg: &RunConfig, only_configured: bool) -> Result<i32> {
    let variants: Vec<Variant> = if only_configured {
        vec![cfg.model.variant]
    } else {
        Variant::ALL.to_vec()
    };
    let mut worst: f64 = 0.0;
    for v in variants {
        let toy = ResRnnConfig::toy().with_variant(v);
        let report = model_grad_check(&toy, cfg.run.seed, 1e-5)?;
        let e = report.max_error();
        worst = worst.max(e);
        println!(
            "{:<16} {} max relative error {e:.3e}",
            v.name(),
            if e < GRADCHECK_THRESHOLD { "PASS" } else { "FAIL" }
        );
        for (name, pe) in report.per_param.iter().filter(|p| p.1 >= GRADCHECK_THRESHOLD) {
            println!("    {name}: {pe:.3e}");
        }
    }
    println!("overall max relative error {worst:.3e} (threshold {GRADCHECK_THRESHOLD:e})");
    Ok(if worst < GRADCHECK_THRESHOLD { EXIT_OK } else { EXIT_NUMERIC })
}
