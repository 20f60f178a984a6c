//! Command-line entry point: `train`, `segment`, `evaluate`, `synth` and
//! `gradcheck`, plus the weight-file and config formats they share.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors.
//! Diagnostics go to stderr.

pub mod config;
pub mod weights;

pub use config::{CommandConfig, ConfigError, Origin};
pub use weights::{load_weights, read_weights, save_weights, WeightFile, WeightsError};

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::data::{self, pad_sample, padded_size, pnm, FovMask, Image, SynthSpec};
use crate::eval::{binarize, evaluate, otsu_threshold, predict_map};
use crate::gradcheck;
use crate::model::{Discriminator, Generator};
use crate::training::train;

pub const SEED_ENV: &str = "SEGAN_SEED";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    /// Plain skip-concat decoder (drops attention too).
    Msfrb,
    /// Attention off inside MSFRB.
    Am,
    Gan,
    Bce,
    Mae,
}

#[derive(Debug, Parser)]
#[command(name = "segan", version, about = "Symmetric equilibrium GAN for retinal vessel segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a generator on a sample directory and write its weights.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// key=value settings file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Ablation to apply; repeatable.
        #[arg(long, value_enum)]
        ablate: Vec<Ablation>,
        /// Override one setting, `key=value`; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Metrics log path (default: `<out>.log`).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Write the probability map of one image as P5.
    Segment {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the Otsu-binarized map next to `out` (`<stem>_binary.pgm`).
        #[arg(long)]
        binary: bool,
        /// Field-of-view mask for the Otsu threshold (default: whole frame).
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Print the metrics report of a generator on a sample directory.
    Evaluate {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Write synthetic sample triples.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}={v} is not a nonnegative integer"))),
        Err(_) => Ok(None),
    }
}

fn seed_or_env(seed: Option<u64>) -> Result<u64, CliError> {
    Ok(match seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    })
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Train {
            data,
            out,
            config,
            seed,
            ablate,
            set,
            log,
        } => {
            let cfg = train_settings(config.as_deref(), seed, &ablate, &set)?;
            let log = log.unwrap_or_else(|| {
                let mut p = out.clone().into_os_string();
                p.push(".log");
                PathBuf::from(p)
            });
            cmd_train(&data, &out, &log, &cfg)
        }
        Command::Segment {
            weights,
            image,
            out,
            binary,
            mask,
        } => cmd_segment(&weights, &image, &out, binary, mask.as_deref()),
        Command::Evaluate { weights, data } => cmd_evaluate(&weights, &data),
        Command::Synth { out, count, seed, size } => cmd_synth(&out, count, seed_or_env(seed)?, size),
        Command::Gradcheck { seed } => cmd_gradcheck(seed_or_env(seed)?),
    }
}

/// Defaults, then `SEGAN_SEED`, then the config file, then flags.
pub fn train_settings(
    config: Option<&Path>,
    seed: Option<u64>,
    ablate: &[Ablation],
    set: &[String],
) -> Result<CommandConfig, CliError> {
    let mut cfg = CommandConfig::default();
    if let Some(s) = env_seed()? {
        cfg.set("seed", &s.to_string(), Origin::Env(SEED_ENV))?;
    }
    if let Some(path) = config {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        cfg.merge_text(&text, &path.display().to_string())?;
    }
    for a in set {
        cfg.merge_assignment(a)?;
    }
    if let Some(s) = seed {
        cfg.set("seed", &s.to_string(), Origin::Flag)?;
    }
    for a in ablate {
        let keys: &[&str] = match a {
            Ablation::Msfrb => &["enable_msfrb", "enable_am"],
            Ablation::Am => &["enable_am"],
            Ablation::Gan => &["use_gan_loss"],
            Ablation::Bce => &["use_bce"],
            Ablation::Mae => &["use_mae"],
        };
        for k in keys {
            cfg.set(k, "false", Origin::Flag)?;
        }
    }
    // Surface value errors as usage errors before any work starts.
    cfg.train_config()?.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let (g, d) = cfg.plans()?;
    g.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    d.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn cmd_train(data_dir: &Path, out: &Path, log_path: &Path, cfg: &CommandConfig) -> Result<(), CliError> {
    let config = cfg.train_config()?;
    let (g_plan, d_plan) = cfg.plans()?;
    let dataset = data::load_dir(data_dir).map_err(runtime)?;
    // Pad everything to one common size so any two samples can share a batch.
    let (tw, th) = dataset
        .samples
        .iter()
        .map(|s| padded_size(s.width(), s.height()))
        .fold((0, 0), |(a, b), (w, h)| (a.max(w), b.max(h)));
    let samples = dataset
        .samples
        .iter()
        .map(|s| pad_sample(s, tw, th).map(|(p, _)| p))
        .collect::<Result<Vec<_>, _>>()
        .map_err(runtime)?;
    let g = Generator::build(g_plan, config.seed).map_err(runtime)?;
    let d = Discriminator::build(d_plan, config.seed.wrapping_add(1)).map_err(runtime)?;

    let mut log = String::new();
    let outcome = train(g, d, &samples, config, |l| {
        eprintln!("{l}");
        log.push_str(&format!("{l}\n"));
    })
    .map_err(runtime)?;
    log.push_str("# final: mean of the last rounds\n");
    log.push_str(&outcome.final_report.to_string());
    save_weights(&outcome.trainer.g, out).map_err(runtime)?;
    fs::write(log_path, log).map_err(|e| runtime(format!("{}: {e}", log_path.display())))?;
    Ok(())
}

/// Builds a generator from the plan stored in the file, then loads it.
pub fn load_generator(path: &Path) -> Result<Generator, WeightsError> {
    let file = read_weights(path)?;
    let mut g = Generator::build(file.plan.clone(), 0).map_err(|e| WeightsError::Malformed {
        offset: 4,
        reason: e.to_string(),
    })?;
    weights::apply(&mut g, file)?;
    Ok(g)
}

fn binary_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}_binary.pgm"))
}

fn cmd_segment(weights: &Path, image: &Path, out: &Path, binary: bool, mask: Option<&Path>) -> Result<(), CliError> {
    let g = load_generator(weights).map_err(runtime)?;
    let img = pnm::load(image).map_err(runtime)?;
    if img.channels() != 3 {
        return Err(runtime(format!("{}: expected an RGB (P6) image", image.display())));
    }
    let map = predict_map(&g, &img).map_err(runtime)?;
    pnm::save(&map, out).map_err(runtime)?;
    if binary {
        let mask = match mask {
            Some(p) => pnm::load_mask(p).map_err(runtime)?,
            None => FovMask::full(map.width(), map.height()).map_err(runtime)?,
        };
        if (mask.width(), mask.height()) != (map.width(), map.height()) {
            return Err(runtime("mask and image sizes differ"));
        }
        let t = otsu_threshold(map.data(), mask.data()).map_err(runtime)?;
        let bits: Vec<f64> = binarize(map.data(), t)
            .into_iter()
            .zip(mask.data())
            .map(|(b, &m)| if b && m { 1.0 } else { 0.0 })
            .collect();
        let bin = Image::new(map.width(), map.height(), 1, bits).map_err(runtime)?;
        pnm::save(&bin, &binary_path(out)).map_err(runtime)?;
    }
    Ok(())
}

fn cmd_evaluate(weights: &Path, data_dir: &Path) -> Result<(), CliError> {
    let g = load_generator(weights).map_err(runtime)?;
    let dataset = data::load_dir(data_dir).map_err(runtime)?;
    let ev = evaluate(&g, &dataset.samples, true).map_err(runtime)?;
    print!("{}", ev.report);
    Ok(())
}

fn cmd_synth(out: &Path, count: usize, seed: u64, size: usize) -> Result<(), CliError> {
    if count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    let samples = (0..count as u64)
        .map(|i| {
            data::synth_generate(&SynthSpec {
                width: size,
                height: size,
                ..SynthSpec::with_seed(seed.wrapping_add(i))
            })
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    fs::create_dir_all(out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    data::save_dir(out, &samples).map_err(runtime)?;
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> Result<(), CliError> {
    let mut reports = gradcheck::primitive_suite(seed).map_err(runtime)?;
    reports.extend(gradcheck::end_to_end_suite(seed).map_err(runtime)?);
    let mut stdout = std::io::stdout().lock();
    for r in &reports {
        let _ = writeln!(stdout, "{r}");
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(runtime(format!("{failed} of {} gradient checks failed", reports.len())));
    }
    Ok(())
}
