//! `dehaze`: synthesis, training, evaluation, inference, gradient checks
//! and model analysis.
//!
//! Exit codes: 0 success, 1 usage, 2 data or I/O, 3 numeric failure.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use dehaze::hazegen::{self, ppm};
use dehaze::metrics::SsimOptions;
use dehaze::network::{analyze, load_checkpoint, save_checkpoint, Model, Preset};
use dehaze::training::{self, FrozenExtractor, EXTRACTOR_SEED};
use dehaze::{kv, selfcheck, Error, Shape, Tensor};

use config::{RunConfig, KEYS};

#[derive(Parser, Debug)]
#[command(name = "dehaze", version, about = "Single-image dehazing toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a directory of synthetic hazy/clear pairs and a manifest.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Number of pairs.
        #[arg(long)]
        count: Option<usize>,
        /// Image side in pixels.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train on a dataset directory; writes model.ckpt, train.log and config.txt to --out.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset directory.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Dehaze one PPM image.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Run the gradient-check suite.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Count parameters and MACs and compare with the published figures.
    Analyze {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Debug, Default)]
struct Common {
    /// key=value configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    res: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long = "beta-cr")]
    beta_cr: Option<f64>,
    #[arg(long)]
    attention: Option<String>,
    #[arg(long)]
    kernels: Option<String>,
    /// Any configuration key, as key=value; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Numeric(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Data(e) | Failure::Numeric(e) => e,
        }
    }
}

/// Errors from running a subcommand: bad numbers are numeric failures,
/// everything else is about the data.
impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFiniteLoss { .. } => Failure::Numeric(e.into()),
            e => Failure::Data(e.into()),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(anyhow!("{msg}"))
}

fn io_context<T>(r: std::io::Result<T>, path: &Path) -> std::result::Result<T, Failure> {
    r.with_context(|| path.display().to_string()).map_err(Failure::Data)
}

impl Common {
    fn resolve(&self, extra: &[(&str, Option<String>)]) -> std::result::Result<RunConfig, Failure> {
        let mut pairs = Vec::new();
        if let Some(path) = &self.config {
            let text = io_context(fs::read_to_string(path), path)?;
            pairs = kv::parse(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        }
        let flags = [
            ("preset", self.preset.clone()),
            ("seed", self.seed.map(|v| v.to_string())),
            ("out", self.out.as_ref().map(|p| p.display().to_string())),
            ("res", self.res.map(|v| v.to_string())),
            ("steps", self.steps.map(|v| v.to_string())),
            ("beta_cr", self.beta_cr.map(|v| v.to_string())),
            ("attention", self.attention.clone()),
            ("kernels", self.kernels.clone()),
        ];
        for (k, v) in flags.iter().chain(extra) {
            if let Some(v) = v {
                pairs.push((k.to_string(), v.clone()));
            }
        }
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
            pairs.push((k.trim().to_owned(), v.trim().to_owned()));
        }
        RunConfig::from_pairs(&pairs).map_err(usage)
    }
}

fn path_of(p: Option<&PathBuf>, key: &str) -> std::result::Result<PathBuf, Failure> {
    p.cloned()
        .ok_or_else(|| usage(format!("missing {key} (flag --{key} or config key {key})")))
}

fn path_str(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn synth(cfg: &RunConfig) -> Outcome {
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("data"));
    let samples = hazegen::make_dataset(&cfg.synth)?;
    hazegen::write_dataset(&out, &samples)?;
    println!(
        "wrote {} pairs of {}x{} to {}",
        samples.len(),
        cfg.synth.size,
        cfg.synth.size,
        out.display()
    );
    Ok(())
}

fn train(cfg: &RunConfig) -> Outcome {
    let data_dir = path_of(cfg.data.as_ref(), "data")?;
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("run"));
    let data = hazegen::load_dataset(&data_dir)?;
    io_context(fs::create_dir_all(&out), &out)?;
    let config_path = out.join("config.txt");
    io_context(fs::write(&config_path, cfg.train_text()), &config_path)?;

    let mut model = Model::build(cfg.model)?;
    let extractor = FrozenExtractor::new(EXTRACTOR_SEED)?;
    let ckpt = out.join("model.ckpt");
    let log_path = out.join("train.log");
    let mut log = String::new();
    let result = training::train(&mut model, &data, &cfg.train, &cfg.loss, &extractor, |e| {
        log.push_str(&format!("{}\n", e.line));
        if let Some(p) = e.line.psnr {
            log::info!("step {} loss {:.6} psnr {p}", e.line.step, e.line.loss);
        }
        if e.checkpoint_due {
            save_checkpoint(e.model, &ckpt)?;
            fs::write(&log_path, &log).map_err(|err| Error::Io {
                path: log_path.clone(),
                source: err,
            })?;
        }
        Ok(())
    });
    if result.is_err() {
        // keep the partial log for diagnosis
        fs::write(&log_path, &log).ok();
    }
    let report = result?;
    println!("final psnr {}", report.final_psnr);
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

fn eval(cfg: &RunConfig) -> Outcome {
    let model = load_checkpoint(path_of(cfg.checkpoint.as_ref(), "checkpoint")?)?;
    let data = hazegen::load_dataset(path_of(cfg.data.as_ref(), "data")?)?;
    let report = training::evaluate(&model, &data, SsimOptions { luma: cfg.luma })?;
    print!("{}", report.lines());
    if let Some(out) = &cfg.out {
        io_context(fs::write(out, report.table()), out)?;
    }
    Ok(())
}

/// Edge-replicates `t` up to the next multiple of 4 in each direction.
fn pad_to_4(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (h, w) = (s.h.div_ceil(4) * 4, s.w.div_ceil(4) * 4);
    if (h, w) == (s.h, s.w) {
        return t.clone();
    }
    Tensor::from_fn(Shape::new(s.n, s.c, h, w), |n, c, y, x| {
        t.at(n, c, y.min(s.h - 1), x.min(s.w - 1))
    })
    .expect("nonzero shape")
}

fn infer(cfg: &RunConfig) -> Outcome {
    let model = load_checkpoint(path_of(cfg.checkpoint.as_ref(), "checkpoint")?)?;
    let input = path_of(cfg.input.as_ref(), "input")?;
    let out = path_of(cfg.out.as_ref(), "out")?;
    let hazy = ppm::read(&input)?;
    let s = hazy.shape();
    let dehazed = model.infer(&pad_to_4(&hazy))?.crop(0, 0, s.h, s.w)?;
    ppm::write(&out, &dehazed)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn gradcheck(cfg: &RunConfig) -> Outcome {
    let report = selfcheck::run_suite(cfg.seed)?;
    println!("{report}");
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Numeric(anyhow!(
            "{} gradient checks failed",
            report.failures().count()
        )))
    }
}

fn analyze_cmd(cfg: &RunConfig) -> Outcome {
    let preset = cfg.preset.unwrap_or(Preset::S);
    let mut model = cfg.model;
    if cfg.preset.is_none() {
        model.blocks = preset.blocks();
    }
    let a = analyze(&model, preset, cfg.res)?;
    print!("{a}");
    if a.passed() {
        Ok(())
    } else {
        Err(Failure::Numeric(anyhow!("counts outside tolerance")))
    }
}

fn set_threads() -> Outcome {
    let Ok(v) = std::env::var("MDN_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("MDN_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(e.into()))
}

fn run(cli: Cli) -> Outcome {
    set_threads()?;
    match &cli.command {
        Command::Synth { common, count, size } => synth(&common.resolve(&[
            ("count", count.map(|v| v.to_string())),
            ("size", size.map(|v| v.to_string())),
        ])?),
        Command::Train { common, data } => train(&common.resolve(&[("data", path_str(data))])?),
        Command::Eval {
            common,
            data,
            checkpoint,
        } => eval(&common.resolve(&[("data", path_str(data)), ("checkpoint", path_str(checkpoint))])?),
        Command::Infer {
            common,
            checkpoint,
            input,
        } => infer(&common.resolve(&[("checkpoint", path_str(checkpoint)), ("input", path_str(input))])?),
        Command::Gradcheck { common } => gradcheck(&common.resolve(&[])?),
        Command::Analyze { common } => analyze_cmd(&common.resolve(&[])?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let mut keys = String::from("Config keys (file lines or --set KEY=VALUE):\n");
    for (k, doc) in KEYS.iter().filter(|(_, d)| !d.is_empty()) {
        keys.push_str(&format!("  {k:<18} {doc}\n"));
    }
    keys.push_str("  plus the model keys blocks, dims, mlp_expansion, attention, kernels, pa_gate, residual, zero_updates, zero_head\n");
    let parsed = Cli::command()
        .after_long_help(keys.clone())
        .mut_subcommands(|c| c.after_long_help(keys.clone()))
        .try_get_matches()
        .and_then(|m| Cli::from_arg_matches(&m));
    let cli = match parsed {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}
