use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lrssm::Error;
use lrssm_cli::commands;
use lrssm_cli::config::ExperimentConfig;
use serde_json::json;

/// Thread count for batch-parallel work; defaults to all cores.
const THREADS_ENV: &str = "LRSSM_THREADS";

const EXIT_ERROR: u8 = 1;
const EXIT_GRADCHECK: u8 = 3;

#[derive(Parser)]
#[command(name = "lrssm", version, about = "Structured variational inference for state-space models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.lr=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (`output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset file (`data.path`).
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct InferArgs {
    /// Checkpoint (`infer.checkpoint`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    max_sequences: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Smooth,
    Filter,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Dataset file to write.
        #[arg(long)]
        output: PathBuf,
    },
    /// Train a model; writes checkpoints and the training curve.
    Train {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to resume from (`resume`).
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Smoothed or filtered latent trajectories.
    Infer {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        infer: InferArgs,
        #[arg(long, value_enum, default_value = "smooth")]
        mode: Mode,
    },
    /// Smooth a context window, then sample forward.
    Forecast {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        infer: InferArgs,
        #[arg(long)]
        context: Option<usize>,
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Wall time of the structured pass against the dense filter.
    Benchmark {
        #[command(flatten)]
        common: Common,
        /// Comma-separated latent sizes (`benchmark.latent_dims`).
        #[arg(long, value_delimiter = ',')]
        dims: Option<Vec<usize>>,
    },
    /// Finite-difference gradient check on a tiny instance.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Held-out ELBO, latent recovery, forecast error and co-smoothing.
    Metrics {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn quoted(p: &std::path::Path) -> String {
    toml::Value::String(p.display().to_string()).to_string()
}

impl Common {
    fn overrides(&self) -> Vec<String> {
        let mut o = self.overrides.clone();
        if let Some(s) = self.seed {
            o.push(format!("seed={s}"));
        }
        if let Some(p) = &self.out {
            o.push(format!("output_dir={}", quoted(p)));
        }
        if let Some(p) = &self.data {
            o.push(format!("data.path={}", quoted(p)));
        }
        o
    }
}

impl InferArgs {
    fn push(&self, o: &mut Vec<String>) {
        if let Some(p) = &self.checkpoint {
            o.push(format!("infer.checkpoint={}", quoted(p)));
        }
        if let Some(s) = self.samples {
            o.push(format!("infer.samples={s}"));
        }
        if let Some(m) = self.max_sequences {
            o.push(format!("infer.max_sequences={m}"));
        }
    }
}

fn load(common: &Common, extra: Vec<String>) -> lrssm::Result<ExperimentConfig> {
    let mut o = common.overrides();
    o.extend(extra);
    ExperimentConfig::load(common.config.as_deref(), &o)
}

fn print_json(v: &impl serde::Serialize) -> lrssm::Result<()> {
    let s = serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))?;
    println!("{s}");
    Ok(())
}

fn run(cli: Cli) -> lrssm::Result<u8> {
    match cli.command {
        Command::Generate { common, output } => {
            let cfg = load(&common, vec![])?;
            let ds = commands::run_generate(&cfg, &output)?;
            print_json(&json!({ "path": output, "sequences": ds.len(), "obs_dim": ds.obs_dim() }))?;
        }
        Command::Train { common, resume, epochs } => {
            let mut extra = vec![];
            if let Some(p) = resume {
                extra.push(format!("resume={}", quoted(&p)));
            }
            if let Some(e) = epochs {
                extra.push(format!("train.epochs={e}"));
            }
            let cfg = load(&common, extra)?;
            let out = commands::run_train(&cfg)?;
            print_json(&json!({
                "output_dir": cfg.output_dir,
                "epochs": out.curve.len(),
                "final": out.curve.last(),
            }))?;
        }
        Command::Infer { common, infer, mode } => {
            let mut extra = vec![];
            infer.push(&mut extra);
            extra.push(format!(
                "infer.mode=\"{}\"",
                match mode {
                    Mode::Smooth => "smooth",
                    Mode::Filter => "filter",
                }
            ));
            let cfg = load(&common, extra)?;
            let (files, res) = commands::run_infer(&cfg)?;
            print_json(&json!({ "files": files, "sequences": res.len() }))?;
        }
        Command::Forecast {
            common,
            infer,
            context,
            horizon,
        } => {
            let mut extra = vec!["infer.mode=\"forecast\"".to_string()];
            infer.push(&mut extra);
            if let Some(c) = context {
                extra.push(format!("infer.context={c}"));
            }
            if let Some(h) = horizon {
                extra.push(format!("infer.horizon={h}"));
            }
            let cfg = load(&common, extra)?;
            let (files, res) = commands::run_infer(&cfg)?;
            print_json(&json!({ "files": files, "sequences": res.len() }))?;
        }
        Command::Benchmark { common, dims } => {
            let mut extra = vec![];
            if let Some(d) = dims {
                extra.push(format!("benchmark.latent_dims={d:?}"));
            }
            let cfg = load(&common, extra)?;
            print_json(&commands::run_bench(&cfg)?)?;
        }
        Command::Gradcheck { common, tolerance } => {
            let mut extra = vec![];
            if let Some(t) = tolerance {
                extra.push(format!("gradcheck.tolerance={t:e}"));
            }
            let cfg = load(&common, extra)?;
            let out = commands::run_gradcheck(&cfg)?;
            let summary: Vec<_> = out
                .iter()
                .map(|o| json!({ "variant": o.variant, "max_rel_err": o.max_rel_err, "passed": o.passed }))
                .collect();
            print_json(&summary)?;
            if out.iter().any(|o| !o.passed) {
                return Ok(EXIT_GRADCHECK);
            }
        }
        Command::Metrics { common, checkpoint } => {
            let mut extra = vec![];
            if let Some(p) = checkpoint {
                extra.push(format!("infer.checkpoint={}", quoted(&p)));
            }
            let cfg = load(&common, extra)?;
            print_json(&commands::run_metrics(&cfg)?)?;
        }
    }
    Ok(0)
}

fn error_json(e: &Error) -> serde_json::Value {
    let mut step = None;
    let mut inner = e;
    while let Error::AtStep { step: s, source } = inner {
        step.get_or_insert(*s);
        inner = source;
    }
    let kind = match inner {
        Error::NonFinite { .. } => "non_finite",
        Error::Shape { .. } => "shape",
        Error::NumericalBreakdown { .. } => "numerical_breakdown",
        Error::NegativeKl { .. } => "negative_kl",
        Error::Invalid(_) => "invalid",
        Error::Domain(_) => "domain",
        Error::Format(_) => "format",
        Error::Io(_) => "io",
        Error::AtStep { .. } => unreachable!(),
    };
    json!({ "error": { "kind": kind, "message": e.to_string(), "step": step } })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n = match v.parse::<usize>() {
            Ok(n) if n > 0 => n,
            _ => {
                let e = Error::Invalid(format!("{THREADS_ENV} must be a positive integer, got `{v}`"));
                eprintln!("{}", error_json(&e));
                return ExitCode::from(EXIT_ERROR);
            }
        };
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already initialized: {e}");
        }
    }
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::from(EXIT_ERROR)
        }
    }
}
