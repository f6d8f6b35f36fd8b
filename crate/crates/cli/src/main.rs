use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use selfnorm::bounds::write_bound_checks;
use selfnorm::contour::{write_contour_csv, ContourMetadata};
use selfnorm::geometry::{levelset_input_space, param_feasibility_contour};
use selfnorm::harness::checks::{analytic_checks, gap_checks};
use selfnorm::harness::{
    generate_synthetic, resolve_threads, run_kl_sweep, run_suite, run_tradeoff, with_threads, write_rows,
    ExperimentConfig,
};
use selfnorm::variance::{variance_report, write_variance_report};
use selfnorm::{fit_constrained, fit_mle, fit_penalized, presets, Dataset, ParamVector, WeightedInputs};

const EXIT_VIOLATION: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "selfnorm", version, about = "Self-normalized log-linear models: fits, bounds and experiments")]
struct Cli {
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file; stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; SELFNORM_THREADS takes precedence.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FitMode {
    Mle,
    Penalized,
    Constrained,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset as JSON lines.
    Gen {
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
    },
    /// Fit a model and write the result as JSON.
    Train {
        /// Dataset to fit; generated from the config at `--tau` when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
        #[arg(long, value_enum, default_value_t = FitMode::Mle)]
        mode: FitMode,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Likelihood gap over the config's δ grid for one dataset.
    Tradeoff {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
    },
    /// Likelihood gap over the config's τ grid at one δ.
    Klsweep {
        /// Defaults to the config's `kl_delta`.
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Variance report for the hard construction.
    Variance {
        #[arg(long, value_delimiter = ',', default_values_t = [3usize, 4, 5, 6])]
        dims: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [2usize, 4])]
        classes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [1.0, 5.0, 10.0, 20.0])]
        alphas: Vec<f64>,
    },
    /// Input-space level set of the log-partition for a two-class planar model.
    Levelset {
        #[arg(long, default_value_t = 0.0)]
        level: f64,
        /// Class weights as JSON, e.g. `[[-1,1],[-1,-2]]`.
        #[arg(long)]
        eta: Option<String>,
    },
    /// Parameter-space boundary of `E[A²] ≤ δ²` for the two-point model.
    Paramset {
        #[arg(long, default_value_t = 0.5)]
        delta: f64,
    },
    /// Evaluate every bound against its observed quantity; exit 1 on a violation.
    BoundsCheck {
        /// Also run the synthetic suite and check the likelihood-gap bound on every row.
        #[arg(long)]
        with_suite: bool,
    },
}

/// A failure together with its exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let invalid_input = error.chain().any(|e| {
            matches!(
                e.downcast_ref::<selfnorm::Error>(),
                Some(selfnorm::Error::Config(_) | selfnorm::Error::Argument(_) | selfnorm::Error::Json(_))
            ) || e.is::<serde_json::Error>()
        });
        Self { code: if invalid_input { EXIT_CONFIG } else { 1 }, error }
    }
}

impl From<selfnorm::Error> for Failure {
    fn from(e: selfnorm::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn config_failure(error: anyhow::Error) -> Failure {
    Failure { code: EXIT_CONFIG, error }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))
                .map_err(config_failure)?;
            ExperimentConfig::from_json(&text)
                .with_context(|| format!("invalid config {}", path.display()))
                .map_err(config_failure)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.synth.seed = seed;
    }
    if cli.threads == Some(0) {
        return Err(config_failure(anyhow::anyhow!("--threads must be at least 1")));
    }
    Ok(cfg)
}

fn output(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn dataset(cfg: &ExperimentConfig, data: Option<&Path>, tau: f64) -> anyhow::Result<Dataset> {
    match data {
        Some(p) => {
            let ds = Dataset::read_jsonl(BufReader::new(File::open(p).with_context(|| format!("opening {}", p.display()))?))?;
            if ds.d() != cfg.synth.d || ds.k() != cfg.synth.k {
                bail!(selfnorm::Error::Config(format!(
                    "dataset has d = {}, K = {} but the config has d = {}, K = {}",
                    ds.d(),
                    ds.k(),
                    cfg.synth.d,
                    cfg.synth.k
                )));
            }
            Ok(ds)
        }
        None => Ok(generate_synthetic(&cfg.synth, tau)?),
    }
}

fn write_metadata(out: Option<&Path>, meta: &ContourMetadata) -> anyhow::Result<()> {
    if let Some(p) = out {
        let path = p.with_extension("json");
        serde_json::to_writer_pretty(File::create(&path)?, meta)?;
        log::info!("metadata written to {}", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode, Failure> {
    let cfg = load_config(&cli)?;
    let threads = resolve_threads(cli.threads.or(cfg.threads)).map_err(|e| config_failure(e.into()))?;
    let out = cli.out.as_deref();
    with_threads(threads, || execute(&cli.command, &cfg, out))?
}

fn execute(command: &Command, cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExitCode, Failure> {
    let model = cfg.synth.model()?;
    match command {
        Command::Gen { tau } => {
            let ds = generate_synthetic(&cfg.synth, *tau)?;
            let mut w = output(out)?;
            ds.write_jsonl(&mut w)?;
            w.flush().map_err(anyhow::Error::from)?;
        }
        Command::Train { data, tau, mode, alpha, delta } => {
            let ds = dataset(cfg, data.as_deref(), *tau)?;
            let fit = match mode {
                FitMode::Mle => fit_mle(&model, &ds, &cfg.train)?,
                FitMode::Penalized => {
                    let alpha = alpha.ok_or_else(|| config_failure(anyhow::anyhow!("--mode penalized needs --alpha")))?;
                    fit_penalized(&model, &ds, alpha, &cfg.train)?
                }
                FitMode::Constrained => {
                    let delta = delta.ok_or_else(|| config_failure(anyhow::anyhow!("--mode constrained needs --delta")))?;
                    fit_constrained(&model, &ds, delta, &cfg.train)?
                }
            };
            let mut w = output(out)?;
            serde_json::to_writer_pretty(&mut w, &fit).map_err(anyhow::Error::from)?;
            writeln!(w).and_then(|_| w.flush()).map_err(anyhow::Error::from)?;
        }
        Command::Tradeoff { data, tau } => {
            let ds = dataset(cfg, data.as_deref(), *tau)?;
            let rows = run_tradeoff(&model, &ds, &cfg.synth.delta_grid, &cfg.train)?;
            write_rows(output(out)?, &rows)?;
        }
        Command::Klsweep { delta } => {
            let rows = run_kl_sweep(&cfg.synth, delta.unwrap_or(cfg.kl_delta), &cfg.train)?;
            write_rows(output(out)?, &rows)?;
        }
        Command::Variance { dims, classes, alphas } => {
            let mut rows = Vec::new();
            for &d in dims {
                for &k in classes {
                    rows.extend(variance_report(d, k, alphas)?);
                }
            }
            write_variance_report(output(out)?, &rows)?;
        }
        Command::Levelset { level, eta } => {
            let grid = cfg.geometry.grid()?;
            let model = presets::shared_plane_model(grid.bbox.corner_norm())?;
            let eta = match eta {
                Some(text) => {
                    let blocks: Vec<Vec<f64>> = serde_json::from_str(text).context("parsing --eta")?;
                    ParamVector::from_blocks(blocks)?
                }
                None => presets::planar_params(),
            };
            let contour = levelset_input_space(&model, &eta, grid, *level)?;
            write_contour_csv(output(out)?, &contour)?;
            write_metadata(out, &ContourMetadata::new(&contour, format!("A(x, η) = {level}, η = {:?}", eta.values())))?;
        }
        Command::Paramset { delta } => {
            let grid = cfg.geometry.grid()?;
            let (model, points) = presets::two_point_model();
            let inputs = WeightedInputs::uniform(points)?;
            let contour = param_feasibility_contour(&model, &inputs, grid, *delta)?;
            write_contour_csv(output(out)?, &contour)?;
            write_metadata(out, &ContourMetadata::new(&contour, format!("E[A²] = δ², δ = {delta}")))?;
        }
        Command::BoundsCheck { with_suite } => {
            let mut rows = analytic_checks(cfg.synth.seed)?;
            if *with_suite {
                let suite = run_suite(&cfg.synth, cfg.kl_delta, &cfg.train, true)?;
                rows.extend(gap_checks(&suite.tradeoff));
            }
            write_bound_checks(output(out)?, &rows)?;
            let failed: Vec<_> = rows.iter().filter(|r| !r.satisfied).collect();
            for r in &failed {
                log::error!(
                    "violated: {} [{}] bound {} observed {}",
                    r.bound_name,
                    r.inputs_hash,
                    r.bound_value,
                    r.observed_value
                );
            }
            if !failed.is_empty() {
                eprintln!("{} of {} bound checks violated", failed.len(), rows.len());
                return Ok(ExitCode::from(EXIT_VIOLATION));
            }
            log::info!("all {} bound checks satisfied", rows.len());
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// The error chain, skipping causes already quoted by the message above them.
fn describe(error: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in error.chain() {
        let text = cause.to_string();
        if !parts.last().is_some_and(|prev| prev.contains(&text)) {
            parts.push(text);
        }
    }
    parts.join(": ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", describe(&f.error));
            ExitCode::from(f.code)
        }
    }
}
