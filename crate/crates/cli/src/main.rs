//! `d2ip` experiment harness.
//!
//! ```text
//! d2ip simulate    --scenario case1 --frames 20 --snr-db 40 --out runs/sim
//! d2ip reconstruct --input runs/sim --method d2ip --out runs/d2ip
//! d2ip reconstruct --input runs/sim --method tikhonov --mu-sweep --out runs/tik
//! d2ip evaluate    --recon runs/d2ip/recon.f64 --truth runs/sim/truth.f64 --out runs/eval
//! d2ip report      runs/d2ip runs/tik --out runs/report
//! ```
//!
//! Settings come from built-in defaults, then `--config <file.json>`, then
//! explicit flags. Relative output directories are placed under
//! `$D2IP_OUTPUT_ROOT` when it is set.

mod commands;
mod config;
mod error;
mod plot;

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use d2ip_core::d2ip::{DataMode, Strategy, LR_MEASURED};
use d2ip_core::geometry::ProtocolScheme;

use crate::commands::{EvaluateInputs, ReconstructInputs};
use crate::config::{ExperimentConfig, Method, Profile, Scenario};
use crate::error::{CliResult, EXIT_CONFIG};

#[derive(Parser)]
#[command(name = "d2ip", version, about = "Time-sequence 3D EIT reconstruction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a lung phantom sequence and its boundary measurements.
    Simulate(SimulateArgs),
    /// Reconstruct a measurement sequence with D2IP or a baseline.
    Reconstruct(ReconstructArgs),
    /// Score a reconstruction against ground truth and plot per-frame metrics.
    Evaluate(EvaluateArgs),
    /// Compare timing and convergence across run directories.
    Report(ReportArgs),
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; explicit flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long)]
    cols: Option<usize>,
    #[arg(long)]
    planes: Option<usize>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long, value_enum)]
    scenario: Option<Scenario>,
    /// Number of time frames T.
    #[arg(long)]
    frames: Option<usize>,
    /// Per-frame SNR in dB; `inf` for noise-free data.
    #[arg(long)]
    snr_db: Option<f64>,
    /// Measurement protocol: adjacent_in_layer or cross_layer.
    #[arg(long)]
    scheme: Option<ProtocolScheme>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ReconstructArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    grid: GridArgs,
    /// Directory written by `simulate` (or holding external files).
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum)]
    method: Option<Method>,
    /// Override the sensitivity matrix file.
    #[arg(long)]
    sensitivity: Option<PathBuf>,
    /// Override the voltage sequence file.
    #[arg(long)]
    voltages: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Tikhonov regularization weight.
    #[arg(long)]
    mu: Option<f64>,
    /// Run Tikhonov for every mu in 0.001..0.01.
    #[arg(long)]
    mu_sweep: bool,
    /// Solve sweep members concurrently.
    #[arg(long)]
    parallel: bool,
    /// Strategies to ablate, e.g. `--disable upws,tpp`.
    #[arg(long, value_delimiter = ',')]
    disable: Vec<Strategy>,
    #[arg(long, value_enum)]
    profile: Option<Profile>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    iters_warm: Option<usize>,
    #[arg(long)]
    iters_first: Option<usize>,
    #[arg(long)]
    iters_next: Option<usize>,
    #[arg(long)]
    record_every: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
    /// Data term: l2 or squared.
    #[arg(long)]
    data_mode: Option<DataMode>,
    /// Lower end of the output map (defaults to the simulated scenario's range).
    #[arg(long, allow_hyphen_values = true)]
    output_lo: Option<f64>,
    /// Upper end of the output map.
    #[arg(long, allow_hyphen_values = true)]
    output_hi: Option<f64>,
    /// 1-based frame used for warm-start pretraining.
    #[arg(long)]
    warm_frame: Option<usize>,
    /// External voltage file whose first frame drives warm-start pretraining.
    #[arg(long)]
    warm_voltages: Option<PathBuf>,
    #[arg(long)]
    lambda_tv: Option<f64>,
    #[arg(long)]
    tv_iterations: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    recon: PathBuf,
    /// Ground-truth sequence; omit when none exists.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// PSNR peak; defaults to each truth frame's dynamic range.
    #[arg(long)]
    peak: Option<f64>,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    common: Common,
    /// Run directories produced by `reconstruct`.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
}

fn base_config(common: &Common, default_out: &str) -> CliResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load_or_default(common.config.as_deref())?;
    if common.config.is_none() {
        cfg.output_dir = PathBuf::from(default_out);
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn apply_grid(cfg: &mut ExperimentConfig, g: &GridArgs) {
    if let Some(v) = g.rows {
        cfg.rows = v;
    }
    if let Some(v) = g.cols {
        cfg.cols = v;
    }
    if let Some(v) = g.planes {
        cfg.planes = v;
    }
}

fn run(cli: Cli, argv: &[String]) -> CliResult<()> {
    match cli.command {
        Command::Simulate(a) => {
            let mut cfg = base_config(&a.common, "runs/simulate")?;
            apply_grid(&mut cfg, &a.grid);
            if let Some(v) = a.scenario {
                cfg.scenario = v;
            }
            if let Some(v) = a.frames {
                cfg.frames = v;
            }
            if let Some(v) = a.snr_db {
                cfg.snr_db = (v != f64::INFINITY).then_some(v);
            }
            if let Some(v) = a.scheme {
                cfg.scheme = v;
            }
            if let Some(v) = a.seed {
                cfg.seed = v;
            }
            commands::simulate(&cfg, argv)?;
        }
        Command::Reconstruct(a) => {
            let mut cfg = base_config(&a.common, "runs/reconstruct")?;
            apply_grid(&mut cfg, &a.grid);
            if let Some(v) = a.method {
                cfg.method = v;
            }
            if let Some(v) = a.seed {
                cfg.seed = v;
                cfg.d2ip.seed = v;
            }
            if let Some(v) = a.mu {
                cfg.tikhonov.mu = v;
            }
            if a.mu_sweep {
                cfg.tikhonov.sweep = d2ip_core::baselines::default_mu_sweep();
            }
            cfg.parallel |= a.parallel;
            let d = &mut cfg.d2ip;
            if let Some(p) = a.profile {
                d.learning_rate = match p {
                    Profile::Simulation => d2ip_core::d2ip::LR_SIMULATION,
                    Profile::Measured => LR_MEASURED,
                };
            }
            if let Some(v) = a.learning_rate {
                d.learning_rate = v;
            }
            if let Some(v) = a.iters_warm {
                d.iters_warm = v;
            }
            if let Some(v) = a.iters_first {
                d.iters_first = v;
            }
            if let Some(v) = a.iters_next {
                d.iters_next = v;
            }
            if let Some(v) = a.record_every {
                d.record_every = v;
            }
            if let Some(v) = a.base_channels {
                d.network.base_channels = v;
            }
            if let Some(v) = a.data_mode {
                d.data_mode = v;
            }
            if let Some(v) = a.output_lo {
                d.output_map.lo = v;
            }
            if let Some(v) = a.output_hi {
                d.output_map.hi = v;
            }
            if let Some(v) = a.warm_frame {
                d.warm_start_frame = v;
            }
            if let Some(v) = a.lambda_tv {
                cfg.tv.lambda_tv = v;
            }
            if let Some(v) = a.tv_iterations {
                cfg.tv.iterations = v;
            }
            let scenario_output_map = a.common.config.is_none() && a.output_lo.is_none() && a.output_hi.is_none();
            let disable: BTreeSet<Strategy> = a.disable.into_iter().collect();
            let inputs = ReconstructInputs {
                input_dir: a.input,
                sensitivity: a.sensitivity,
                voltages: a.voltages,
                warm_voltages: a.warm_voltages,
                disable,
                scenario_output_map,
            };
            commands::reconstruct(&cfg, &inputs, argv)?;
        }
        Command::Evaluate(a) => {
            let cfg = base_config(&a.common, "runs/evaluate")?;
            let inputs = EvaluateInputs {
                recon: a.recon,
                truth: a.truth,
                peak: a.peak,
            };
            commands::evaluate(&cfg, &inputs, argv)?;
        }
        Command::Report(a) => {
            let cfg = base_config(&a.common, "runs/report")?;
            commands::report(&cfg, &a.runs, argv)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
