use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bmsmoe_cli::commands::{self, DEMO_PRECISION, DEMO_WEIGHTS};
use bmsmoe_cli::{CliError, RunConfig};

/// Block-matching SMoE speckle denoiser.
#[derive(Debug, Parser)]
#[command(name = "bmsmoe", version)]
struct Cli {
    /// `key = value` config file applied over the built-in defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (0 = all cores, 1 = serial)
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Write a per-iteration fit trace next to the output
    #[arg(long, global = true)]
    trace: bool,

    /// Override any config key, e.g. `--set max_iters=100` (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Denoise an image and write `<out>.stats.json` next to it
    Denoise {
        input: Option<PathBuf>,
        output: Option<PathBuf>,
        #[arg(long)]
        kernels: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        max_iters: Option<usize>,
        /// `average` or `loss-weighted`
        #[arg(long)]
        fusion: Option<String>,
    },
    /// Add multiplicative speckle to a clean image
    Simulate {
        input: Option<PathBuf>,
        output: Option<PathBuf>,
        #[arg(long)]
        sigma: Option<f64>,
    },
    /// Print PSNR, SSIM and GMSD of two images as JSON
    Evaluate { reference: PathBuf, test: PathBuf },
    /// Write the three-kernel 1D model as CSV
    #[command(name = "demo-1d")]
    Demo1d {
        output: PathBuf,
        #[arg(long, default_value_t = DEMO_PRECISION)]
        precision: f64,
        #[arg(long, value_delimiter = ',', default_values_t = DEMO_WEIGHTS)]
        weights: Vec<f64>,
    },
    /// Dump the matched group of one reference patch as CSV
    #[command(name = "match-dump")]
    MatchDump {
        input: PathBuf,
        ref_x: usize,
        ref_y: usize,
        /// Write to a file instead of standard output
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn build_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(workers) = cli.workers {
        cfg.denoise.workers = workers;
    }
    if cli.trace {
        cfg.trace = true;
    }
    match &cli.command {
        Command::Denoise {
            kernels,
            stride,
            max_iters,
            fusion,
            ..
        } => {
            if let Some(v) = kernels {
                cfg.denoise.kernels = *v;
            }
            if let Some(v) = stride {
                cfg.denoise.bm.stride = *v;
            }
            if let Some(v) = max_iters {
                cfg.denoise.fit.max_iters = *v;
            }
            if let Some(v) = fusion {
                cfg.set("fusion_mode", v)?;
            }
        }
        Command::Simulate { sigma: Some(s), .. } => cfg.noise.sigma = *s,
        _ => {}
    }
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = build_config(&cli)?;
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        Command::Denoise { input, output, .. } => commands::cmd_denoise(input, output, &cfg),
        Command::Simulate { input, output, .. } => {
            commands::cmd_simulate(input, output, &cfg, &mut stdout)
        }
        Command::Evaluate { reference, test } => {
            commands::cmd_evaluate(&reference, &test, &mut stdout)
        }
        Command::Demo1d {
            output,
            precision,
            weights,
        } => {
            let w: [f64; 3] = weights
                .try_into()
                .map_err(|_| CliError::Config("--weights takes exactly three values".into()))?;
            commands::cmd_demo_1d(&output, precision, &w)
        }
        Command::MatchDump {
            input,
            ref_x,
            ref_y,
            out,
        } => commands::cmd_match_dump(&input, (ref_x, ref_y), &cfg, out.as_deref(), &mut stdout),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
