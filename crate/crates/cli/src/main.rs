use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use swavenet::train::EvalMode;
use swavenet_cli::commands::{EvalRequest, Metric, SampleRequest, Sweep, Task};
use swavenet_cli::config::parse_flags;
use swavenet_cli::{ablate_cmd, eval_cmd, gradcheck_cmd, make_data, sample_cmd, train_cmd, CliError, RunConfig};

#[derive(Parser)]
#[command(name = "swn", version, about = "Stochastic WaveNet: synthesize data, train, evaluate and sample")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (`.swn` plus a JSON sidecar).
    MakeData {
        #[arg(long, value_enum)]
        task: Task,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        t: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model. Takes `--config run.json` and/or `--key value` overrides.
    Train {
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        flags: Vec<String>,
    },
    /// Report the average per-sequence (or per-segment) ELBO of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Score fixed-length segments instead of whole sequences.
        #[arg(long)]
        segment: Option<usize>,
        #[arg(long, value_enum, default_value = "elbo")]
        metric: Metric,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Draw sequences from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long)]
        t: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also render stroke samples as SVG.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck {
        #[arg(long, hide = true)]
        corrupt_adjoint: bool,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        flags: Vec<String>,
    },
    /// Train one model per stochastic-layer count or latent size.
    Ablate {
        /// Comma-separated stochastic layer counts.
        #[arg(long, value_delimiter = ',', conflicts_with = "d_list", required_unless_present = "d_list")]
        s_list: Vec<usize>,
        /// Comma-separated total latent sizes.
        #[arg(long, value_delimiter = ',')]
        d_list: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        flags: Vec<String>,
    },
}

fn run_config(flags: &[String]) -> Result<RunConfig, CliError> {
    let (path, pairs) = parse_flags(flags)?;
    RunConfig::load(path.as_deref(), &pairs)
}

fn run(cmd: Command) -> Result<(), CliError> {
    let stdout = std::io::stdout();
    let out = &mut stdout.lock();
    match cmd {
        Command::MakeData { task, n, t, seed, out: path } => {
            let data = make_data(task, n, t, seed, &path)?;
            writeln!(out, "wrote {} sequences to {}", data.len(), path.display()).ok();
        }
        Command::Train { flags } => {
            train_cmd(&run_config(&flags)?, out)?;
        }
        Command::Eval {
            checkpoint,
            dataset,
            segment,
            metric,
            seed,
        } => {
            let mode = segment.map_or(EvalMode::PerSequence, EvalMode::PerSegment);
            eval_cmd(
                &EvalRequest {
                    checkpoint: &checkpoint,
                    dataset: &dataset,
                    mode,
                    metric,
                    seed,
                },
                out,
            )?;
        }
        Command::Sample {
            checkpoint,
            n,
            t,
            temperature,
            seed,
            out: path,
            svg,
        } => {
            let data = sample_cmd(&SampleRequest {
                checkpoint: &checkpoint,
                n,
                t_out: t,
                temperature,
                seed,
                out: &path,
                svg: svg.as_deref(),
            })?;
            writeln!(out, "wrote {} samples to {}", data.len(), path.display()).ok();
        }
        Command::Gradcheck { corrupt_adjoint, flags } => {
            gradcheck_cmd(&run_config(&flags)?, corrupt_adjoint, out)?;
        }
        Command::Ablate {
            s_list,
            d_list,
            out: csv,
            flags,
        } => {
            let sweep = if s_list.is_empty() {
                Sweep::LatentTotal(d_list)
            } else {
                Sweep::StochasticLayers(s_list)
            };
            ablate_cmd(&run_config(&flags)?, &sweep, &csv, out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            e.print().ok();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
