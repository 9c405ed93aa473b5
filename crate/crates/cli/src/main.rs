use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use robust_esi_cli::config::{ExperimentConfig, Overrides, Solver};
use robust_esi_cli::error::Result;
use robust_esi_cli::report::render_text;
use robust_esi_cli::sweep::{cmd_sweep, SweepOptions};
use robust_esi_cli::{cmd_report, cmd_score_match, cmd_simulate, fit};

#[derive(Parser)]
#[command(name = "robust-esi", version, about = "Robust Bayesian source imaging experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Overrides shared by the config-driven commands.
#[derive(clap::Args, Default)]
struct ConfigArgs {
    /// JSON experiment config; built-in defaults when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated dB values, e.g. `10,0,-10`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    snr: Option<Vec<f64>>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one dataset: leadfield, sources, observations, noise, manifest.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Fit one solver to a dataset directory.
    Fit {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_solver)]
        solver: Solver,
        /// Defaults to the dataset directory.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Score-match every row of a residual matrix (ESIM or CSV).
    ScoreMatch {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        residuals: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Repetition sweep over the SNR list; writes results.csv and summary.json.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        repetitions: Option<usize>,
        /// Comma-separated subset of hvb,chvb.
        #[arg(long, value_delimiter = ',', value_parser = parse_solver)]
        solvers: Option<Vec<Solver>>,
        #[arg(long, short)]
        out: Option<PathBuf>,
        /// Worker threads; overrides ROBUST_ESI_THREADS.
        #[arg(long)]
        threads: Option<usize>,
        /// Fill wall_ms (makes the CSV differ between runs).
        #[arg(long)]
        timing: bool,
        #[arg(long)]
        quiet: bool,
    },
    /// Summarize a sweep CSV.
    Report {
        #[arg(long)]
        results: PathBuf,
        /// Write the summary as JSON here.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

fn parse_solver(s: &str) -> std::result::Result<Solver, String> {
    Solver::parse(s).map_err(|e| e.to_string())
}

/// Loads the config (or defaults) and applies overrides. Returns the config and
/// the directory relative paths inside it resolve against.
fn load(args: &ConfigArgs, extra: Overrides) -> Result<(ExperimentConfig, PathBuf)> {
    let (mut cfg, base) = match &args.config {
        Some(p) => (
            ExperimentConfig::load(p)?,
            p.parent().map(Path::to_path_buf).unwrap_or_default(),
        ),
        None => (ExperimentConfig::default(), PathBuf::new()),
    };
    cfg.apply(&Overrides {
        seed: args.seed,
        snr_list: args.snr.clone(),
        ..extra
    })?;
    Ok((cfg, base))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { cfg, out } => {
            let (cfg, base) = load(&cfg, Overrides::default())?;
            let m = cmd_simulate(&cfg, &base, &out)?;
            println!(
                "wrote {} files to {} (snr target {} dB, achieved {:.6} dB)",
                m.files.len() + 1,
                out.display(),
                m.snr_db_target,
                m.snr_db_achieved
            );
        }
        Command::Fit { cfg, data, solver, out } => {
            let (cfg, _) = load(&cfg, Overrides::default())?;
            let out = out.unwrap_or_else(|| data.clone());
            let s = fit::cmd_fit(&data, &out, solver, &cfg.hvb, &cfg.chvb_config())?;
            print!(
                "{solver}: {} iterations, converged {}, final objective {:?}",
                s.iterations, s.converged, s.final_objective
            );
            match &s.evaluation {
                Some(e) => println!(", aggregate {:.4}, rmse {:.4e}", e.aggregate, e.rmse),
                None => println!(),
            }
        }
        Command::ScoreMatch { cfg, residuals, out } => {
            let (cfg, _) = load(&cfg, Overrides::default())?;
            let fits = cmd_score_match(&residuals, &cfg.score_match, &out)?;
            let failed = fits.iter().filter(|f| f.error.is_some()).count();
            println!("{} rows fitted, {failed} marked as errors", fits.len() - failed);
        }
        Command::Sweep {
            cfg,
            repetitions,
            solvers,
            out,
            threads,
            timing,
            quiet,
        } => {
            let (cfg, base) = load(
                &cfg,
                Overrides {
                    repetitions,
                    solvers,
                    output_dir: out,
                    record_timing: timing.then_some(true),
                    ..Default::default()
                },
            )?;
            let opts = SweepOptions {
                threads,
                progress: !quiet,
                keep_traces: false,
            };
            let (outcome, dir) = cmd_sweep(&cfg, &base, &opts)?;
            print!("{}", render_text(&outcome.summaries));
            println!("wrote {}", dir.display());
        }
        Command::Report { results, out } => {
            let s = cmd_report(&results, out.as_deref())?;
            print!("{}", render_text(&s));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
