use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use robust_kip::cli::{self, CliError, CliResult, EXIT_OK};

#[derive(Parser)]
#[command(
    name = "rkip",
    version,
    about = "Adversarially robust dataset distillation with NTK kernel regression"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (JSON) or a run manifest.
    #[arg(long, short)]
    config: PathBuf,
    /// Override a config leaf, e.g. `--set distill.epochs=20`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Distill a robust support set; writes distilled.rkds, history.csv, manifest.json.
    Distill(ConfigArgs),
    /// One distillation per support size; writes sweep.csv.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Ascending support sizes, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
    },
    /// Run the configured attacks against an RKDS or RKMP artifact.
    Attack {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        artifact: PathBuf,
    },
    /// Diagnostic report (accuracy, robustness, loss/gradient split, calibration).
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        artifact: PathBuf,
    },
    /// Train the configured MLP on a distilled set and attack it.
    Transfer {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        artifact: PathBuf,
    },
    /// Print a report, or convert it between JSON and CSV with --out.
    Report {
        path: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(args: &ConfigArgs) -> CliResult<cli::ExperimentConfig> {
    cli::load_config(&args.config, &args.overrides)
}

fn run(command: Command) -> CliResult<String> {
    match command {
        Command::Distill(args) => {
            let cfg = load(&args)?;
            let out = cli::cmd_distill(&cfg)?;
            let best = &out.history.iter().find(|r| r.epoch == out.best_epoch);
            Ok(format!(
                "best epoch {} ({} epochs run){}\noutputs in {}\n",
                out.best_epoch,
                out.epochs_run,
                best.map_or(String::new(), |r| format!(
                    ": clean {:.4}, pgd {:.4}",
                    r.clean_acc, r.pgd_acc
                )),
                cfg.output_dir.display()
            ))
        }
        Command::Sweep { config, sizes } => {
            let cfg = load(&config)?;
            let rows = cli::cmd_sweep(&cfg, &sizes)?;
            let mut s = format!("{}\n", cli::SWEEP_HEADER);
            for r in rows {
                s.push_str(&format!(
                    "{},{:.4},{:.4},{:.4},{},{}\n",
                    r.size,
                    r.clean,
                    r.fgsm,
                    r.pgd,
                    r.best_epoch.map(|e| e.to_string()).unwrap_or_default(),
                    r.status
                ));
            }
            Ok(s)
        }
        Command::Attack { config, artifact } => {
            let cfg = load(&config)?;
            let results = cli::cmd_attack(&cfg, &artifact)?;
            Ok(results
                .iter()
                .map(|r| format!("{:<14}{:.4}\n", r.attack, r.accuracy))
                .collect())
        }
        Command::Eval { config, artifact } => {
            let cfg = load(&config)?;
            let (report, verdict) = cli::cmd_eval(&cfg, &artifact)?;
            let mut s = cli::render_report(&report);
            if let Some(v) = verdict {
                s.push_str(&format!(
                    "pgd-square gap    {:.2} points ({})\n",
                    v.gap,
                    if v.obfuscated {
                        "obfuscated gradients suspected"
                    } else {
                        "consistent"
                    }
                ));
            }
            Ok(s)
        }
        Command::Transfer { config, artifact } => {
            let cfg = load(&config)?;
            let summary = cli::cmd_transfer(&cfg, &artifact)?;
            let mut s = format!("selected lr {}\n", summary.lr);
            for e in summary.accuracies {
                s.push_str(&format!("{:<14}{:.4}\n", e.attack, e.accuracy));
            }
            Ok(s)
        }
        Command::Report { path, out } => cli::cmd_report(&path, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let args = Cli::parse();
    match run(args.command) {
        Ok(text) => {
            print!("{text}");
            ExitCode::from(EXIT_OK as u8)
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", CliError::kind(&e));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
