use std::path::PathBuf;
use std::process::ExitCode;

use advtex_core::defenses::AtParams;
use advtex_core::harness::{
    builtin_registry, emit_plot_data, evaluate_frameset, reevaluate, registry_for, run_experiment, ExperimentConfig,
    FigureKind, HarnessError, RunStatus,
};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "advtex", version, about = "Adversarial texture attacks against defended person detectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    Run {
        config: PathBuf,
        /// Override a config field, e.g. `--set optim.epochs=10`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Re-evaluate a finished run from its saved artifacts, or evaluate its
    /// defenses on an annotated frame set.
    Eval {
        run_dir: PathBuf,
        #[arg(long, requires = "image_root")]
        frameset: Option<PathBuf>,
        #[arg(long, requires = "frameset")]
        image_root: Option<PathBuf>,
    },
    /// Write the CSV behind a figure into `<run_dir>/plots`.
    Plot {
        run_dir: PathBuf,
        #[arg(long)]
        figure: String,
    },
    /// Inspect detector adapters.
    Adapters {
        #[command(subcommand)]
        action: AdapterAction,
    },
}

#[derive(Subcommand)]
enum AdapterAction {
    /// List registered detectors, including those declared in a config.
    List {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Run { config, set } => {
            let cfg = ExperimentConfig::load(&config, &set)?;
            let m = run_experiment(&cfg)?;
            println!("run {} in {}", status(m.status), cfg.output_dir.display());
            for r in &m.reports {
                println!("  reports/{r}");
            }
        }
        Command::Eval {
            run_dir,
            frameset: Some(ann),
            image_root: Some(root),
        } => {
            for r in evaluate_frameset(&run_dir, &ann, &root)? {
                println!("reports/{r}");
            }
        }
        Command::Eval { run_dir, .. } => {
            let out = reevaluate(&run_dir)?;
            println!("compared {} reports, {} mismatched", out.compared.len(), out.mismatched.len());
            if !out.mismatched.is_empty() {
                for r in &out.mismatched {
                    println!("  differs: {r}");
                }
                return Err(HarnessError::Stage {
                    stage: "reeval".into(),
                    message: "regenerated reports differ from the originals".into(),
                });
            }
        }
        Command::Plot { run_dir, figure } => {
            let p = emit_plot_data(&run_dir, figure.parse::<FigureKind>()?)?;
            println!("{}", p.display());
        }
        Command::Adapters {
            action: AdapterAction::List { config },
        } => {
            let registry = match config {
                Some(p) => registry_for(&ExperimentConfig::load(&p, &[])?)?,
                None => builtin_registry(None, AtParams::default()),
            };
            for (name, desc) in registry.describe() {
                println!("{name}\t{desc}");
            }
        }
    }
    Ok(())
}

fn status(s: RunStatus) -> &'static str {
    match s {
        RunStatus::Complete => "complete",
        RunStatus::Failed => "failed",
        RunStatus::Running => "running",
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
