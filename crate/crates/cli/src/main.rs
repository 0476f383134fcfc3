use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use slkd_cli::{run, CliError, ExperimentConfig, Result};
use slkd_core::{Mode, OpKind};

#[derive(Parser)]
#[command(name = "slkd", version, about = "Knowledge distillation with self-learning teachers")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; missing fields take the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Comma-separated seeds (overrides `seeds`).
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Sessions to run concurrently.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured teacher and save its best-epoch parameters.
    TrainTeacher,
    /// Distil a student in one mode over all seeds.
    Distill {
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
    },
    /// Run every configured mode against every teacher size.
    Compare {
        /// Comma-separated modes (overrides `compare.modes`).
        #[arg(long, value_delimiter = ',', value_parser = parse_mode)]
        modes: Option<Vec<Mode>>,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, hide = true, value_parser = parse_op)]
        inject_fault: Option<OpKind>,
    },
    /// Print the effective configuration as TOML.
    PrintConfig,
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse().map_err(|_| {
        let names: Vec<&str> = Mode::ALL.iter().map(|m| m.name()).collect();
        format!("unknown mode `{s}` (expected one of {})", names.join(", "))
    })
}

fn parse_op(s: &str) -> std::result::Result<OpKind, String> {
    OpKind::from_name(s).ok_or_else(|| format!("unknown op `{s}`"))
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seeds) = &common.seeds {
        cfg.seeds = seeds.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(command: Command, common: &Common) -> Result<()> {
    match command {
        Command::PrintConfig => print!("{}", load_config(common)?.to_toml()),
        Command::TrainTeacher => {
            let cfg = load_config(common)?;
            let summary = run::run_train_teacher(&cfg)?;
            println!(
                "teacher {} saved to {}: test accuracy {:.4} (epoch {})",
                run::hidden_label(&summary.hidden),
                cfg.teacher_path().display(),
                summary.test_accuracy,
                summary.best_epoch.map_or("-".into(), |e| e.to_string())
            );
        }
        Command::Distill { mode } => {
            let cfg = load_config(common)?;
            let mode = mode.unwrap_or(cfg.distill.mode);
            let outcome = run::run_distill(&cfg, mode, common.jobs)?;
            for r in &outcome.report.runs {
                println!("{mode} seed {}: final {:.4} best {:.4}", r.seed, r.final_accuracy, r.best_accuracy);
            }
            let a = &outcome.report.aggregate;
            println!(
                "{mode} over {} seeds: final {:.4} ± {:.4}, best {:.4} ± {:.4} ({})",
                a.seeds.len(),
                a.final_mean,
                a.final_std,
                a.best_mean,
                a.best_std,
                outcome.dir.display()
            );
        }
        Command::Compare { modes } => {
            let mut cfg = load_config(common)?;
            if let Some(modes) = modes {
                cfg.compare.modes = modes;
            }
            print!("{}", run::run_compare(&cfg, common.jobs)?.render());
        }
        Command::Gradcheck { trials, inject_fault } => {
            let report = run::run_gradcheck(trials, inject_fault)?;
            print!("{}", report.render());
            if !report.passed() {
                return Err(CliError::CheckFailed("gradient check exceeded tolerance".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command, &cli.common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("slkd: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
