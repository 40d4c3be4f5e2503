use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use fedssl::error::Error;
use fedssl::experiment::{cmd_generate, cmd_pretrain, cmd_report, cmd_run, ExperimentConfig};
use fedssl::federation::Scenario;

#[derive(Parser)]
#[command(name = "fedssl", version, about = "Federated training of ViT classifiers on synthetic radiographs")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic site archives.
    Generate,
    /// Self-supervised pretraining on the pooled training images.
    Pretrain,
    /// Train and evaluate one scenario, or every configured scenario.
    Run {
        #[arg(long)]
        scenario: Option<Scenario>,
    },
    /// Consolidate results into report.csv and report.txt.
    Report,
}

fn config(cli: &Cli) -> fedssl::error::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> fedssl::error::Result<()> {
    match &cli.command {
        Command::Generate => {
            let cfg = config(cli)?;
            for id in cmd_generate(&cfg)? {
                eprintln!("wrote {}", cfg.out.join("datasets").join(id).display());
            }
        }
        Command::Pretrain => {
            let cfg = config(cli)?;
            let records = cmd_pretrain(&cfg)?;
            if let Some(last) = records.last() {
                eprintln!(
                    "pretrained {} iterations, final loss {:.4} (image {:.4}, patch {:.4}, koleo {:.4})",
                    records.len(),
                    last.total,
                    last.l_image,
                    last.l_patch,
                    last.koleo
                );
            }
            eprintln!("wrote {}", cfg.out.join("ssl.ckpt").display());
        }
        Command::Run { scenario } => {
            let cfg = config(cli)?;
            let scenarios = match scenario {
                Some(s) => vec![*s],
                None => cfg.scenarios.clone(),
            };
            for sc in scenarios {
                let summary = cmd_run(&cfg, sc, |model, log| {
                    eprintln!(
                        "[{sc}] {model} round {:>3}  val AUROC {:.4}{}  ({:.1}s)",
                        log.round,
                        log.mean_val_auroc,
                        if log.improved { " *" } else { "" },
                        log.wall_time_s
                    );
                })?;
                for row in summary.rows.iter().filter(|r| r.label == "average") {
                    eprintln!("[{sc}] {:<12} average AUROC {:.4}", row.site, row.auroc);
                }
            }
        }
        Command::Report => {
            print!("{}", cmd_report(&config(cli)?.out)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli).context("fedssl failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {:#}", err);
            let user = err.downcast_ref::<Error>().is_some_and(Error::is_user_error);
            ExitCode::from(if user { 2 } else { 1 })
        }
    }
}
