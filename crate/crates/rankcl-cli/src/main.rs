//! One config file, four pipelines: train, eval, ood, project. Flags beat
//! config values; exit code 1 marks input the user can fix, 2 a runtime
//! failure. Warnings go to stderr, results to stdout and the output dir.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rankcl::run::{
    load_config, run_eval, run_ood, run_project, run_train, Overrides, Probe, ResolvedRun,
    RunError,
};

#[derive(Parser)]
#[command(name = "rankcl", version, about = "Rank-aware contrastive representation learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run config file (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoint.bin, loss.csv, train_summary.json
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Probe a trained checkpoint's embeddings; writes eval_report.json
    Eval {
        #[command(flatten)]
        common: Common,
        /// Probe kind: knn or linear
        #[arg(long, default_value = "knn")]
        probe: String,
    },
    /// Withhold classes, retrain on the rest, and score the withheld test
    /// samples as out-of-distribution; writes roc.csv, roc.svg, ood_report.json
    Ood {
        #[command(flatten)]
        common: Common,
        /// Classes to withhold, by name (comma separated or repeated)
        #[arg(long, value_delimiter = ',', required = true)]
        withhold: Vec<String>,
    },
    /// Project test embeddings to 2D; writes projection_<method>.csv and .svg
    Project {
        #[command(flatten)]
        common: Common,
        /// Projection method: pca or tsne
        #[arg(long, default_value = "pca")]
        method: String,
    },
}

fn resolve(common: &Common) -> Result<ResolvedRun, RunError> {
    let config = load_config(&common.config)?;
    config.resolve(&Overrides {
        seed: common.seed,
        out: common.out.clone(),
    })
}

fn warn_all(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn dispatch(command: Command) -> Result<(), RunError> {
    match command {
        Command::Train { common } => {
            let run = resolve(&common)?;
            let outcome = run_train(&run)?;
            let s = &outcome.summary;
            warn_all(&s.warnings);
            println!("run {} seed {}", &s.config_hash[..12], s.seed);
            println!(
                "smoothed loss {:.6} -> {:.6} over {} steps",
                s.initial_smoothed_loss, s.final_smoothed_loss, s.steps
            );
            if s.skipped_levels > 0 {
                println!("skipped {} empty anchor-levels", s.skipped_levels);
            }
            if let Some(r) = &s.reference {
                println!(
                    "reference similarity: aux {:.4}, known {:.4}",
                    r.aux_mean_similarity, r.known_mean_similarity
                );
            }
            println!("validation knn accuracy {:.4}", s.val_knn_accuracy);
            println!("wrote {}", outcome.out_dir.display());
            Ok(())
        }
        Command::Eval { common, probe } => {
            let probe = match probe.as_str() {
                "knn" => Probe::Knn,
                "linear" => Probe::Linear,
                other => {
                    return Err(RunError::Config(format!(
                        "--probe: expected knn or linear, got {other}"
                    )))
                }
            };
            let run = resolve(&common)?;
            let outcome = run_eval(&run, probe)?;
            warn_all(&outcome.warnings);
            let r = &outcome.report;
            if let Some(knn) = &r.knn {
                println!("knn accuracy {:.4}", knn.accuracy);
            }
            if let Some(linear) = &r.linear {
                println!("linear probe accuracy {:.4}", linear.accuracy);
            }
            if let Some(fraction) = r.ordering_fraction {
                println!("similarity ordering held for {:.1}% of anchors", fraction * 100.0);
            }
            println!("wrote {}", outcome.report_path.display());
            Ok(())
        }
        Command::Ood { common, withhold } => {
            let run = resolve(&common)?;
            let outcome = run_ood(&run, &withhold)?;
            warn_all(&outcome.warnings);
            let ood = outcome.report.ood.as_ref().expect("ood run reports ood");
            println!(
                "auroc {:.4} ({} in / {} out, score {})",
                ood.auroc, ood.in_count, ood.out_count, ood.score
            );
            println!("withheld: {}", ood.withheld.join(", "));
            println!("wrote {}", outcome.out_dir.display());
            Ok(())
        }
        Command::Project { common, method } => {
            let run = resolve(&common)?;
            let outcome = run_project(&run, &method)?;
            warn_all(&outcome.warnings);
            println!("{} points", outcome.points.len());
            println!("wrote {}", outcome.csv_path.display());
            println!("wrote {}", outcome.svg_path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => match e.kind() {
            clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => e.exit(),
            // bad flags are input validation, same class as config errors
            _ => {
                let _ = e.print();
                return ExitCode::from(1);
            }
        },
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
