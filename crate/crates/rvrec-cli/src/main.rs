use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rvrec::config::ExperimentConfig;
use rvrec::experiment::{self, ExperimentError};

#[derive(Parser)]
#[command(
    name = "rvrec",
    about = "Implicit-feedback recommenders with enhanced embeddings and coalition explanations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file; omit to start from defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline overrides, e.g. --set seed=7 --set backbone=twotower.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig, ExperimentError> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        for kv in &self.sets {
            let Some((k, v)) = kv.split_once('=') else {
                return Err(rvrec::config::ConfigError::Invalid(format!(
                    "--set expects KEY=VALUE, got '{kv}'"
                ))
                .into());
            };
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Ingest a ratings file, binarize and k-core filter it, and write the
    /// dataset snapshot.
    Prepare {
        #[command(flatten)]
        config: ConfigArgs,
        /// Snapshot output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a prepared snapshot; writes a checkpoint and a JSON manifest.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest output path (defaults to `<checkpoint>.manifest.json`).
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Rank held-out test items and report HR/NDCG (and PN/PS/F_NS with
    /// --explain).
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also compute the counterfactual explanation metrics at K in {1, 5}.
        #[arg(long)]
        explain: bool,
    },
    /// Emit explanation records for the given users' top-K recommendations.
    Explain {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated user ids.
        #[arg(long, value_delimiter = ',', required = true)]
        users: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Write the dump here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write all user and item representation vectors to a file.
    DumpEmbeddings {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::Prepare { config, out } => {
            let cfg = config.resolve()?;
            let stats = experiment::cmd_prepare(&cfg, &out)?;
            if stats.interactions == 0 {
                eprintln!("warning: filtered dataset is empty");
            }
            println!("users\t{}", stats.users);
            println!("items\t{}", stats.items);
            println!("interactions\t{}", stats.interactions);
            println!("sparsity\t{:.6}", stats.sparsity);
            println!("avg_interactions_per_user\t{:.4}", stats.avg_interactions_per_user);
            println!("snapshot\t{}", out.display());
            Ok(())
        }
        Command::Train {
            config,
            snapshot,
            checkpoint,
            manifest,
        } => {
            let cfg = config.resolve()?;
            let result = experiment::cmd_train(&cfg, &snapshot, &checkpoint)?;
            for (e, l) in result.epoch_losses.iter().enumerate() {
                println!(
                    "epoch {e}\trec {:.6}\tpeo {:.6}\tms {:.6}\ttotal {:.6}",
                    l.rec, l.peo, l.ms, l.total
                );
            }
            if let Some(m) = &result.metrics {
                println!("{}", m.summary_line());
            }
            let manifest_path = manifest
                .unwrap_or_else(|| checkpoint.with_extension("manifest.json"));
            let json = serde_json::to_string_pretty(&result).expect("manifest serializes");
            std::fs::write(&manifest_path, json)?;
            println!("checkpoint\t{}", checkpoint.display());
            println!("manifest\t{}", manifest_path.display());
            Ok(())
        }
        Command::Evaluate {
            config,
            snapshot,
            checkpoint,
            explain,
        } => {
            let cfg = config.resolve()?;
            let report = experiment::cmd_evaluate(&cfg, &snapshot, &checkpoint, explain)?;
            for line in report.to_lines() {
                println!("{line}");
            }
            println!("{}", report.summary_line());
            Ok(())
        }
        Command::Explain {
            config,
            snapshot,
            checkpoint,
            users,
            k,
            out,
        } => {
            let cfg = config.resolve()?;
            let explanations = experiment::cmd_explain(&cfg, &snapshot, &checkpoint, &users, k)?;
            let mut text = String::new();
            for ex in &explanations {
                text.push_str(&ex.to_line());
                text.push('\n');
            }
            match out {
                Some(path) => std::fs::write(path, text)?,
                None => print!("{text}"),
            }
            Ok(())
        }
        Command::DumpEmbeddings {
            config,
            snapshot,
            checkpoint,
            out,
        } => {
            let cfg = config.resolve()?;
            let mut w = std::io::BufWriter::new(std::fs::File::create(&out)?);
            experiment::cmd_dump_embeddings(&cfg, &snapshot, &checkpoint, &mut w)?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}: {err}", err.category());
            ExitCode::FAILURE
        }
    }
}
