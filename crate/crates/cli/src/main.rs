use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mlman::data::synthetic::SyntheticSpec;
use mlman::data::Split;
use mlman::training::EvalSpec;
use mlman::{Error, Result};
use mlman_cli::commands::{self, EvalArgs};
use mlman_cli::{ExperimentConfig, HeatmapRecord, Overrides};

#[derive(Parser)]
#[command(
    name = "mlman",
    version,
    about = "Few-shot relation classification with multi-level matching and aggregation"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply(&self.overrides.0, Path::new(""))?;
        Ok(cfg)
    }
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Subcommand)]
enum Cmd {
    /// Train `repetitions` models and report mean ± std test accuracy.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Write an untrained checkpoint.
    Init {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Accuracy of a checkpoint over `eval_episodes` `n_eval`-way `k`-shot episodes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Forward path to use; defaults to the checkpoint's preset.
        #[arg(long)]
        variant: Option<u8>,
        #[arg(long, value_parser = parse_split)]
        split: Option<Split>,
        /// Per-episode records as JSON lines.
        #[arg(long)]
        records: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Comparative table over ablation presets, e.g. `--ids 1-7`.
    Ablate {
        #[arg(long)]
        ids: String,
        /// Evaluate this checkpoint under each preset instead of training.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Mean pairwise distance between same-class support vectors.
    Distance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_split)]
        split: Option<Split>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Token attention between two instances, as TSV and optionally PGM.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Query instance as RELATION:INDEX.
        #[arg(long)]
        query: String,
        /// Support instance as RELATION:INDEX.
        #[arg(long)]
        support: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        pgm: Option<PathBuf>,
        /// Pixels per cell in the PGM.
        #[arg(long, default_value_t = 16)]
        cell: usize,
        #[arg(long, value_parser = parse_split)]
        split: Option<Split>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Generate a pseudo-relation corpus, word vectors and a config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = SyntheticSpec::default().instances_per_relation)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        outer_gap: usize,
        #[arg(long, default_value_t = 0)]
        inner_gap: usize,
    },
}

fn eval_spec(cfg: &ExperimentConfig) -> EvalSpec {
    EvalSpec {
        n: cfg.train.n_eval,
        k: cfg.train.k,
        episodes: cfg.train.eval_episodes,
        seed: cfg.train.seed,
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Train { config } => {
            let cfg = config.resolve()?;
            let out = commands::train(&cfg)?;
            for run in &out.report.runs {
                println!(
                    "seed {:>4}  best step {:>6}  dev {:.4}  test {:.4}",
                    run.seed, run.best_step, run.dev_accuracy, run.accuracy
                );
            }
            println!(
                "accuracy {:.2} ± {:.2} over {} run(s)",
                100.0 * out.report.mean,
                100.0 * out.report.std,
                out.report.runs.len()
            );
            println!("artifacts in {}", cfg.output_dir.display());
        }
        Cmd::Init { out, config } => {
            let cfg = config.resolve()?;
            let params = commands::init(&cfg, &out)?;
            println!(
                "{} parameters written to {}",
                params.num_parameters(),
                out.display()
            );
        }
        Cmd::Eval {
            checkpoint,
            variant,
            split,
            records,
            config,
        } => {
            let cfg = config.resolve()?;
            let s = eval_spec(&cfg);
            let args = EvalArgs {
                n: s.n,
                k: s.k,
                episodes: s.episodes,
                seed: s.seed,
                split,
                ablation_id: variant,
            };
            let e = commands::eval(&cfg, &checkpoint, args, records.as_deref())?;
            println!(
                "{}-way {}-shot accuracy {:.4} over {} episodes",
                s.n, s.k, e.accuracy, s.episodes
            );
        }
        Cmd::Ablate {
            ids,
            checkpoint,
            config,
        } => {
            let cfg = config.resolve()?;
            let ids = commands::parse_ids(&ids)?;
            let rows = match checkpoint {
                Some(path) => commands::ablate_checkpoint(&cfg, &path, &ids, eval_spec(&cfg))?
                    .into_iter()
                    .map(|(row, _)| row)
                    .collect(),
                None => commands::ablate(&cfg, &ids)?,
            };
            print!("{}", commands::ablation_table(&rows));
        }
        Cmd::Distance {
            checkpoint,
            split,
            config,
        } => {
            let cfg = config.resolve()?;
            let s = eval_spec(&cfg);
            let d = commands::distance(&cfg, &checkpoint, s, split)?;
            println!(
                "D = {d:.6} over {} {}-way {}-shot support sets",
                s.episodes, s.n, s.k
            );
        }
        Cmd::Heatmap {
            checkpoint,
            query,
            support,
            out,
            pgm,
            cell,
            split,
            config,
        } => {
            let cfg = config.resolve()?;
            let data = commands::load_data(&cfg)?;
            let corpus = commands::corpus(&data, split)?;
            let (params, preset) = commands::load_checkpoint(&checkpoint)?;
            let q = commands::find_instance(corpus, &query)?;
            let s = commands::find_instance(corpus, &support)?;
            let h: HeatmapRecord = commands::heatmap(&params, &preset, &data.embeddings, q, s)?;
            write(&out, &h.to_tsv())?;
            if let Some(pgm) = pgm {
                write(&pgm, &h.to_pgm(cell))?;
            }
            println!(
                "{}x{} attention written to {}",
                h.query_tokens.len(),
                h.support_tokens.len(),
                out.display()
            );
        }
        Cmd::Synth {
            out,
            seed,
            instances,
            outer_gap,
            inner_gap,
        } => {
            let spec = SyntheticSpec {
                instances_per_relation: instances,
                outer_gap,
                inner_gap,
                ..SyntheticSpec::default()
            };
            commands::synth(&out, &spec, seed)?;
            println!("corpus and config.txt written to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e) as u8)
        }
    }
}
