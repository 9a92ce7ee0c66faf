use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sdgan::commands::{self, EvalArgs, Metric, PretrainArgs};
use sdgan::config::RunConfig;
use sdgan::error::{CliError, Result};

#[derive(Parser)]
#[command(name = "sdgan", version, about = "Siamese text-to-image GAN on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset with its manifest.
    GenData {
        #[arg(long)]
        scenes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        captions: usize,
    },
    /// Train the text encoder against an image encoder on matched pairs.
    PretrainEncoder {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        embed_dim: usize,
        #[arg(long, default_value_t = 32)]
        hidden: usize,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, hide = true)]
        resume: Option<PathBuf>,
    },
    /// Train the GAN from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate images for one caption.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
    /// Score a checkpoint (or the real test images) with the oracle classifier.
    Eval {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        metric: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 800)]
        oracle_steps: usize,
        #[arg(long, default_value_t = 10)]
        splits: usize,
        #[arg(long, default_value_t = 256)]
        pairs: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Plot loss curves from one or more losses.csv files.
    Plot {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { scenes, seed, out, captions } => {
            let ds = commands::gen_data(scenes, seed, captions, &out)?;
            println!("{} train and {} test scenes written to {}", ds.train.len(), ds.test.len(), out.display());
        }
        Command::PretrainEncoder {
            data,
            out,
            epochs,
            seed,
            embed_dim,
            hidden,
            batch_size,
            resume,
        } => {
            if resume.is_some() {
                return Err(CliError::Usage("pretrain-encoder cannot resume; start a fresh run".into()));
            }
            let (m, x) = commands::pretrain_encoder(&PretrainArgs {
                data,
                out: out.clone(),
                epochs,
                seed,
                embed_dim,
                hidden,
                batch_size,
            })?;
            println!("held-out similarity: matched {m:.4}, mismatched {x:.4}; saved {}", out.display());
        }
        Command::Train { config, resume } => {
            let cfg = RunConfig::load(&config)?;
            let s = commands::train(cfg, resume.as_deref())?;
            if let Some(r) = s.reports.last() {
                println!("step {}: d {:.4} g {:.4}", r.step, r.d_total, r.g_total);
            }
            println!("saved {}", s.final_checkpoint.display());
        }
        Command::Sample { ckpt, text, seed, out, count } => {
            if text.trim().is_empty() {
                return Err(CliError::Usage("--text is empty".into()));
            }
            let unknown = commands::sample(&ckpt, &text, seed, count, &out)?;
            if !unknown.is_empty() {
                eprintln!("warning: unknown words mapped to <unk>: {}", unknown.join(", "));
            }
            println!("saved {}", out.display());
        }
        Command::Eval {
            ckpt,
            data,
            metric,
            seed,
            oracle_steps,
            splits,
            pairs,
            repeats,
        } => {
            let report = commands::eval(&EvalArgs {
                ckpt,
                data,
                metric: Metric::parse(&metric)?,
                seed,
                oracle_steps,
                splits,
                pairs,
                repeats,
            })?;
            println!("{}", serde_json::to_string(&report).expect("report serializes"));
        }
        Command::Plot { runs, out } => {
            let panels = sdgan::plot::plot(&runs, &out)?;
            println!("{} panels saved to {}", panels.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
