//! `mtsgait` command-line driver.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mtsgait::data::Split;
use mtsgait::retrieval::Metric;
use mtsgait::sampling::Strategy;

/// Gait recognition with multi-hop temporal switch convolutions.
#[derive(Debug, Parser)]
#[command(name = "mtsgait", version)]
struct Cli {
    /// Worker threads; the MTSGAIT_THREADS environment variable overrides it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic silhouette dataset.
    Synth {
        #[arg(long)]
        subjects: usize,
        #[arg(long)]
        seqs: usize,
        /// Frames per sequence (the maximum with --min-frames).
        #[arg(long)]
        frames: usize,
        /// Draw each sequence length from min-frames..=frames.
        #[arg(long)]
        min_frames: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes model.ckpt, config.toml and loss.csv into --out.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint written by an earlier run of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Embed one split of a dataset with a trained checkpoint.
    Extract {
        /// Training output directory, or a checkpoint file next to its config.toml.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: Split,
        /// `.bin` / `.mtse` selects the binary format, anything else text.
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieval metrics of probe embeddings against a gallery.
    Eval {
        #[arg(long)]
        probe: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long, default_value = "euclidean")]
        metric: Metric,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10,20")]
        ks: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Allow probe sequences to appear in the gallery; each probe then skips its own entry.
        #[arg(long)]
        leave_one_out: bool,
    },
    /// Parameter count and per-layer multiply-accumulate costs.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print the 1-based frame indices a sampler picks.
    SampleDump {
        #[arg(long)]
        strategy: Strategy,
        #[arg(long)]
        len: usize,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return commands::Failure::usage(e.to_string()).report(),
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let result = commands::init_threads(cli.threads).and_then(|()| match cli.command {
        Command::Synth {
            subjects,
            seqs,
            frames,
            min_frames,
            seed,
            out,
        } => commands::synth(subjects, seqs, frames, min_frames, seed, &out),
        Command::Train {
            config,
            data,
            out,
            seed,
            resume,
        } => commands::train(config.as_deref(), &data, &out, seed, resume.as_deref()),
        Command::Extract { ckpt, data, split, out } => commands::extract(&ckpt, &data, split, &out),
        Command::Eval {
            probe,
            gallery,
            metric,
            ks,
            out,
            leave_one_out,
        } => commands::eval(&probe, &gallery, metric, &ks, out.as_deref(), leave_one_out),
        Command::Bench { config } => commands::bench(config.as_deref()),
        Command::SampleDump { strategy, len, n, seed } => commands::sample_dump(strategy, len, n, seed),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => f.report(),
    }
}
