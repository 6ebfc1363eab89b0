use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use msvq::pipeline::commands::{self, ErrorUnit, TrainOverrides};
use msvq::pipeline::PipelineConfig;

#[derive(Parser)]
#[command(name = "msvq", version, about = "Multi-stage multi-codebook speech representation toolkit")]
struct Cli {
    /// TOML pipeline configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Io {
    /// Directory written by `train`.
    #[arg(long)]
    artifacts: PathBuf,
    /// Input file or directory.
    #[arg(long)]
    input: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic feature corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train stage codebooks, predictors and the associate model.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Reinitialize codewords whose usage falls below 1e-4.
        #[arg(long)]
        reseed_dead: bool,
        /// Condition associate stage predictors on ground-truth higher stages while fitting.
        #[arg(long)]
        teacher_forcing: Option<bool>,
    },
    /// Feature files to MSMCR token files.
    Encode(Io),
    /// MSMCR token files to feature files.
    Decode(Io),
    /// MSMCR token files to compact codes.
    Compress(Io),
    /// Compact codes to MSMCR token files.
    Reconstruct {
        #[command(flatten)]
        io: Io,
        /// Original MSMCR files; prints one L_rec line per utterance.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Objective metrics.
    Eval {
        #[command(subcommand)]
        metric: Metric,
    },
    /// Token usage and perplexity of MSMCR files.
    Stats {
        #[arg(long)]
        artifacts: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Check analytic loss gradients against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        points: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Unit {
    Char,
    Word,
}

#[derive(Subcommand)]
enum Metric {
    /// Frechet distance between pooled frame statistics.
    Fd {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
    },
    /// Pooled edit-distance error rate between transcript files.
    Er {
        reference: PathBuf,
        hypothesis: PathBuf,
        #[arg(long, value_enum, default_value_t = Unit::Char)]
        unit: Unit,
    },
    /// Mel-cepstral distortion between aligned feature files.
    Mcd { a: PathBuf, b: PathBuf },
}

fn run(cli: Cli, out: &mut dyn Write) -> msvq::Result<()> {
    let cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    match cli.command {
        Command::Synth { out: dir, seed } => commands::cmd_synth(&cfg, seed, &dir, out),
        Command::Train { corpus, out: dir, seed, reseed_dead, teacher_forcing } => {
            let ov = TrainOverrides { seed, reseed_dead, teacher_forcing };
            commands::cmd_train(&cfg, &corpus, &dir, &ov, out).map(|_| ())
        }
        Command::Encode(io) => commands::cmd_encode(&io.artifacts, &io.input, &io.out, out),
        Command::Decode(io) => commands::cmd_decode(&io.artifacts, &io.input, &io.out, out),
        Command::Compress(io) => commands::cmd_compress(&io.artifacts, &io.input, &io.out, out),
        Command::Reconstruct { io, reference } => {
            commands::cmd_reconstruct(&io.artifacts, &io.input, &io.out, reference.as_deref(), out)
        }
        Command::Eval { metric } => match metric {
            Metric::Fd { a, b, scale } => commands::cmd_eval_fd(&a, &b, scale, out).map(|_| ()),
            Metric::Er { reference, hypothesis, unit } => {
                let unit = match unit {
                    Unit::Char => ErrorUnit::Char,
                    Unit::Word => ErrorUnit::Word,
                };
                commands::cmd_eval_er(&reference, &hypothesis, unit, out).map(|_| ())
            }
            Metric::Mcd { a, b } => commands::cmd_eval_mcd(&a, &b, out).map(|_| ()),
        },
        Command::Stats { artifacts, input } => commands::cmd_stats(&artifacts, &input, out),
        Command::Gradcheck { seed, points } => commands::cmd_gradcheck(seed, points, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match run(cli, &mut out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = out.flush();
            eprintln!("msvq: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
