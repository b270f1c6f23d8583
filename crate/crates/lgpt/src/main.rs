use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lgpt::cli;
use lgpt::Error;

/// Desk-scale unified audio-and-text model pipeline.
#[derive(Parser)]
#[command(name = "lgpt", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a component and write a checkpoint plus run report.
    Train {
        /// codec | lm | vocoder
        component: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the configured step count (0 logs the initial loss only).
        #[arg(long)]
        steps: Option<u64>,
        /// Codec checkpoint (required for lm/vocoder training).
        #[arg(long)]
        codec: Option<PathBuf>,
        /// Continue from the checkpoint already in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Decode an eval manifest and report metrics.
    Eval {
        #[arg(long)]
        task: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        lm: PathBuf,
        #[arg(long)]
        vocoder: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Threshold check like "token_acc>=0.9"; exit 1 on violation.
        #[arg(long = "assert")]
        asserts: Vec<String>,
    },
    /// Reconstruct a WAV at several quantizer depths and report SNR.
    CodecRoundtrip {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        wav_in: PathBuf,
        #[arg(long)]
        wav_out: PathBuf,
        /// Comma-separated quantizer counts, e.g. 1,8,32.
        #[arg(long, value_delimiter = ',', default_value = "1,8,32")]
        quantizers: Vec<usize>,
    },
    /// Run a multi-step task chain and save per-step artifacts.
    Chain {
        /// s2st | noise_robust_asr | personalized_tts
        #[arg(long)]
        plan: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        lm: PathBuf,
        #[arg(long)]
        vocoder: PathBuf,
        #[arg(long)]
        wav_in: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic corpus manifest.
    GenCorpus {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long)]
        count: usize,
        /// train | eval
        #[arg(long, default_value = "eval")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        /// Codec checkpoint (needed for audio-target tasks).
        #[arg(long)]
        codec: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train {
            component,
            config,
            out,
            steps,
            codec,
            resume,
        } => {
            let report = cli::cmd_train(&cli::TrainArgs {
                component,
                config,
                out_dir: out.clone(),
                steps,
                codec_ckpt: codec,
                resume,
            })?;
            println!(
                "trained {} steps, final loss {:.6}, report at {}",
                report.losses.len(),
                report.metric("final_loss").unwrap_or(f64::NAN),
                out.join("report.json").display()
            );
            Ok(())
        }
        Command::Eval {
            task,
            config,
            codec,
            lm,
            vocoder,
            manifest,
            out,
            asserts,
        } => {
            cli::cmd_eval(&cli::EvalArgs {
                task,
                config,
                codec_ckpt: codec,
                lm_ckpt: lm,
                vocoder_ckpt: vocoder,
                manifest,
                out_dir: out,
                asserts,
            })?;
            Ok(())
        }
        Command::CodecRoundtrip {
            config,
            codec,
            wav_in,
            wav_out,
            quantizers,
        } => {
            cli::cmd_codec_roundtrip(&cli::RoundtripArgs {
                config,
                codec_ckpt: codec,
                wav_in,
                wav_out,
                quantizers,
            })?;
            Ok(())
        }
        Command::Chain {
            plan,
            config,
            codec,
            lm,
            vocoder,
            wav_in,
            out,
        } => cli::cmd_chain(&cli::ChainArgs {
            plan,
            config,
            codec_ckpt: codec,
            lm_ckpt: lm,
            vocoder_ckpt: vocoder,
            wav_in,
            out_dir: out,
        }),
        Command::GenCorpus {
            config,
            task,
            count,
            split,
            out,
            codec,
        } => {
            let path = cli::cmd_gen_corpus(&cli::GenCorpusArgs {
                config,
                task,
                count,
                split,
                out_dir: out,
                codec_ckpt: codec,
            })?;
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
