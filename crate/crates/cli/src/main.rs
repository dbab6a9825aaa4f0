use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cospeech_cli::commands;

#[derive(Parser)]
#[command(
    name = "cospeech",
    version,
    about = "Dual-stream co-speech gesture pipeline: synthesis, training, generation, analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of clip archives.
    Synth {
        /// TOML config with a [synth] section.
        #[arg(long)]
        config: PathBuf,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Override the spec's rng_seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train and freeze the Stage-1 regional tokenizer.
    PretrainCodec {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training steps (defaults to [train].codec_steps or 300).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the Stage-2 dual-stream generator.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Frozen codec checkpoint directory.
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Output directory (runlog.jsonl + checkpoint/).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override the physics weight target; 0 disables the inertial
        /// prior entirely.
        #[arg(long)]
        beta_phys: Option<f64>,
    },
    /// Generate motion and a gate trace for one clip's features.
    Generate {
        /// Model checkpoint directory.
        #[arg(long)]
        ckpt: PathBuf,
        /// Input clip archive directory.
        #[arg(long)]
        clip: PathBuf,
        /// Output clip archive directory.
        #[arg(long)]
        out: PathBuf,
        /// Sample the gate latent instead of using the posterior mean.
        #[arg(long)]
        sampled: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Dump per-frame gate probabilities next to ground-truth flags (CSV).
    GateDump {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Kinematic analysis report over a dataset of clip archives.
    Analyze {
        #[arg(long)]
        data: PathBuf,
        /// Output report (JSON).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Bootstrap replicates for the confidence intervals.
        #[arg(long, default_value_t = 2000)]
        bootstrap: usize,
        /// Optional PSD-decay table output (TSV).
        #[arg(long)]
        psd_out: Option<PathBuf>,
    },
    /// Fréchet gesture distance, diversity, and beat alignment between two
    /// motion sets.
    Metrics {
        /// Reference dataset directory.
        #[arg(long)]
        real: PathBuf,
        /// Generated dataset directory.
        #[arg(long)]
        gen: PathBuf,
        /// Output metric records (JSON lines).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { config, out, seed } => commands::cmd_synth(&config, &out, seed),
        Command::PretrainCodec {
            data,
            config,
            out,
            steps,
            seed,
        } => commands::cmd_pretrain(&data, &config, &out, steps, seed),
        Command::Train {
            data,
            codec,
            config,
            out,
            seed,
            beta_phys,
        } => commands::cmd_train(&data, &codec, &config, &out, seed, beta_phys),
        Command::Generate {
            ckpt,
            clip,
            out,
            sampled,
            seed,
        } => commands::cmd_generate(&ckpt, &clip, &out, sampled, seed),
        Command::GateDump {
            ckpt,
            data,
            out,
            seed,
        } => commands::cmd_gate_dump(&ckpt, &data, &out, seed),
        Command::Analyze {
            data,
            out,
            seed,
            bootstrap,
            psd_out,
        } => commands::cmd_analyze(&data, &out, seed, bootstrap, psd_out.as_deref()),
        Command::Metrics {
            real,
            gen,
            out,
            seed,
        } => commands::cmd_metrics(&real, &gen, &out, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
