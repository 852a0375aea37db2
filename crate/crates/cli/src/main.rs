mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Train, evaluate and run the AFFSeg segmentation network.
#[derive(Debug, Parser)]
#[command(name = "affseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic organ/tumor image and mask PNG pairs plus a manifest.
    GenData {
        /// Synthetic generator spec (JSON); the built-in 64x64 spec when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output directory, created if missing.
        #[arg(long)]
        out: PathBuf,
        /// Number of samples.
        #[arg(long, default_value_t = 8)]
        n: usize,
    },
    /// Train on a directory of <id>_img.png / <id>_mask.png pairs.
    Train {
        /// Model and training configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Directory for checkpoints, metric history and the resolved config.
        #[arg(long)]
        out: PathBuf,
        /// Continue from a full checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a directory of image/mask pairs.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Where to write the metrics JSON; next to the checkpoint when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Segment one image and write the label mask as a PNG.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optional color overlay of the prediction on the input.
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
    /// Train the five ablation variants and write a comparison table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { spec, out, n } => commands::gen_data(spec.as_deref(), &out, n),
        Command::Train {
            config,
            data,
            out,
            resume,
        } => commands::train(&config, &data, &out, resume.as_deref()),
        Command::Eval { ckpt, data, report } => commands::eval(&ckpt, &data, report.as_deref()),
        Command::Predict {
            ckpt,
            image,
            out,
            overlay,
        } => commands::predict(&ckpt, &image, &out, overlay.as_deref()),
        Command::Ablate { config, data, out } => commands::ablate(&config, &data, &out),
    };
    match result {
        Ok(artifacts) => {
            for a in artifacts {
                println!("wrote {}", a.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
