use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ram_cli::{exit_code, Common};

/// Recurrent attention model on synthetic chest X-ray proxies.
#[derive(Parser)]
#[command(name = "ram", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads for parallel rollouts (results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Args)]
struct Shared {
    /// Run configuration file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
}

impl Shared {
    fn common(&self) -> Common {
        Common {
            config: self.config.clone(),
            seed: self.seed,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labelled synthetic dataset.
    GenData {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        count: usize,
    },
    /// Pretrain the convolutional autoencoder stack on random glimpses.
    Pretrain {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the attention model; writes metrics, heatmaps and checkpoints.
    Train {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        data: PathBuf,
        /// Starting checkpoint, e.g. from `pretrain`.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configured epoch count.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Greedy accuracy of a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also report accuracy under a uniformly random glimpse policy.
        #[arg(long)]
        ablation: bool,
    },
    /// Per-step glimpse trace of one image.
    Trace {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        ckpt: PathBuf,
        /// Input image (binary PGM).
        #[arg(long)]
        image: PathBuf,
        /// Trace output (JSON lines).
        #[arg(long)]
        out: PathBuf,
        /// Also write the image with the glimpse path drawn on it.
        #[arg(long)]
        path_image: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> ram_cli::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| ram_core::Error::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::GenData { shared, out, count } => ram_cli::gen_data(&shared.common(), &out, count).map(drop),
        Command::Pretrain { shared, data, out } => ram_cli::pretrain(&shared.common(), &data, &out).map(drop),
        Command::Train {
            shared,
            data,
            ckpt,
            out,
            epochs,
        } => ram_cli::train(&shared.common(), &data, ckpt.as_deref(), &out, epochs).map(drop),
        Command::Eval {
            shared,
            ckpt,
            data,
            ablation,
        } => ram_cli::eval(&shared.common(), &ckpt, &data, ablation).map(drop),
        Command::Trace {
            shared,
            ckpt,
            image,
            out,
            path_image,
        } => ram_cli::trace(&shared.common(), &ckpt, &image, &out, path_image.as_deref()).map(drop),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
