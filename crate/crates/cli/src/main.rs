//! `avsurf` command-line front end.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Novel-view binaural audio synthesis on procedurally generated rooms.
#[derive(Debug, Parser)]
#[command(name = "avsurf", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// TOML run config. Missing fields take their defaults.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config value, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    /// True when the user supplied any configuration at all.
    pub fn given(&self) -> bool {
        self.config.is_some() || !self.overrides.is_empty()
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum WavFormat {
    Pcm16,
    Float32,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render priors and simulate binaural clips for every configured pose.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory to create.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a generated dataset, writing checkpoints and a loss log.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory written by `generate`.
        #[arg(long)]
        data: PathBuf,
        /// Run directory for checkpoints, loss.csv and the echoed config.
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
    },
    /// Render binaural audio for a pose from a mono source recording.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Listener pose as `x,y,z,yaw_deg[,pitch_deg]`.
        #[arg(long, allow_hyphen_values = true)]
        pose: String,
        /// Source WAV; resampled to 22050 Hz and mixed to mono.
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Take the room from this dataset instead of the config's scene.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "pcm16")]
        format: WavFormat,
    },
    /// Score the model and baselines on a dataset split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Needed when the `model` method is requested.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Metric CSV to write.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated methods; defaults to `eval.methods`.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
    },
    /// Write the frequency embedding and acoustic feature rows for a pose.
    ExportFeatures {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Listener pose as `x,y,z,yaw_deg[,pitch_deg]`.
        #[arg(long, allow_hyphen_values = true)]
        pose: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

/// Process exit status categories.
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<avsurf::Error> for Failure {
    fn from(e: avsurf::Error) -> Self {
        use avsurf::Error as E;
        let code = match &e {
            E::Config(_) | E::InvalidArgument(_) => EXIT_USAGE,
            E::Numeric(_) | E::InsufficientDecay { .. } => EXIT_NUMERIC,
            E::Shape { .. } | E::UnsupportedWav(_) | E::Checkpoint(_) | E::Data(_) | E::Io { .. } => EXIT_DATA,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("AVSURF_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Generate { cfg, out } => commands::generate(&cfg, &out),
        Command::Train { cfg, data, out, resume } => commands::train(&cfg, &data, &out, resume.as_deref()),
        Command::Synth {
            cfg,
            checkpoint,
            pose,
            source,
            out,
            data,
            format,
        } => commands::synth(&cfg, &checkpoint, &pose, &source, &out, data.as_deref(), format),
        Command::Eval {
            cfg,
            checkpoint,
            data,
            out,
            methods,
            split,
        } => commands::eval(&cfg, checkpoint.as_deref(), &data, &out, methods, split),
        Command::ExportFeatures {
            cfg,
            checkpoint,
            pose,
            out,
            data,
        } => commands::export_features(&cfg, &checkpoint, &pose, &out, data.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
