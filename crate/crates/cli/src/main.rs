//! `pairpose`: dataset generation, training, guided sampling, evaluation and
//! export for the interacting-body generator.

mod artifacts;
mod commands;
mod error;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use pairpose::config::RunConfig;
use pairpose::data::InteractionLabel;

use commands::{Context, ExportFormat, GenDataArgs, SampleArgs, TrainArgs};
use error::{CliError, CliResult};

#[derive(Parser, Debug)]
#[command(name = "pairpose", version, about = "Contact-guided generation of an interacting body")]
struct Cli {
    /// Run configuration (JSON); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    diffusion: DiffusionFlags,
    #[command(subcommand)]
    command: Command,
}

/// Noise schedule overrides, applied before the command runs.
#[derive(Args, Debug)]
struct DiffusionFlags {
    /// Number of diffusion steps T.
    #[arg(long, global = true)]
    diffusion_steps: Option<usize>,
    #[arg(long, global = true)]
    beta_start: Option<f64>,
    #[arg(long, global = true)]
    beta_end: Option<f64>,
    /// Sampling stride; must divide T.
    #[arg(long, global = true)]
    stride: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate, split, augment and save a synthetic dataset.
    GenData {
        /// Comma-separated labels to draw from.
        #[arg(long, value_delimiter = ',', value_parser = parse_label)]
        labels: Option<Vec<InteractionLabel>>,
        /// Generated samples before augmentation.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        test_count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Dataset directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a dataset directory, a sample file or an exported JSON sample.
    ValidateData {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Train the conditional noise predictor.
    TrainDiffusion(TrainFlags),
    /// Train the contact predictor.
    TrainContact(TrainFlags),
    /// Train the evaluation classifier.
    TrainClassifier(TrainFlags),
    /// Generate interactive bodies for partners from the test split.
    Sample {
        #[arg(long, value_parser = parse_label)]
        label: Option<InteractionLabel>,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Guidance step size: one value for every segment or four values
        /// (translation, root, body, hands).
        #[arg(long, value_delimiter = ',')]
        lambda: Option<Vec<f64>>,
        /// Plain sampling without the contact objective.
        #[arg(long)]
        unguided: bool,
        /// Contact probability threshold.
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score generated samples against the test split.
    Evaluate {
        #[arg(long)]
        samples: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write one OBJ or JSON file per generated sample.
    Export {
        #[arg(long)]
        samples: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = FormatFlag::Json)]
        format: FormatFlag,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in invariant suite.
    Selftest,
}

#[derive(Args, Debug)]
struct TrainFlags {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint path.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl From<TrainFlags> for TrainArgs {
    fn from(f: TrainFlags) -> Self {
        TrainArgs { data: f.data, steps: f.steps, seed: f.seed, out: f.out }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatFlag {
    Obj,
    Json,
}

fn parse_label(s: &str) -> Result<InteractionLabel, String> {
    InteractionLabel::parse(s).ok_or_else(|| {
        let names: Vec<&str> = InteractionLabel::ALL.iter().map(|l| l.name()).collect();
        format!("unknown label {s:?}; expected one of {}", names.join(", "))
    })
}

fn lambda_vector(v: &[f64]) -> CliResult<[f64; 4]> {
    match *v {
        [l] => Ok([l; 4]),
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(CliError::usage(format!("--lambda takes 1 or 4 values, got {}", v.len()))),
    }
}

fn load_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let d = &cli.diffusion;
    let dc = &mut cfg.diffusion;
    dc.steps = d.diffusion_steps.unwrap_or(dc.steps);
    dc.beta_start = d.beta_start.unwrap_or(dc.beta_start);
    dc.beta_end = d.beta_end.unwrap_or(dc.beta_end);
    dc.stride = d.stride.unwrap_or(dc.stride);
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    if matches!(cli.command, Command::Selftest) {
        return commands::selftest();
    }
    let mut ctx = Context::new(load_config(&cli)?)?;
    match cli.command {
        Command::GenData { labels, count, test_count, seed, out } => {
            commands::gen_data(&ctx, GenDataArgs { labels, count, test_count, seed, out })
        }
        Command::ValidateData { input } => commands::validate_data(&ctx, &input),
        Command::TrainDiffusion(f) => commands::train_diffusion(&mut ctx, f.into()),
        Command::TrainContact(f) => commands::train_contact(&mut ctx, f.into()),
        Command::TrainClassifier(f) => commands::train_classifier(&mut ctx, f.into()),
        Command::Sample { label, count, seed, lambda, unguided, tau, batch, data, out } => {
            let lambda = lambda.as_deref().map(lambda_vector).transpose()?;
            commands::sample(&mut ctx, SampleArgs { label, count, seed, lambda, unguided, tau, batch, data, out })
        }
        Command::Evaluate { samples, data, out } => commands::evaluate_cmd(&ctx, samples.as_deref(), data.as_deref(), out),
        Command::Export { samples, format, data, out } => {
            let format = match format {
                FormatFlag::Obj => ExportFormat::Obj,
                FormatFlag::Json => ExportFormat::Json,
            };
            commands::export(&ctx, samples.as_deref(), data.as_deref(), format, out)
        }
        Command::Selftest => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, rec| writeln!(buf, "level={} {}", rec.level().as_str().to_ascii_lowercase(), rec.args()))
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let reason = e.to_string();
            let first = reason.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", CliError::usage(first).line());
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.kind.code() as u8)
        }
    }
}
