mod commands;
mod config;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "snake", version, about = "Multi-attribute traffic classification with fused experts")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Reproducibility log; one line is appended per run.
    #[arg(long, global = true, default_value = "snake.log")]
    log: PathBuf,
    /// Seed for splits, initialisation, dropout and shuffling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic labelled corpus from a TOML generator spec.
    Gen(GenArgs),
    /// Turn a pcap or flow-record file into a feature file.
    Ingest(IngestArgs),
    /// Train one expert on one task of a feature file.
    TrainExpert(TrainExpertArgs),
    /// Fuse trained experts and fine-tune the towers.
    Fuse(FuseArgs),
    /// Classify every flow of a feature file on all tasks of a model.
    Classify(ClassifyArgs),
    /// Accuracy, macro precision/recall/F1 and confusion matrices.
    Eval(EvalArgs),
    #[command(subcommand)]
    Diag(DiagCommand),
}

#[derive(Subcommand, Debug)]
enum DiagCommand {
    /// Check a descent trace against the convergence bound.
    Convergence(ConvergenceArgs),
    /// Flag trainable-gate runs whose loss rises or whose domains diverge.
    GateAnomaly(GateAnomalyArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long)]
    pub spec: PathBuf,
    /// Receives flows.txt, labels.csv and features.snkf.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    /// pcap capture (detected by magic number) or flow-record text.
    #[arg(long)]
    pub input: PathBuf,
    /// `flow_id,task_id,label` CSV; unlabelled flows are dropped when given.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Domain tag for every flow; defaults to the input file stem.
    #[arg(long)]
    pub source: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainExpertArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub task: String,
    /// Train on these classes only (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub classes: Vec<String>,
    #[arg(long)]
    pub id: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch loss CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FuseArgs {
    /// I, II or III.
    #[arg(long)]
    pub mode: String,
    #[arg(long, num_args = 1.., required = true)]
    pub experts: Vec<PathBuf>,
    /// Fine-tuning data; several files are merged by class name, then
    /// split into train and validation with the seed.
    #[arg(long, num_args = 1.., required = true)]
    pub features: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch fine-tune CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Let fine-tuning update the experts too.
    #[arg(long)]
    pub unfreeze_experts: bool,
}

#[derive(Args, Debug)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Merged by class name when several are given.
    #[arg(long, num_args = 1.., required = true)]
    pub features: Vec<PathBuf>,
    /// Task to evaluate; all tasks of the model when omitted.
    #[arg(long)]
    pub task: Option<String>,
    /// Evaluate on every sample, or only on the seeded test split.
    #[arg(long, value_enum, default_value = "all")]
    pub split: commands::EvalSplit,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct ConvergenceArgs {
    /// Run the quadratic reference problem with this curvature instead of a model.
    #[arg(long, conflicts_with_all = ["model", "features", "task"])]
    pub quadratic: Option<f64>,
    /// Step size for the quadratic problem.
    #[arg(long, requires = "quadratic")]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Step size as a fraction of 1/ĉ.
    #[arg(long)]
    pub alpha_fraction: Option<f64>,
    /// Receives convergence.csv and report.txt.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct GateAnomalyArgs {
    /// Fine-tune trace CSV written by `fuse --trace`.
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Labelled data whose sources are the domains compared.
    #[arg(long)]
    pub features: PathBuf,
    /// Task whose per-source accuracy is compared (with `--by source`).
    #[arg(long)]
    pub task: Option<String>,
    /// Domains to compare: the samples' source tags, or the model's tasks.
    #[arg(long, value_enum, default_value = "source")]
    pub by: commands::DomainKind,
    /// Report file; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gen(_) => "gen",
            Command::Ingest(_) => "ingest",
            Command::TrainExpert(_) => "train-expert",
            Command::Fuse(_) => "fuse",
            Command::Classify(_) => "classify",
            Command::Eval(_) => "eval",
            Command::Diag(DiagCommand::Convergence(_)) => "diag-convergence",
            Command::Diag(DiagCommand::GateAnomaly(_)) => "diag-gate-anomaly",
        }
    }
}

fn append_log(cli: &Cli, seed: u64, cfg: &RunConfig) -> Result<()> {
    let line = format!(
        "snake {} {} seed={} config_sha256={} core={}\n",
        env!("CARGO_PKG_VERSION"),
        cli.command.name(),
        seed,
        cfg.hash()?,
        snake_core::VERSION
    );
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&cli.log)
        .with_context(|| format!("opening log {}", cli.log.display()))?;
    f.write_all(line.as_bytes())?;
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    let seed = match &cli.command {
        Command::Gen(a) => commands::gen(a, cli.seed)?,
        cmd => {
            let seed = cli.seed.unwrap_or(0);
            match cmd {
                Command::Gen(_) => unreachable!(),
                Command::Ingest(a) => commands::ingest(a, &cfg)?,
                Command::TrainExpert(a) => commands::train_expert(a, &cfg, seed)?,
                Command::Fuse(a) => commands::fuse(a, &cfg, seed)?,
                Command::Classify(a) => commands::classify(a)?,
                Command::Eval(a) => commands::eval(a, &cfg, seed)?,
                Command::Diag(DiagCommand::Convergence(a)) => commands::convergence(a, &cfg, seed)?,
                Command::Diag(DiagCommand::GateAnomaly(a)) => commands::gate_anomaly(a, &cfg)?,
            }
            seed
        }
    };
    append_log(cli, seed, &cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
