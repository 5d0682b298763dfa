mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::RunConfig;

/// Topology-control pipeline for the 14-bus grid: chronics, expert datasets,
/// model training and evaluation.
#[derive(Debug, Parser)]
#[command(name = "busgraph", version)]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Overrides `output_dir` from the configuration.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,

    /// Overrides the root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the grid file and the action space of every variant.
    SpecDump,
    /// Generate synthetic injection chronics.
    GenChronics,
    /// Run the experts over the chronics and write the datasets.
    GenDataset,
    /// Train every configured model kind for every training seed.
    Train,
    /// Test and out-of-distribution accuracy of the trained models.
    EvalAccuracy,
    /// Day-survival campaign of experts and model-backed agents.
    EvalAgents,
    /// Graph diameters of common topologies and per-layer MAD.
    AnalyzeGraphs,
    /// Finite-difference check of every model's loss gradient.
    GradCheck {
        /// Datapoints in the checked batch.
        #[arg(long, default_value_t = 20)]
        points: usize,
        #[arg(long, default_value_t = 8)]
        gnn_layers: usize,
        /// Hidden width used for the check (full widths are slow).
        #[arg(long, default_value_t = 12)]
        hidden_dim: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Print the resolved configuration.
    ShowConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    Config,
    MissingInput,
    Parse,
    Shape,
    Grid,
    GradCheck,
    Other,
}

impl FailureKind {
    fn code(self) -> u8 {
        match self {
            FailureKind::Config => 3,
            FailureKind::MissingInput => 4,
            FailureKind::Parse => 5,
            FailureKind::Shape => 6,
            FailureKind::Grid => 7,
            FailureKind::GradCheck => 8,
            FailureKind::Other => 1,
        }
    }

    fn name(self) -> &'static str {
        match self {
            FailureKind::Config => "config",
            FailureKind::MissingInput => "missing_input",
            FailureKind::Parse => "parse",
            FailureKind::Shape => "shape",
            FailureKind::Grid => "grid",
            FailureKind::GradCheck => "grad_check",
            FailureKind::Other => "other",
        }
    }
}

/// A classified CLI failure; decides the exit code.
#[derive(Debug)]
pub struct Failure {
    pub kind: FailureKind,
    pub msg: String,
}

impl Failure {
    pub fn config(msg: String) -> Self {
        Self { kind: FailureKind::Config, msg }
    }

    pub fn missing(msg: String) -> Self {
        Self { kind: FailureKind::MissingInput, msg }
    }

    pub fn grad_check(msg: String) -> Self {
        Self { kind: FailureKind::GradCheck, msg }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl std::error::Error for Failure {}

fn classify(err: &anyhow::Error) -> FailureKind {
    use busgraph::Error as E;
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return f.kind;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) => FailureKind::Config,
                E::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => FailureKind::MissingInput,
                E::Io { .. } => FailureKind::Other,
                E::Parse { .. } => FailureKind::Parse,
                E::ShapeMismatch(_) => FailureKind::Shape,
                E::UnknownLine(_)
                | E::InvalidSpec(_)
                | E::IllegalAction(_)
                | E::IslandedGrid { .. }
                | E::SingularSystem { .. } => FailureKind::Grid,
            };
        }
    }
    FailureKind::Other
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(dir) = cli.output_dir {
        cfg.output_dir = dir;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Ok(root) = std::env::var("BUSGRAPH_OUTPUT_ROOT") {
        if cfg.output_dir.is_relative() {
            cfg.output_dir = PathBuf::from(root).join(&cfg.output_dir);
        }
    }
    cfg.validate()?;
    if let Command::ShowConfig = cli.command {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let ctx = commands::Context::new(cfg)?;
    match cli.command {
        Command::SpecDump => commands::spec_dump(&ctx),
        Command::GenChronics => commands::gen_chronics(&ctx),
        Command::GenDataset => commands::gen_dataset(&ctx),
        Command::Train => commands::train(&ctx),
        Command::EvalAccuracy => commands::eval_accuracy(&ctx),
        Command::EvalAgents => commands::eval_agents(&ctx),
        Command::AnalyzeGraphs => commands::analyze_graphs(&ctx),
        Command::GradCheck {
            points,
            gnn_layers,
            hidden_dim,
            tolerance,
        } => commands::grad_check(&ctx, points, gnn_layers, hidden_dim, tolerance),
        Command::ShowConfig => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let kind = classify(&err);
            let msg = format!("{err:#}").replace('\n', " ");
            eprintln!("error kind={} msg={msg}", kind.name());
            ExitCode::from(kind.code())
        }
    }
}
