use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use forge::config::PipelineConfig;
use forge::pipeline::{self, Stage};

const DEFAULT_OUT: &str = "forge_out";

/// Pseudo-labeling pipeline over face-style embeddings.
///
/// Each stage reads artifacts of earlier stages from the output directory.
/// Every config key is optional; `forge defaults` prints the full set of
/// defaults as TOML.
#[derive(Parser)]
#[command(name = "forge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML config file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Caps worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Artifact directory (default: `paths.out`, else `forge_out`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or load embeddings and write the labeled/unlabeled/test split.
    Gen(Common),
    /// Train the baseline head and separate overlapping unlabeled samples.
    Separate(Common),
    /// Cluster disjoint unlabeled samples into pseudo-labels.
    Cluster(Common),
    /// Fit the pseudo-label noise model and attach per-sample p⁻.
    Noise(Common),
    /// Retrain with hard and soft-weighted pseudo-labels.
    Retrain(Common),
    /// Verification and identification on held-out identities.
    Evaluate(Common),
    /// Merge stage summaries into report.json.
    Report(Common),
    /// All stages in order.
    #[command(alias = "run-all")]
    Run(Common),
    /// Print the default config as TOML.
    Defaults,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let (stages, common): (Vec<Stage>, Common) = match cli.command {
        Command::Gen(c) => (vec![Stage::Gen], c),
        Command::Separate(c) => (vec![Stage::Separate], c),
        Command::Cluster(c) => (vec![Stage::Cluster], c),
        Command::Noise(c) => (vec![Stage::Noise], c),
        Command::Retrain(c) => (vec![Stage::Retrain], c),
        Command::Evaluate(c) => (vec![Stage::Evaluate], c),
        Command::Report(c) => (vec![Stage::Report], c),
        Command::Run(c) => (Stage::ALL.to_vec(), c),
        Command::Defaults => {
            print!("{}", PipelineConfig::default().to_toml());
            return ExitCode::SUCCESS;
        }
    };

    let mut cfg = match PipelineConfig::load(&common.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Err(e) = cfg.validate() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    if let Some(t) = common.threads {
        if t == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let out = common
        .out
        .or_else(|| cfg.paths.out.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));

    for stage in stages {
        match pipeline::run_stage(stage, &cfg, &out) {
            Ok(_) => eprintln!("{}: ok", stage.name()),
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        }
    }
    ExitCode::SUCCESS
}
