use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rolesum::gateway::GatewayMode;
use rolesum_cli::config::load_config;
use rolesum_cli::stages::{anno_import, run_all, run_stage, RunContext, Stage};

/// Measurement harness for role-conditioned summarization of court
/// decisions: generation, judge-pipeline evaluation, bias metrics,
/// similarity baselines, statistics, and annotation round-trips.
#[derive(Parser)]
#[command(name = "rolesum", version, about)]
struct Cli {
    /// Run configuration file (TOML).
    #[arg(long, global = true, default_value = "rolesum.toml")]
    config: PathBuf,

    /// Gateway mode override (live, record, replay).
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,

    /// Run identifier; artifacts land under `<output_dir>/<run_id>/`.
    #[arg(long, global = true, default_value = "default")]
    run_id: String,

    /// Sampling-seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum ModeArg {
    Live,
    Record,
    Replay,
}

impl From<ModeArg> for GatewayMode {
    fn from(mode: ModeArg) -> Self {
        match mode {
            ModeArg::Live => GatewayMode::Live,
            ModeArg::Record => GatewayMode::Record,
            ModeArg::Replay => GatewayMode::Replay,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Validate the corpus and snapshot it into the run directory.
    Ingest,
    /// Generate role-conditioned summaries for every case and repetition.
    Generate,
    /// Pick one repetition per (case, role, model) cell with the sampling seed.
    Sample,
    /// Run the extract/classify/include judge chain for every combo.
    Evaluate,
    /// Score tailored summaries against the neutral reference (0-10 scale).
    PrelimBias,
    /// Compute inclusion rates and favorability bias per summary.
    Metrics,
    /// Compute ROUGE, tf-idf, embedding, and fact-overlap baselines.
    Similarity,
    /// Fit the mixed-effects model and run the Friedman consistency test.
    Stats,
    /// Export blank annotation sheets (one CSV per annotator and case).
    AnnoExport,
    /// Import completed annotation sheets.
    AnnoImport {
        /// Directory of completed sheets; defaults to annotation.filled_dir.
        #[arg(long)]
        sheets: Option<PathBuf>,
    },
    /// Compute inter-annotator agreement (ICC and Fleiss' kappa).
    AnnoAgreement,
    /// Render result tables and plot-ready figure CSVs.
    Report,
    /// Run all stages in order.
    Run {
        /// Run a single named stage instead of the full sequence.
        #[arg(long, value_enum)]
        stage: Option<Stage>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            let payload = serde_json::json!({
                "error": {
                    "kind": "stage_failure",
                    "message": format!("{error:#}"),
                }
            });
            eprintln!("{payload}");
            ExitCode::FAILURE
        }
    }
}

fn execute(cli: &Cli) -> anyhow::Result<()> {
    let loaded = load_config(&cli.config)?;
    let ctx = RunContext::new(
        loaded,
        &cli.run_id,
        cli.mode.map(GatewayMode::from),
        cli.seed,
    );
    match &cli.command {
        Command::Ingest => run_stage(&ctx, Stage::Ingest),
        Command::Generate => run_stage(&ctx, Stage::Generate),
        Command::Sample => run_stage(&ctx, Stage::Sample),
        Command::Evaluate => run_stage(&ctx, Stage::Evaluate),
        Command::PrelimBias => run_stage(&ctx, Stage::PrelimBias),
        Command::Metrics => run_stage(&ctx, Stage::Metrics),
        Command::Similarity => run_stage(&ctx, Stage::Similarity),
        Command::Stats => run_stage(&ctx, Stage::Stats),
        Command::AnnoExport => run_stage(&ctx, Stage::AnnoExport),
        Command::AnnoImport { sheets } => anno_import(&ctx, sheets.as_deref()),
        Command::AnnoAgreement => run_stage(&ctx, Stage::AnnoAgreement),
        Command::Report => run_stage(&ctx, Stage::Report),
        Command::Run { stage } => run_all(&ctx, *stage),
    }
}
