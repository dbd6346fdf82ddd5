use clap::{Parser, Subcommand, ValueEnum};
use intent_cli::{run_pipeline, run_stage, CliError, Overrides, PipelineConfig, Stage, Status};
use intent_core::embed::EmbedderKind;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EmbedderArg {
    Hash,
    Remote,
}

#[derive(Parser)]
#[command(name = "intent", version, about = "Intention-space reward aggregation pipeline")]
struct Cli {
    /// TOML pipeline configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; every named seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for artifacts and manifests.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    gamma: Option<f64>,
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    #[arg(long, global = true)]
    tau: Option<usize>,
    #[arg(long = "k-max", global = true)]
    k_max: Option<usize>,
    #[arg(long, global = true, value_enum)]
    embedder: Option<EmbedderArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out games and write the trajectory log.
    Collect {
        /// Number of games (default 1000).
        #[arg(long)]
        games: Option<usize>,
        /// Scripted opponent for the offer games; self-play otherwise.
        #[arg(long)]
        opponent: Option<String>,
    },
    /// Embed every distinct utterance.
    Embed,
    /// Build the dendrogram and the clustering-metric sweep.
    Cluster,
    /// Sweep SplitScore and cut at the selected granularity.
    SelectK,
    /// Build the reward table and per-step advantages.
    Aggregate,
    /// Offline REINFORCE on the collected corpus.
    Train,
    /// Online REINFORCE from the offline checkpoint.
    TrainOnline,
    /// Greedy evaluation of the untrained, offline and online policies.
    Eval,
    /// Summary and CSV bundle under `report/`.
    Report,
    /// Every stage in order.
    Pipeline,
    /// Print the effective configuration as TOML.
    ShowConfig,
}

fn config(cli: &Cli) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        gamma: cli.gamma,
        epsilon: cli.epsilon,
        tau: cli.tau,
        k_max: cli.k_max,
        embedder: cli.embedder.map(|e| match e {
            EmbedderArg::Hash => EmbedderKind::HashFeaturizer,
            EmbedderArg::Remote => EmbedderKind::RemoteService,
        }),
    });
    if let Command::Collect { games, opponent } = &cli.command {
        if let Some(g) = games {
            cfg.env.games = *g;
        }
        if opponent.is_some() {
            cfg.env.opponent = opponent.clone();
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report(stage: Stage, status: Status) {
    let word = match status {
        Status::Ran => "done",
        Status::Skipped => "skipped (up to date)",
    };
    let _ = writeln!(std::io::stdout(), "{}: {word}", stage.name());
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = config(cli)?;
    let stage = match cli.command {
        Command::Collect { .. } => Stage::Collect,
        Command::Embed => Stage::Embed,
        Command::Cluster => Stage::Cluster,
        Command::SelectK => Stage::SelectK,
        Command::Aggregate => Stage::Aggregate,
        Command::Train => Stage::Train,
        Command::TrainOnline => Stage::TrainOnline,
        Command::Eval => Stage::Eval,
        Command::Report => Stage::Report,
        Command::Pipeline => {
            for (s, st) in run_pipeline(&cfg)? {
                report(s, st);
            }
            return Ok(());
        }
        Command::ShowConfig => {
            let _ = write!(std::io::stdout(), "{}", cfg.to_toml());
            return Ok(());
        }
    };
    report(stage, run_stage(&cfg, stage)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
