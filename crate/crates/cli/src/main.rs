use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fusionkit_cli::config::{Overrides, RunConfig};
use fusionkit_cli::stages::{self, AssessArgs};
use fusionkit_cli::StageError;
use fusionkit_core::assessment::GroupBy;
use fusionkit_core::SourceKind;
use serde_json::{json, Value};

/// Fusion-domain corpus construction, QA synthesis, assessment and serving.
#[derive(Debug, Parser)]
#[command(name = "fusionkit", version)]
struct Cli {
    /// TOML run configuration; relative paths inside it resolve against its directory.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for every random choice (shuffling, default run ids).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker count; defaults to the logical CPU count.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Corpus budget in counting units.
    #[arg(long, global = true)]
    budget: Option<u64>,
    /// Use a scripted mock backend instead of the configured upstream.
    #[arg(long, global = true, value_name = "SCRIPT")]
    mock: Option<PathBuf>,
    /// Output directory for all artifacts.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Print the resolved plan without calling a backend or writing artifacts.
    #[arg(long, global = true)]
    dry_run: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CotMode {
    On,
    Off,
    Both,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GroupArg {
    Backend,
    Cot,
    Topic,
}

fn parse_source(s: &str) -> Result<(SourceKind, PathBuf), String> {
    let (kind, path) = s.split_once('=').ok_or("expected KIND=PATH")?;
    Ok((kind.parse()?, PathBuf::from(path)))
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load source texts into documents.jsonl.
    Ingest {
        /// Source directory or file, e.g. `arxiv=papers/`. Repeatable; overrides [sources].
        #[arg(long = "source", value_name = "KIND=PATH", value_parser = parse_source)]
        sources: Vec<(SourceKind, PathBuf)>,
    },
    /// Chunk documents and synthesize QA records into records.jsonl.
    Generate {
        /// Add back-translated paraphrases of every record.
        #[arg(long)]
        augment: bool,
    },
    /// Sample records to the budget and write corpus/dataset.jsonl and corpus/manifest.json.
    Assemble,
    /// Split the corpus into train/validation files with an SFT manifest.
    ExportTrain {
        #[arg(long)]
        validation_ratio: Option<f64>,
    },
    /// Answer the questionnaire with each backend, with and/or without CoT.
    Assess {
        #[arg(long)]
        run_id: Option<String>,
        #[arg(long, value_name = "PATH")]
        questionnaire: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "both")]
        cot: CotMode,
        /// Score transcripts with the configured judge backend.
        #[arg(long)]
        judge: bool,
        /// Run the bilingual consistency check on the first N items.
        #[arg(long, default_value_t = 0, value_name = "N")]
        consistency: usize,
    },
    /// Summarize an assessment run into report.md and report.json.
    Report {
        #[arg(long)]
        run_id: Option<String>,
        #[arg(long, value_name = "PATH")]
        questionnaire: Option<PathBuf>,
        #[arg(long, value_enum, value_delimiter = ',')]
        group_by: Vec<GroupArg>,
        /// Item ids to show side by side.
        #[arg(long, value_delimiter = ',')]
        excerpt: Option<Vec<String>>,
    },
    /// Run the HTTP gateway.
    Serve {
        #[arg(long, value_name = "ADDR")]
        listen: Option<String>,
    },
}

fn stage_name(c: &Command) -> &'static str {
    match c {
        Command::Ingest { .. } => "ingest",
        Command::Generate { .. } => "generate",
        Command::Assemble => "assemble",
        Command::ExportTrain { .. } => "export-train",
        Command::Assess { .. } => "assess",
        Command::Report { .. } => "report",
        Command::Serve { .. } => "serve",
    }
}

async fn run(cli: Cli) -> Result<Value, StageError> {
    let overrides = Overrides { seed: cli.seed, jobs: cli.jobs, budget: cli.budget, mock: cli.mock, out: cli.out };
    let mut cfg = RunConfig::resolve(cli.config.as_deref(), &overrides)?;
    let dry = cli.dry_run;
    match cli.command {
        Command::Ingest { sources } => {
            for (kind, path) in sources {
                if !path.exists() {
                    return Err(StageError::Config(format!("source path does not exist: {}", path.display())));
                }
                cfg.sources.insert(kind, path);
            }
            stages::ingest(&cfg, dry)
        }
        Command::Generate { augment } => {
            cfg.augment |= augment;
            stages::generate(&cfg, dry).await
        }
        Command::Assemble => stages::assemble(&cfg, dry),
        Command::ExportTrain { validation_ratio } => stages::export_train(&cfg, validation_ratio, dry),
        Command::Assess { run_id, questionnaire, cot, judge, consistency } => {
            if questionnaire.is_some() {
                cfg.assess.questionnaire = questionnaire;
            }
            let cot_modes = match cot {
                CotMode::On => vec![true],
                CotMode::Off => vec![false],
                CotMode::Both => vec![true, false],
            };
            let run_id = run_id.unwrap_or_else(|| stages::default_run_id(&cfg));
            stages::assess(&cfg, &AssessArgs { run_id, cot_modes, judge, consistency }, dry).await
        }
        Command::Report { run_id, questionnaire, group_by, excerpt } => {
            if questionnaire.is_some() {
                cfg.assess.questionnaire = questionnaire;
            }
            let group_by = group_by
                .into_iter()
                .map(|g| match g {
                    GroupArg::Backend => GroupBy::Backend,
                    GroupArg::Cot => GroupBy::Cot,
                    GroupArg::Topic => GroupBy::Topic,
                })
                .collect();
            let run_id = run_id.unwrap_or_else(|| stages::default_run_id(&cfg));
            stages::report(&cfg, &run_id, group_by, excerpt, dry)
        }
        Command::Serve { listen } => stages::serve(&cfg, listen, dry).await,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .init();
    let stage = stage_name(&cli.command);
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build().expect("tokio runtime");
    match runtime.block_on(run(cli)) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": e.to_string(), "kind": e.kind(), "stage": stage }));
            ExitCode::from(1)
        }
    }
}
