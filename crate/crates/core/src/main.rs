use std::fmt::Write as _;
use std::io::{self, Write as _};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use lao::config::{Backend, ConfigLayer, RunConfig};
use lao::corpus::{eligible_sentences, filter_event_types, load_corpus, load_ontology};
use lao::pipeline;
use lao::prompt::Variant;
use lao::report;
use lao::Result;

#[derive(Parser)]
#[command(name = "lao", version, about = "Few-shot event detection with confidence-scored LLM prompts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the ontology and corpus and print instance counts.
    Validate(RunArgs),
    /// Draw few-shot sets and test sequences without calling a model.
    Sample(RunArgs),
    /// Run the full pipeline and write the run directory.
    Run(RunArgs),
    /// Re-score the predictions of an existing run.
    Score {
        #[command(flatten)]
        args: RunArgs,
        /// Run directory to re-score.
        #[arg(long)]
        run: PathBuf,
    },
    /// Print the report of an existing run.
    Report {
        /// Run directory.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Json,
    Csv,
    Svg,
}

#[derive(Args)]
struct RunArgs {
    /// Flat `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    ontology: Option<PathBuf>,
    /// Restrict to a topic; repeatable.
    #[arg(long = "topic")]
    topics: Vec<String>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    seed: Option<u64>,
    /// Test sentences per topic.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    k_shot: Option<usize>,
    #[arg(long)]
    min_instances: Option<usize>,
    /// Replay completions from this store.
    #[arg(long, conflicts_with = "live")]
    replay: Option<PathBuf>,
    /// Call the model endpoint; the API key is read from LAO_API_KEY.
    #[arg(long)]
    live: bool,
    /// Where live completions are recorded.
    #[arg(long, requires = "live")]
    record: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long)]
    concurrency: Option<usize>,
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    run_id: Option<String>,
}

impl RunArgs {
    fn resolve(self) -> Result<RunConfig> {
        let file = match &self.config {
            Some(p) => ConfigLayer::load(p)?,
            None => ConfigLayer::default(),
        };
        let flags = ConfigLayer {
            corpus: self.corpus,
            ontology: self.ontology,
            topics: self.topics,
            variant: self.variant,
            seed: self.seed,
            k_shot: self.k_shot,
            min_instances: self.min_instances,
            max_items: self.limit,
            backend: if self.live {
                Some(Backend::Live)
            } else if self.replay.is_some() {
                Some(Backend::Replay)
            } else {
                None
            },
            store: self.replay.or(self.record),
            model: self.model,
            base_url: self.base_url,
            concurrency: self.concurrency,
            templates: self.templates,
            out: self.out,
            run_id: self.run_id,
            ..Default::default()
        };
        file.overlay(flags).resolve()
    }
}

fn validate(cfg: &RunConfig) -> Result<String> {
    let mut out = String::new();
    let ontology = load_ontology(&cfg.ontology)?;
    let corpus = load_corpus(&cfg.corpus, &ontology)?;
    let kept = filter_event_types(&corpus, &ontology, cfg.min_instances);
    writeln!(
        out,
        "{} sentences, {} annotations, {} eligible (>= {} chars)",
        corpus.sentences.len(),
        corpus.annotations.len(),
        eligible_sentences(&corpus, cfg.min_chars).len(),
        cfg.min_chars
    )
    .unwrap();
    for topic in &ontology.topics {
        let retained = kept.topic(&topic.name).map(|t| t.event_types.len()).unwrap_or(0);
        writeln!(out, "{}: {}/{} event types retained", topic.name, retained, topic.event_types.len()).unwrap();
        for ty in &topic.event_types {
            let n = corpus.annotations.iter().filter(|a| a.event_type == *ty).count();
            let mark = if kept.contains_type(ty) { "" } else { "  (dropped)" };
            writeln!(out, "  {ty:<32} {n:>5}{mark}").unwrap();
        }
    }
    Ok(out)
}

fn sample(cfg: &RunConfig) -> Result<String> {
    let mut out = String::new();
    let prepared = pipeline::prepare(cfg)?;
    let splits = pipeline::sample(cfg, &prepared)?;
    for split in &splits.topics {
        let positives = split.test.positives_mask.iter().filter(|p| **p).count();
        writeln!(
            out,
            "{}: {} test sentences ({} positive), {} event types queried",
            split.topic,
            split.test.items.len(),
            positives,
            split.event_types.len()
        )
        .unwrap();
        for (ty, set) in &split.few_shot {
            let ids: Vec<&str> = set.sent_ids().collect();
            writeln!(out, "  {ty:<32} {}", ids.join(" ")).unwrap();
        }
        for n in &split.notices {
            writeln!(out, "  note: {n}").unwrap();
        }
    }
    for sk in &splits.skipped_topics {
        writeln!(out, "{}: skipped: {}", sk.topic, sk.reason).unwrap();
    }
    let path = pipeline::save_splits(&cfg.run_dir(), &splits)?;
    writeln!(out, "wrote {}", path.display()).unwrap();
    Ok(out)
}

fn run(cfg: &RunConfig) -> Result<String> {
    cfg.validate()?;
    let backend = pipeline::build_backend(cfg)?;
    let run = pipeline::run_pipeline(cfg, backend.as_ref())?;
    Ok(format!("{}wrote {}\n", report::to_table(&run.report), run.dir.display()))
}

fn real_main(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Validate(args) => validate(&args.resolve()?),
        Command::Sample(args) => sample(&args.resolve()?),
        Command::Run(args) => run(&args.resolve()?),
        Command::Score { args, run } => {
            let rep = pipeline::rescore(&args.resolve()?, &run)?;
            Ok(report::to_table(&rep))
        }
        Command::Report { run, format } => {
            let rep = pipeline::read_report(&run)?;
            Ok(match format {
                Format::Table => report::to_table(&rep),
                Format::Json => report::to_json(&rep),
                Format::Csv => report::to_csv(&rep)?,
                Format::Svg => report::to_svg(&rep),
            })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match real_main(Cli::parse()) {
        Ok(text) => match io::stdout().lock().write_all(text.as_bytes()) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) if e.kind() == io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::FAILURE
            }
        },
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
