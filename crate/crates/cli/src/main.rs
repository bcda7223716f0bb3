use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use stemweaver::pipeline::{
    bench, exit, inspect_tree, BackendSpec, BenchManifest, Pipeline, PipelineError, RunConfig, ToolEndpoints,
};
use stemweaver::plan::InputDescriptor;

#[derive(Parser)]
#[command(name = "stemweaver", version, about = "Plan, generate, evaluate and mix multi-event audio")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run all stages and write the mix, stems, traces and report.
    Run(RunArgs),
    /// Stop after planning and write plan.json.
    Plan(RunArgs),
    /// Run every case of a benchmark manifest.
    Bench(BenchArgs),
    /// Print a stage-3 trace as an indented tree.
    InspectTree(InspectArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// Run config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, env = "STEMWEAVER_OUT_DIR")]
    out: Option<PathBuf>,
    /// `scripted:PATH` or `http:URL`.
    #[arg(long)]
    backend: Option<String>,
    /// Agent backend base URL; used when --backend is absent.
    #[arg(long, env = "STEMWEAVER_BACKEND_URL", hide = true)]
    backend_url: Option<String>,
    /// `mock` or a JSON file mapping tool ids to `mock` or URLs.
    #[arg(long)]
    tools: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Events evaluated concurrently.
    #[arg(long)]
    parallel: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    /// Input descriptor (JSON).
    #[arg(long, required_unless_present = "text")]
    input: Option<PathBuf>,
    /// Text-only input.
    #[arg(long, conflicts_with = "input")]
    text: Option<String>,
    #[arg(long)]
    plan_only: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct BenchArgs {
    /// Benchmark manifest (JSON).
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct InspectArgs {
    /// Trace file written by `run`.
    trace: PathBuf,
    /// Also write Graphviz DOT here.
    #[arg(long)]
    dot: Option<PathBuf>,
}

fn config_from(common: &Common) -> Result<RunConfig, PipelineError> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(url) = &common.backend_url {
        config.backend = Some(BackendSpec::Http(url.trim_end_matches('/').to_string()));
    }
    if let Some(b) = &common.backend {
        config.backend = Some(b.parse().map_err(PipelineError::Config)?);
    }
    if let Some(t) = &common.tools {
        config.tools = ToolEndpoints::from_arg(t)?;
    }
    if let Some(out) = &common.out {
        config.out_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(p) = common.parallel {
        config.parallel = p;
    }
    Ok(config)
}

fn read_input(args: &RunArgs) -> Result<InputDescriptor, PipelineError> {
    if let Some(text) = &args.text {
        return Ok(InputDescriptor::text_only(text.clone()));
    }
    let path = args.input.as_deref().expect("clap requires --input or --text");
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
}

fn rel(p: &Path) -> String {
    p.display().to_string()
}

async fn run(args: RunArgs, plan_only: bool) -> Result<(), PipelineError> {
    let config = config_from(&args.common)?;
    let input = read_input(&args)?;
    input.validate()?;
    let pipeline = Pipeline::from_config(config)?;
    if plan_only || args.plan_only {
        let outcome = pipeline.plan(&input).await?;
        let out = json!({
            "plan": rel(&pipeline.config().out_dir.join("plan.json")),
            "events": outcome.plan.events.len(),
            "rounds": outcome.rounds,
            "best_effort": outcome.best_effort,
        });
        println!("{}", serde_json::to_string_pretty(&out).expect("summary serializes"));
        return Ok(());
    }
    let summary = pipeline.run(&input).await?;
    let out = json!({
        "mix": rel(&summary.mix_path),
        "stems": summary.stem_paths.iter().map(|p| rel(p)).collect::<Vec<_>>(),
        "traces": summary.trace_paths.iter().map(|p| rel(p)).collect::<Vec<_>>(),
        "report": rel(&summary.report_path),
        "events": summary.report.events.len(),
        "mix_duration_s": summary.report.mix_duration_s,
        "calls": summary.report.calls,
    });
    println!("{}", serde_json::to_string_pretty(&out).expect("summary serializes"));
    Ok(())
}

async fn run_bench(args: BenchArgs) -> Result<(), PipelineError> {
    let config = config_from(&args.common)?;
    let manifest = BenchManifest::load(&args.manifest)?;
    let out_dir = config.out_dir.clone();
    let summary = bench(&config, &manifest, &out_dir).await?;
    for row in &summary.rows {
        let status = if row.pass { "pass" } else { "FAIL" };
        let detail = row.error.clone().unwrap_or_else(|| match row.event_count_match {
            Some(false) => format!(
                "event count {} != expected {}",
                row.events.unwrap_or(0),
                row.expected_event_count.unwrap_or(0)
            ),
            _ => String::new(),
        });
        println!("{status} {} {detail}", row.id);
    }
    println!(
        "{}/{} passed; {} {}",
        summary.passed(),
        summary.rows.len(),
        rel(&summary.csv_path),
        rel(&summary.json_path)
    );
    Ok(())
}

fn inspect(args: InspectArgs) -> Result<(), PipelineError> {
    let (trace, text, dot) = inspect_tree(&args.trace)?;
    print!("{text}");
    println!("nodes: {}", trace.nodes.len());
    if let Some(path) = &args.dot {
        std::fs::write(path, dot).map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args, false).await,
        Command::Plan(args) => run(args, true).await,
        Command::Bench(args) => run_bench(args).await,
        Command::InspectTree(args) => inspect(args),
    };
    match result {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            eprintln!("error [{}]: {e}", e.stage());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
