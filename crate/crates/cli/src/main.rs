use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use epispread::config::PipelineConfig;
use epispread::error::Error;
use epispread::pipeline::{self, Context, Stage};
use epispread::svg::PlotKind;

#[derive(Parser)]
#[command(name = "epispread", version, about = "Endemic-epidemic regression pipeline for weekly district case counts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the configured one and EPISPREAD_OUT.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed applied to every seeded stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Concurrent imputation fits (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Weekly Gini and staying-put features.
    Features(Common),
    /// Social-distance embedding.
    Embed(Common),
    /// Delay model and multiply imputed panels.
    Impute(Common),
    /// One model fit per imputation.
    Fit(Common),
    /// Rubin pooling of the fits.
    Pool(Common),
    /// Residuals, rootograms and QQ data.
    Diagnose(Common),
    /// Synthetic data set plus a matching config.
    Simulate(Common),
    /// All stages from features to plots.
    Pipeline(Common),
    /// SVG plots; all kinds from the output directory, or a single artifact.
    Plot(PlotArgs),
}

#[derive(Args)]
struct PlotArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    kind: Option<String>,
    /// Artifact to render; defaults to the kind's artifact in the output directory.
    #[arg(long)]
    input: Option<PathBuf>,
    /// SVG destination; defaults to plots/<kind>.svg in the output directory.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Parse { .. } => "parse",
        Error::UnknownDistrict(_) => "unknown_district",
        Error::InvalidInput(_) => "invalid_input",
        Error::MissingFeature { .. } => "missing_feature",
        Error::DegenerateRow(_) => "degenerate_row",
        Error::Numerical(_) => "numerical",
        Error::NoConvergence { .. } => "no_convergence",
        Error::Optimizer(_) => "optimizer",
        Error::Io { .. } => "io",
        Error::Csv(_) => "csv",
        Error::Json(_) => "json",
        Error::Config(_) => "config",
    }
}

fn context(common: &Common, stage: Stage) -> Result<Context, Error> {
    let mut config = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None if stage == Stage::Simulate || stage == Stage::Plot => PipelineConfig::default(),
        None => return Err(Error::Config("--config is required".into())),
    };
    if let Some(seed) = common.seed {
        config = config.with_seed(seed);
    }
    let out = config.output_dir(common.out.as_deref());
    let workers = common.workers.unwrap_or(config.workers);
    Ok(Context::new(config, out, workers))
}

fn plot(args: &PlotArgs) -> Result<Vec<PathBuf>, Error> {
    let ctx = context(&args.common, Stage::Plot)?;
    let Some(kind) = &args.kind else {
        if args.input.is_some() || args.output.is_some() {
            return Err(Error::Config("--input and --output need --kind".into()));
        }
        return Ok(pipeline::run(Stage::Plot, &ctx)?.outputs);
    };
    let kind = PlotKind::parse(kind)?;
    let input = args
        .input
        .clone()
        .unwrap_or_else(|| ctx.out.join(pipeline::plot_source(kind)));
    let output = args
        .output
        .clone()
        .unwrap_or_else(|| ctx.out.join(pipeline::paths::PLOTS).join(format!("{}.svg", kind.name())));
    pipeline::render_to(&input, kind, &output)?;
    Ok(vec![output])
}

fn execute(command: &Command) -> (Stage, Result<Vec<PathBuf>, Error>) {
    let (stage, common) = match command {
        Command::Features(c) => (Stage::Features, c),
        Command::Embed(c) => (Stage::Embed, c),
        Command::Impute(c) => (Stage::Impute, c),
        Command::Fit(c) => (Stage::Fit, c),
        Command::Pool(c) => (Stage::Pool, c),
        Command::Diagnose(c) => (Stage::Diagnose, c),
        Command::Simulate(c) => (Stage::Simulate, c),
        Command::Pipeline(c) => (Stage::Pipeline, c),
        Command::Plot(args) => return (Stage::Plot, plot(args)),
    };
    let result = context(common, stage).and_then(|ctx| pipeline::run(stage, &ctx).map(|r| r.outputs));
    (stage, result)
}

fn display(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (stage, result) = execute(&cli.command);
    match result {
        Ok(outputs) => {
            for p in &outputs {
                println!("{}", display(p));
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let mut value = serde_json::json!({
                "status": "error",
                "stage": stage.name(),
                "kind": error_kind(&e),
                "message": e.to_string(),
            });
            if let Error::Io { path, .. } = &e {
                value["path"] = serde_json::Value::String(display(path));
            }
            eprintln!("{value}");
            ExitCode::FAILURE
        }
    }
}
