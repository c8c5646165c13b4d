use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::Value;

use tcorb::eval::pipeline::{
    run_pipeline, stage, stage_analogs, stage_cluster, stage_evaluate, stage_extract, stage_fit, stage_forecast,
    stage_ingest, stage_synth, FitTarget, Pathway, Workspace,
};
use tcorb::eval::RunConfig;
use tcorb::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "tcorb", version, about = "Tropical cyclone structure and intensity pipeline")]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for synthesis and clustering; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic library.
    Synth,
    /// Parse tracks and build storm-centred samples.
    Ingest,
    /// Compute summary vectors for every sample.
    Extract,
    /// Fit one model family.
    Fit {
        #[arg(long, value_enum)]
        what: What,
    },
    /// Issue structural forecasts.
    Forecast {
        #[arg(long, value_enum)]
        pathway: PathwayArg,
        #[arg(long, value_delimiter = ',')]
        horizons: Option<Vec<u32>>,
    },
    /// Predict intensity on the test split and write reports.
    Evaluate,
    /// Spectral clustering of training windows.
    Cluster,
    /// Nearest training windows for each test storm.
    Analogs,
    /// Every stage in order.
    Run,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum What {
    Pca,
    Var,
    Imagedyn,
    Gam,
    Lasso,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum PathwayArg {
    A,
    B,
    Persistence,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.synth.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<Value> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(Error::InvalidArgument("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    let cfg = load_config(cli)?;
    let ws = Workspace::new(&cfg.out);
    match &cli.command {
        Command::Run => run_pipeline(&cfg),
        Command::Synth => stage("synth", || stage_synth(&cfg, &ws)),
        Command::Ingest => stage("ingest", || stage_ingest(&cfg, &ws)),
        Command::Extract => stage("orb", || stage_extract(&cfg, &ws)),
        Command::Fit { what } => {
            let (name, target) = match what {
                What::Pca => ("latent", FitTarget::Pca),
                What::Var => ("structfc", FitTarget::Var),
                What::Imagedyn => ("structfc", FitTarget::ImageDynamics),
                What::Gam => ("intensity", FitTarget::Gam),
                What::Lasso => ("intensity", FitTarget::Lasso),
            };
            stage(name, || stage_fit(&cfg, &ws, target))
        }
        Command::Forecast { pathway, horizons } => {
            let p = match pathway {
                PathwayArg::A => Pathway::A,
                PathwayArg::B => Pathway::B,
                PathwayArg::Persistence => Pathway::Persistence,
            };
            let h = horizons.clone().unwrap_or_else(|| cfg.horizons.clone());
            stage("structfc", || stage_forecast(&cfg, &ws, p, &h))
        }
        Command::Evaluate => stage("metrics", || stage_evaluate(&cfg, &ws)),
        Command::Cluster => stage("analogs", || stage_cluster(&cfg, &ws)),
        Command::Analogs => stage("analogs", || stage_analogs(&cfg, &ws)),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(if e.is_data_error() { 2 } else { 1 })
        }
    }
}
