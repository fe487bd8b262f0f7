use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use asyncbezier::model::ModelSpec;
use asyncbezier_cli::{cmd_epoch_study, cmd_profile, cmd_run, CliError, ExperimentConfig, RunOptions, OUT_ENV};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "asyncbezier", version, about = "Asynchronous federated training experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every strategy x seed cell of a config.
    Run(RunArgs),
    /// Rerun a config at each local epoch count.
    EpochStudy(RunArgs),
    /// Loss along a stored curve and along its chord.
    Profile(ProfileArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory [default: config `output_dir`, else `results`].
    #[arg(long, env = OUT_ENV)]
    out: Option<PathBuf>,
    /// Comma-separated seeds replacing the configured ones.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Write per-run JSONL event logs.
    #[arg(long)]
    events: bool,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Logistic,
    Mlp1,
}

#[derive(Args)]
struct ProfileArgs {
    /// Curve file with rows A, B, C.
    #[arg(long)]
    curve: PathBuf,
    /// Dataset CSV with a `label` column first.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "logistic")]
    model: ModelArg,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    classes: usize,
    #[arg(long)]
    features: usize,
    #[arg(long, default_value_t = 21)]
    points: usize,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn options(a: &RunArgs, cfg: &ExperimentConfig) -> RunOptions {
    RunOptions {
        out: a.out.clone().or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| "results".into()),
        seeds: a.seeds.clone(),
        events: a.events,
        workers: a.workers,
    }
}

fn profile(a: &ProfileArgs) -> Result<(), CliError> {
    let spec = match (a.model, a.hidden) {
        (ModelArg::Logistic, None) => ModelSpec::logistic(a.features, a.classes),
        (ModelArg::Mlp1, Some(h)) => ModelSpec::mlp1(a.features, h, a.classes),
        (ModelArg::Logistic, Some(_)) => return Err(CliError::Config("--hidden does not apply to logistic".into())),
        (ModelArg::Mlp1, None) => return Err(CliError::Config("--hidden is required for mlp1".into())),
    };
    match &a.out {
        Some(p) => {
            let f = std::fs::File::create(p).map_err(|source| CliError::Io { path: p.clone(), source })?;
            cmd_profile(&a.curve, &a.data, &spec, a.points, std::io::BufWriter::new(f))
        }
        None => cmd_profile(&a.curve, &a.data, &spec, a.points, std::io::stdout().lock()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Run(a) | Cmd::EpochStudy(a) => ExperimentConfig::from_path(&a.config).and_then(|cfg| {
            let opts = options(a, &cfg);
            let report =
                if matches!(cli.cmd, Cmd::Run(_)) { cmd_run(&cfg, &opts) } else { cmd_epoch_study(&cfg, &opts) }?;
            for d in report.diverged() {
                log::error!("diverged: {d}");
            }
            println!("{}", report.summary_path.display());
            Ok(report.exit_code())
        }),
        Cmd::Profile(a) => profile(a).map(|()| 0),
    };
    let _ = std::io::stdout().flush();
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
