use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nlrb::config::{RunConfig, WORKDIR_ENV};
use nlrb::pipeline::{self, AdaptTarget, Baseline, InitChoice};
use nlrb::CliError;
use serde::Serialize;

/// Nonlinear reduced-basis surrogates: snapshots, POD, offline training,
/// online adaptation, baselines and evaluation.
#[derive(Parser)]
#[command(name = "nlrb", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON configuration file; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration field, e.g. `--set offline.epochs=5000`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Work directory (takes precedence over the config file and $NLRB_WORKDIR).
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    #[arg(long, global = true)]
    kappa: Option<f64>,
    /// Reduced dimension `r`.
    #[arg(long, global = true)]
    r: Option<usize>,
    /// Print progress to stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Sample parameters and evaluate snapshots.
    Snapshots,
    /// Compute the POD basis.
    Pod,
    /// Train the composite model and evaluate it offline.
    Train,
    /// Adapt the reconstruction network online.
    Adapt {
        /// Parameter value `mu1,mu2`; repeat for several.
        #[arg(long, value_name = "MU1,MU2", conflicts_with_all = ["test_set", "worst_decile"])]
        mu: Vec<String>,
        /// Adapt every test sample.
        #[arg(long)]
        test_set: bool,
        /// Adapt the tenth of the test set with the largest offline errors.
        #[arg(long, conflicts_with = "test_set")]
        worst_decile: bool,
        #[arg(long, value_enum, default_value = "warm")]
        init: Init,
    },
    /// Train or evaluate a linear baseline.
    Baseline {
        #[arg(value_enum)]
        which: Which,
    },
    /// Merge result tables and compute aggregates.
    Eval,
    /// Print the effective configuration.
    Config,
}

#[derive(Clone, Copy, ValueEnum)]
enum Init {
    Warm,
    Random,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    Podnn,
    Projection,
}

fn load_config(c: &Common) -> Result<RunConfig, CliError> {
    let mut overrides = Vec::new();
    if let Ok(dir) = std::env::var(WORKDIR_ENV) {
        overrides.push(format!("paths.workdir={}", serde_json::Value::String(dir)));
    }
    overrides.extend(c.overrides.iter().cloned());
    if let Some(k) = c.kappa {
        overrides.push(format!("problem.kappa={k}"));
    }
    if let Some(r) = c.r {
        overrides.push(format!("model.r={r}"));
    }
    if let Some(dir) = &c.workdir {
        overrides.push(format!(
            "paths.workdir={}",
            serde_json::Value::String(dir.to_string_lossy().into_owned())
        ));
    }
    RunConfig::load(c.config.as_deref(), &overrides)
}

fn parse_mu(s: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| CliError::Config(format!("cannot parse parameter '{s}'; expected MU1,MU2")))
}

fn print(value: &impl Serialize) {
    // A closed pipe downstream is not an error worth reporting.
    let _ = writeln!(
        std::io::stdout().lock(),
        "{}",
        serde_json::to_string_pretty(value).expect("summary serializes")
    );
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(&cli.common)?;
    let verbose = cli.common.verbose;
    match cli.command {
        Command::Snapshots => print(&pipeline::cmd_snapshots(&cfg)?),
        Command::Pod => print(&pipeline::cmd_pod(&cfg)?),
        Command::Train => {
            let every = (cfg.offline.epochs / 100).max(1);
            print(&pipeline::cmd_train(&cfg, |epoch, loss| {
                if verbose && epoch % every == 0 {
                    eprintln!("epoch {epoch:>7}  loss {loss:.6e}");
                }
            })?)
        }
        Command::Adapt {
            mu,
            test_set,
            worst_decile,
            init,
        } => {
            let target = if test_set {
                AdaptTarget::TestSet
            } else if worst_decile {
                AdaptTarget::WorstDecile
            } else if mu.is_empty() {
                return Err(CliError::Config("adapt needs --mu, --test-set or --worst-decile".into()));
            } else {
                AdaptTarget::Points(mu.iter().map(|s| parse_mu(s)).collect::<Result<_, _>>()?)
            };
            let init = match init {
                Init::Warm => InitChoice::Warm,
                Init::Random => InitChoice::Random,
                Init::Both => InitChoice::Both,
            };
            print(&pipeline::cmd_adapt(&cfg, &target, init)?)
        }
        Command::Baseline { which } => {
            let which = match which {
                Which::Podnn => Baseline::Podnn,
                Which::Projection => Baseline::Projection,
            };
            print(&pipeline::cmd_baseline(&cfg, which)?)
        }
        Command::Eval => print(&pipeline::cmd_eval(&cfg)?),
        Command::Config => print(&cfg),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
