use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fisherflow_cli::{resolve, run_with_files, CliError, ConfigError, Experiment, Overrides};

#[derive(Parser)]
#[command(name = "fisherflow", version, about = "Particle-flow variational inference experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its report, metrics and particles.
    Run {
        experiment: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<String>,
        #[arg(long = "gh-degree")]
        gh_degree: Option<usize>,
        #[arg(long)]
        components: Option<usize>,
        #[arg(long)]
        horizon: Option<f64>,
        #[arg(long)]
        dim: Option<usize>,
    },
    /// Print the fully resolved config, or the first error in it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn read_config(path: Option<&PathBuf>) -> Result<String, CliError> {
    match path {
        None => Ok(String::new()),
        Some(p) => std::fs::read_to_string(p).map_err(|e| {
            CliError::Config(ConfigError {
                key: String::new(),
                line: None,
                message: format!("cannot read {}: {e}", p.display()),
            })
        }),
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("FISHERFLOW_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().ok().filter(|n| *n > 0).ok_or_else(|| {
        CliError::Config(ConfigError {
            key: "FISHERFLOW_THREADS".into(),
            line: None,
            message: format!("expected a positive integer, got `{v}`"),
        })
    })?;
    // fails only if a pool already exists, which cannot happen this early
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn execute(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Run {
            experiment,
            config,
            seed,
            out,
            gh_degree,
            components,
            horizon,
            dim,
        } => {
            let text = read_config(config.as_ref())?;
            let flags = Overrides {
                experiment: Some(experiment.parse::<Experiment>()?),
                seed,
                output_dir: out,
                gh_degree,
                components,
                horizon,
                dim,
            };
            let (resolved, output, files) = run_with_files(&text, &flags)?;
            println!("{} finished, config hash {}", resolved.config.experiment, resolved.config_hash());
            for (k, v) in &output.summary {
                println!("  {k} = {v:e}");
            }
            println!("wrote {}", files.dir.display());
            Ok(())
        }
        Command::Validate { config } => {
            let text = read_config(Some(&config))?;
            let resolved = resolve(&text, &Overrides::default())?;
            println!("{}", serde_json::to_string_pretty(&resolved.echo()).expect("echo serializes"));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
