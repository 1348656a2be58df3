use std::path::PathBuf;
use std::process::ExitCode;

use bevmine_cli::{commands, CliError, Overrides, RunConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bevmine", version, about = "Synthetic pseudo-label mining and gradient-projection experiments")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    theta_c: Option<f64>,
    #[arg(long, global = true)]
    theta_u: Option<f64>,
    #[arg(long, global = true)]
    theta_h: Option<f64>,
    #[arg(long, global = true)]
    t_max: Option<usize>,
    /// Base scene seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a batch of synthetic scenes as JSONL.
    Generate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Mine pseudo-labels for every scene in a scene file.
    Mine {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Score a mining report against its scene file.
    Eval {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the toy gradient-projection experiment.
    Dgp {
        #[arg(long)]
        out: PathBuf,
    },
    /// generate, mine, eval and dgp into one output directory.
    Pipeline {
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
}

fn load_config(g: &GlobalArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &g.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        theta_c: g.theta_c,
        theta_u: g.theta_u,
        theta_h: g.theta_h,
        t_max: g.t_max,
        seed: g.seed,
    });
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = load_config(&cli.global)?;
    match cli.command {
        Command::Generate { out } => {
            commands::cmd_generate(&cfg, &out)?;
        }
        Command::Mine { scenes, report } => {
            commands::cmd_mine(&scenes, &cfg, &report)?;
        }
        Command::Eval { scenes, report, out } => {
            commands::cmd_eval(&scenes, &report, &out, cfg.good_threshold)?;
        }
        Command::Dgp { out } => {
            commands::cmd_dgp(&cfg, &out)?;
        }
        Command::Pipeline { output_dir } => {
            if let Some(dir) = output_dir {
                cfg.output_dir = dir;
            }
            commands::cmd_pipeline(&cfg)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.render().to_string().trim_end().to_string();
            eprintln!("{}", CliError::Usage(message).to_json());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
