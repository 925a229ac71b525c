use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use seu_cli::commands::{self, CliError, Overrides};
use seu_cli::config::Format;

#[derive(Parser)]
#[command(
    name = "seu",
    version,
    about = "Sequential estimation-adjusted urn designs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one trial (trajectory) or an ensemble of replications.
    Simulate(Common),
    /// Print limiting proportions, eigenvalues and CLT covariances as JSON.
    Asymptotics(Common),
    /// Tabulate several designs under one response model.
    Compare(Common),
    /// Check the regularity conditions of a design.
    Validate(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Existing directory for output files.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    #[arg(long)]
    replications: Option<u64>,
    #[arg(long)]
    horizon: Option<u64>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            format: self.format.map(|f| match f {
                FormatArg::Csv => Format::Csv,
                FormatArg::Json => Format::Json,
            }),
            replications: self.replications,
            horizon: self.horizon,
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let threads = commands::threads_from_env()?;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match &cli.command {
        Command::Simulate(c) => commands::simulate(
            &commands::load(&c.config, &c.overrides())?,
            threads,
            &mut out,
        ),
        Command::Asymptotics(c) => {
            commands::asymptotics(&commands::load(&c.config, &c.overrides())?, &mut out)
        }
        Command::Compare(c) => commands::compare(
            &commands::load(&c.config, &c.overrides())?,
            threads,
            &mut out,
        ),
        Command::Validate(c) => {
            commands::validate(&commands::load(&c.config, &c.overrides())?, &mut out)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
