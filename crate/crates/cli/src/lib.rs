//! Operator entry point: scenario runs, an interactive terminal session,
//! the HTTP session service, and memory/timeline inspection.
//!
//! Exit codes are the same for every subcommand: 0 success, 1 runtime
//! failure, 2 usage or configuration error.

pub mod api;
pub mod commands;
pub mod roster;
pub mod serve;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use polyphony_core::error::{ConfigError, Error, GatewayError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Why a command stopped. The variant decides the exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Runtime(_) => EXIT_RUNTIME,
        }
    }

    pub fn usage(m: impl fmt::Display) -> Self {
        Failure::Usage(m.to_string())
    }

    pub fn runtime(m: impl fmt::Display) -> Self {
        Failure::Runtime(m.to_string())
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(c) => c.into(),
            Error::Gateway(GatewayError::Config(m)) => Failure::Usage(format!("provider configuration: {m}")),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "polyphony", version, about = "Multi-agent conversational orchestration runtime")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a scenario and write timeline, transcript and metrics.
    Run(RunArgs),
    /// Talk to the agent group from the terminal.
    Repl(ReplArgs),
    /// Serve the session API over HTTP.
    Serve(ServeArgs),
    /// Inspect or purge persisted long-term memory.
    Memctl(MemctlArgs),
    /// Pretty-print a recorded timeline.
    Replay(ReplayArgs),
    /// List the built-in experimental conditions.
    Conditions(ConditionsArgs),
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("scenario").required(true).args(["config", "condition", "all"])))]
pub struct RunArgs {
    /// Scenario config file (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in condition or scenario id, e.g. `coordination_off`.
    #[arg(long)]
    pub condition: Option<String>,
    /// Run every built-in scenario, each in its own process.
    #[arg(long)]
    pub all: bool,
    /// Artifact directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Write every planner prompt and schema here.
    #[arg(long, value_name = "DIR")]
    pub dump_prompts: Option<PathBuf>,
    /// Persist long-term memory here instead of in process memory.
    #[arg(long, value_name = "DIR")]
    pub data_dir: Option<PathBuf>,
    /// Provider config (JSON) replacing the scenario's mock fixture.
    #[arg(long, value_name = "FILE")]
    pub provider: Option<PathBuf>,
    /// Print the metrics report as JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

/// Where the roster and the model provider come from.
#[derive(Debug, Clone, Args)]
pub struct LiveArgs {
    /// Roster config file, or `builtin:<scenario id>`.
    #[arg(long, default_value = "builtin:coordination_on")]
    pub agents: String,
    /// Provider config (JSON). Without it, `POLYPHONY_PROVIDER` is consulted,
    /// then the roster's mock fixture.
    #[arg(long, value_name = "FILE")]
    pub provider: Option<PathBuf>,
    /// Persist long-term memory here instead of in process memory.
    #[arg(long, value_name = "DIR")]
    pub data_dir: Option<PathBuf>,
    /// Drive an agent's robot over the wire protocol: `AGENT=HOST:PORT`.
    #[arg(long = "robot", value_name = "AGENT=ADDR")]
    pub robots: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ReplArgs {
    #[command(flatten)]
    pub live: LiveArgs,
    /// Artifact directory written on `/quit`.
    #[arg(long, default_value = "polyphony-repl")]
    pub out: PathBuf,
    #[arg(long, default_value = "repl")]
    pub session: String,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub live: LiveArgs,
    #[arg(long, default_value_t = 8750)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Per-session logs and artifacts, flushed on shutdown.
    #[arg(long, value_name = "DIR")]
    pub log_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MemctlArgs {
    #[arg(long, value_name = "DIR")]
    pub data_dir: PathBuf,
    /// Embedding dimension the store was written with.
    #[arg(long, default_value_t = polyphony_core::memory::embed::STUB_DIMENSION)]
    pub dimension: usize,
    #[command(subcommand)]
    pub action: MemctlAction,
}

#[derive(Debug, Subcommand)]
pub enum MemctlAction {
    /// Namespaces with record counts.
    List,
    /// Record count of one namespace.
    Count { namespace: String },
    /// Print a namespace's records.
    Dump {
        namespace: String,
        #[arg(long, value_parser = ["semantic", "episodic"])]
        tier: Option<String>,
        /// One JSON record per line, embeddings included.
        #[arg(long)]
        json: bool,
    },
    /// Delete every record of a namespace.
    Purge {
        namespace: String,
        /// Required: confirms the deletion.
        #[arg(long)]
        yes: bool,
    },
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub timeline: PathBuf,
    /// Only this session.
    #[arg(long)]
    pub session: Option<String>,
}

#[derive(Debug, Args)]
pub struct ConditionsArgs {
    /// Print one scenario's full config as JSON.
    #[arg(long, value_name = "ID")]
    pub show: Option<String>,
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {f}");
            f.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run(a) => commands::run(&a),
        Command::Repl(a) => {
            let stdin = std::io::stdin();
            commands::repl(&a, stdin.lock(), std::io::stdout())
        }
        Command::Serve(a) => serve::serve(&a),
        Command::Memctl(a) => commands::memctl(&a, &mut std::io::stdout()),
        Command::Replay(a) => commands::replay(&a, &mut std::io::stdout()),
        Command::Conditions(a) => commands::conditions(&a, &mut std::io::stdout()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(main_with(["polyphony", "dance"]), EXIT_USAGE);
        assert_eq!(main_with(["polyphony", "run", "--condition", "x", "--out", "o", "--bogus"]), EXIT_USAGE);
        // --config and --condition are mutually exclusive.
        assert_eq!(main_with(["polyphony", "run", "--config", "a", "--condition", "b", "--out", "o"]), EXIT_USAGE);
        assert_eq!(main_with(["polyphony", "run", "--out", "o"]), EXIT_USAGE);
    }

    #[test]
    fn config_errors_map_to_usage() {
        let f: Failure = Error::Config(ConfigError::field("agents", "bad")).into();
        assert_eq!(f.exit_code(), EXIT_USAGE);
        let f: Failure = Error::Gateway(GatewayError::ProviderTimeout { attempts: 3 }).into();
        assert_eq!(f.exit_code(), EXIT_RUNTIME);
    }
}
