//! `oxyfield` command-line tool.

mod commands;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "oxyfield", version, about = "Hyperspectral tissue oxygenation pipeline")]
struct Cli {
    /// Emit reports and errors as JSON.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a phantom into a raw frame recording.
    Simulate(commands::SimulateArgs),
    /// Process a recording or a single raw frame.
    Process(commands::ProcessArgs),
    /// Time the per-stage pipeline on a simulated frame.
    Bench(commands::BenchArgs),
    /// Stream a scenario or recording to WebSocket viewers.
    Serve(commands::ServeArgs),
    /// Calibration utilities.
    Calib {
        #[command(subcommand)]
        action: CalibCmd,
    },
    /// Reference library utilities.
    Library {
        #[command(subcommand)]
        action: LibraryCmd,
    },
}

#[derive(Subcommand)]
enum CalibCmd {
    /// Write a synthetic calibration for a camera profile.
    Gen(commands::CalibGenArgs),
}

#[derive(Subcommand)]
enum LibraryCmd {
    /// Write a synthetic reference library.
    Gen(commands::LibraryGenArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ProfileName {
    S5,
    X20,
}

impl ProfileName {
    pub fn as_str(self) -> &'static str {
        match self {
            ProfileName::S5 => "s5",
            ProfileName::X20 => "x20",
        }
    }
}

#[derive(Args, Clone, Copy, Debug)]
pub struct ProfileArg {
    /// Camera profile.
    #[arg(long, value_enum, default_value = "s5")]
    pub profile: ProfileName,
}

/// Bad flag combinations detected after parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_INTERNAL: u8 = 4;

fn classify(err: &anyhow::Error) -> (u8, &'static str) {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return (EXIT_USAGE, "usage");
        }
        if cause.is::<oxyfield::Error>() || cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return (EXIT_DATA, "data");
        }
        if let Some(e) = cause.downcast_ref::<oxyfield_service::ServiceError>() {
            if matches!(e, oxyfield_service::ServiceError::Pipeline(_) | oxyfield_service::ServiceError::Io(_)) {
                return (EXIT_DATA, "data");
            }
        }
    }
    (EXIT_INTERNAL, "internal")
}

fn report_error(json: bool, code: u8, kind: &str, message: &str) {
    let message = message.replace(['\n', '\r'], " ");
    if json {
        let v = serde_json::json!({"error": {"code": code, "kind": kind, "message": message}});
        eprintln!("{v}");
    } else {
        eprintln!("error[{code}] {kind}: {message}");
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let json_requested = std::env::args().any(|a| a == "--json");
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            let first = rendered.lines().next().unwrap_or("invalid arguments");
            report_error(json_requested, EXIT_USAGE, "usage", first.trim_start_matches("error: "));
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let json = cli.json;
    let result = match cli.command {
        Cmd::Simulate(a) => commands::simulate(a, json),
        Cmd::Process(a) => commands::process(a, json),
        Cmd::Bench(a) => commands::bench(a, json),
        Cmd::Serve(a) => commands::serve(a, json),
        Cmd::Calib { action: CalibCmd::Gen(a) } => commands::calib_gen(a, json),
        Cmd::Library { action: LibraryCmd::Gen(a) } => commands::library_gen(a, json),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = classify(&e);
            report_error(json, code, kind, &format!("{e:#}"));
            ExitCode::from(code)
        }
    }
}
