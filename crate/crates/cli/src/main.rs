use std::ffi::OsString;
use std::process::ExitCode;

use clap::{CommandFactory, Parser};
use pdl_core::PdlError;

mod commands;
mod config;

use commands::{Cli, Command};

fn parse_args() -> Result<Cli, PdlError> {
    let mut args: Vec<OsString> = std::env::args_os().collect();
    if let Some(path) = config::find_path(&args) {
        let text = std::fs::read_to_string(&path)?;
        let entries = config::parse(&text)?;
        let sub_name = args
            .get(1)
            .map(|a| a.to_string_lossy().into_owned())
            .unwrap_or_default();
        let root = Cli::command();
        let sub = root
            .find_subcommand(&sub_name)
            .ok_or_else(|| PdlError::Config(format!("--config needs a subcommand, got `{sub_name}`")))?;
        let flags = config::to_flags(sub, &entries)?;
        args.splice(2..2, flags);
    }
    match Cli::try_parse_from(args) {
        Ok(cli) => Ok(cli),
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            std::process::exit(0);
        }
        Err(e) => {
            let msg = e.to_string();
            Err(PdlError::Config(
                msg.trim_start_matches("error: ").trim_end().to_string(),
            ))
        }
    }
}

fn run() -> Result<(), PdlError> {
    let cli = parse_args()?;
    if let Some(n) = cli.command.threads() {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| PdlError::Config(format!("--threads: {e}")))?;
    }
    match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Cluster(a) => commands::cluster(a),
        Command::Extract(a) => commands::extract(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
