mod args;
mod commands;

use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use t3time::{Error, Result};

use args::{Cli, Command};

fn threads_from_env() -> Result<()> {
    let Ok(v) = std::env::var("T3TIME_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("T3TIME_THREADS must be a positive integer, got '{v}'")))?;
    t3time::set_threads(n)
}

fn run(cli: &Cli) -> Result<String> {
    threads_from_env()?;
    match &cli.command {
        Command::Train(a) => commands::train_cmd(a),
        Command::Eval(a) => commands::eval_cmd(a),
        Command::Ablate(a) => commands::ablate_cmd(a),
        Command::EmbInfo { path } => commands::emb_info_cmd(path),
        Command::Synth(a) => commands::synth_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(out) => {
            print!("{out}");
            let _ = std::io::stdout().flush();
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
