mod cli;
mod commands;
mod manifest;
mod plotdata;

use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use serde_json::json;

use cli::{Cli, Command};
use commands::Ctx;

fn run(cli: Cli) -> tunevec_core::Result<()> {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(tunevec_core::Error::InvalidArgument("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| tunevec_core::Error::InvalidArgument(format!("thread pool: {e}")))?;
    }
    let ctx = Ctx {
        global: cli.global,
        started: Instant::now(),
    };
    match cli.command {
        Command::Diff(a) => commands::diff(&ctx, a),
        Command::Apply(a) => commands::apply_cmd(&ctx, a),
        Command::Merge(a) => commands::merge(&ctx, a),
        Command::Cosine(a) => commands::cosine_cmd(&ctx, a),
        Command::Wsim(a) => commands::wsim(&ctx, a),
        Command::Ssa(a) => commands::ssa(&ctx, a),
        Command::Profile(a) => commands::profile_cmd(&ctx, a),
        Command::Editdist(a) => commands::editdist(&ctx, a),
        Command::Ablate(a) => commands::ablate(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::Report(a) => commands::report(&ctx, a),
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = json!({"error": {"kind": e.kind(), "message": e.to_string()}});
            eprintln!("{body}");
            ExitCode::from(1)
        }
    }
}
