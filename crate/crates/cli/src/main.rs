mod args;
mod commands;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use metaforge::Error;

use args::{BenchCommand, CaptureCommand, Cli, Command, DkoCommand, EvalCommand, KernelsCommand};
use commands::Outcome;

fn dispatch(command: &Command) -> metaforge::Result<Outcome> {
    match command {
        Command::Dko(DkoCommand::Optimize(a)) => commands::dko_optimize(a),
        Command::Dko(DkoCommand::RenderPsf(a)) => commands::dko_render_psf(a),
        Command::Kernels(KernelsCommand::Split(a)) => commands::kernels_split(a),
        Command::Capture(CaptureCommand::Simulate(a)) => commands::capture_simulate(a),
        Command::Eval(EvalCommand::Kernels(a)) => commands::eval_kernels(a),
        Command::Eval(EvalCommand::Depth(a)) => commands::eval_depth(a),
        Command::Bench(BenchCommand::Accounting(a)) => commands::bench_accounting(a),
        Command::Bench(BenchCommand::Steps(a)) => commands::bench_steps(a),
        Command::Selftest(a) => commands::selftest(a),
    }
}

fn report_error(err: &Error) -> ExitCode {
    let category = err.category();
    eprintln!("error[{}]: {err}", category.as_str());
    ExitCode::from(category.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => match e.kind() {
            ErrorKind::DisplayHelp
            | ErrorKind::DisplayVersion
            | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                let _ = e.print();
                return if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                    ExitCode::from(1)
                } else {
                    ExitCode::SUCCESS
                };
            }
            _ => {
                let rendered = e.render().to_string();
                let body = rendered.strip_prefix("error: ").unwrap_or(&rendered);
                eprint!("error[validation]: {body}");
                return ExitCode::from(1);
            }
        },
    };

    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    match dispatch(&cli.command) {
        Ok(outcome) => {
            if cli.json {
                match serde_json::to_string_pretty(&outcome.report) {
                    Ok(text) => println!("{text}"),
                    Err(e) => return report_error(&Error::Numeric(e.to_string())),
                }
            } else {
                print!("{}", outcome.summary);
                println!("report: {}", outcome.report_path.display());
            }
            ExitCode::from(outcome.exit_code as u8)
        }
        Err(err) => report_error(&err),
    }
}
