mod cli;
mod config;
mod measure;
mod report;
mod sweep;

use std::fs::File;
use std::io::{self, Write};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{CommandFactory, Parser};

use cli::{Cli, Command, RunArgs, SweepArgs};
use config::{Family, RunConfig};
use measure::Failure;
use report::{IterRow, Summary};

const EXIT_VERIFY: u8 = 1;
const EXIT_DEADLOCK: u8 = 3;
const EXIT_RUNTIME: u8 = 4;

/// Prints `msg` with the usage line and exits with status 2.
fn usage_error(msg: &str) -> ! {
    Cli::command().error(ErrorKind::ValueValidation, msg).exit()
}

fn failure_exit(f: Failure) -> ExitCode {
    match f {
        Failure::Setup(m) => usage_error(&m),
        Failure::Deadlock(m) => {
            eprintln!("error: deadlock detected: {m}");
            ExitCode::from(EXIT_DEADLOCK)
        }
        Failure::Runtime(m) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn run(args: &RunArgs) -> ExitCode {
    let (cfg, defaults) = match RunConfig::from_run_args(args) {
        Ok(c) => c,
        Err(e) => usage_error(&e),
    };
    if args.common.dry_run {
        println!("{cfg}");
        if args.common.preset.is_some() {
            let grid = match cfg.shape.family() {
                Family::AgGemm => format!("M grid       {:?}", defaults.ms),
                Family::FlashDecode => format!("kv_len grid  {:?}", defaults.kv_lens),
            };
            println!("{grid}");
        }
        return ExitCode::SUCCESS;
    }
    let pattern = cfg.pattern.expect("resolution requires a pattern outside dry runs");

    let mut csv = match &args.out {
        Some(path) => match csv::Writer::from_path(path) {
            Ok(w) => Some(w),
            Err(e) => {
                eprintln!("error: {}: {e}", path.display());
                return ExitCode::from(EXIT_RUNTIME);
            }
        },
        None => None,
    };
    let samples = measure::measure(&cfg, pattern, |s| {
        if let Some(w) = csv.as_mut() {
            w.serialize(IterRow::new(&cfg, pattern, s))?;
        }
        Ok(())
    });
    if let Some(w) = csv.as_mut() {
        if let Err(e) = w.flush() {
            eprintln!("error: writing CSV: {e}");
            return ExitCode::from(EXIT_RUNTIME);
        }
    }
    let samples = match samples {
        Ok(s) => s,
        Err(f) => return failure_exit(f),
    };

    let summary = Summary::new(&cfg, pattern, &samples);
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    let written = match &args.summary {
        Some(path) => File::create(path).and_then(|mut f| writeln!(f, "{json}")),
        None => writeln!(io::stdout(), "{json}"),
    };
    if let Err(e) = written {
        eprintln!("error: writing summary: {e}");
        return ExitCode::from(EXIT_RUNTIME);
    }

    if summary.verified == Some(false) {
        eprintln!(
            "error: verification failed at iteration {}: max relative error {:.3e}",
            samples.len() - 1,
            summary.max_err.unwrap_or(f64::NAN)
        );
        return ExitCode::from(EXIT_VERIFY);
    }
    ExitCode::SUCCESS
}

fn run_sweep(args: &SweepArgs) -> ExitCode {
    let cells = match sweep::cells(args) {
        Ok(c) => c,
        Err(e) => usage_error(&e),
    };
    if args.common.dry_run {
        for (i, c) in cells.iter().enumerate() {
            let p = c.pattern.map_or("?", |p| p.name());
            println!("cell {i}: {p} W={} {:?}", c.world_size, c.shape);
        }
        return ExitCode::SUCCESS;
    }
    let rows = match sweep::run_sweep(args, &cells) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_RUNTIME);
        }
    };
    let bad: Vec<_> = rows
        .iter()
        .filter(|r| r.status != "ok" || (args.common.verify && r.verified != Some(true)))
        .collect();
    if bad.is_empty() {
        ExitCode::SUCCESS
    } else {
        for r in &bad {
            eprintln!(
                "cell {} ({}) {}: {}",
                r.cell,
                r.pattern,
                r.status,
                r.error.as_deref().unwrap_or("not verified")
            );
        }
        ExitCode::from(EXIT_VERIFY)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match &cli.command {
        Some(Command::Sweep(args)) => run_sweep(args),
        None => run(&cli.run),
    }
}
