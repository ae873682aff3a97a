//! Runs a scenario file and prints its report.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ipts_cli::LogArgs;
use ipts_harness::{run_file, RunOptions};

#[derive(Parser)]
#[command(name = "ipts-harness", about = "Scenario runner for end-to-end call tests")]
struct Cli {
    #[command(flatten)]
    log: LogArgs,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario file.
    Run {
        file: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Percentage of datagrams to drop, overriding the file.
        #[arg(long)]
        loss: Option<f64>,
        /// Directory for the packet capture, ladders and report.
        #[arg(long)]
        capture: Option<PathBuf>,
        /// Loopback host offset, so concurrent runs do not collide.
        #[arg(long, default_value_t = 1)]
        net: u8,
        /// Rewrite golden ladders from this run.
        #[arg(long)]
        bless: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    cli.log.init();
    let Cmd::Run {
        file,
        seed,
        loss,
        capture,
        net,
        bless,
    } = cli.cmd;
    if let Some(p) = loss {
        if !(0.0..=100.0).contains(&p) {
            eprintln!("--loss must be within 0-100");
            return ExitCode::from(1);
        }
    }
    let opts = RunOptions {
        seed,
        loss_pct: loss,
        capture_dir: capture,
        net_base: net,
        bless: bless || RunOptions::default().bless,
        ..RunOptions::default()
    };
    match run_file(&file, &opts) {
        Ok(report) => {
            print!("{}", report.render());
            if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("{}: {e}", file.display());
            ExitCode::from(2)
        }
    }
}
