//! Back-to-back user agent daemon: trunk gateway, voicemail, IVR,
//! conferencing and music on hold.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use ipts_cli::LogArgs;
use ipts_core::b2bua::{load_config, B2buaConfig, B2buaNode};
use ipts_core::clock;
use tracing::error;

#[derive(Parser)]
#[command(name = "iptsb", about = "B2BUA and media server")]
struct Cli {
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    log: LogArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    cli.log.init();
    let cfg = match &cli.config {
        Some(path) => match load_config(path) {
            Ok(c) => c,
            Err(e) => {
                error!("{}: {e}", path.display());
                return ExitCode::from(2);
            }
        },
        None => B2buaConfig::default(),
    };
    match B2buaNode::start(cfg, clock::system(), None, None) {
        Ok(node) => {
            node.wait();
            ExitCode::SUCCESS
        }
        Err(e) => {
            error!("cannot start b2bua: {e}");
            ExitCode::from(2)
        }
    }
}
