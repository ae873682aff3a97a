//! Proxy and registrar daemon.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use ipts_cli::LogArgs;
use ipts_core::clock;
use ipts_core::proxy::{load_config, ProxyConfig, ProxyNode};
use tracing::error;

#[derive(Parser)]
#[command(name = "iptsd", about = "SIP proxy and registrar")]
struct Cli {
    /// INI file; built-in defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `[server] bind`.
    #[arg(long)]
    bind: Option<SocketAddr>,
    #[command(flatten)]
    log: LogArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    cli.log.init();
    let mut cfg = match &cli.config {
        Some(path) => match load_config(path) {
            Ok(c) => c,
            Err(e) => {
                error!("{}: {e}", path.display());
                return ExitCode::from(2);
            }
        },
        None => ProxyConfig::default(),
    };
    if let Some(b) = cli.bind {
        cfg.bind = b;
    }
    match ProxyNode::start(cfg, clock::system(), None, None) {
        Ok(node) => {
            node.wait();
            ExitCode::SUCCESS
        }
        Err(e) => {
            error!("cannot start proxy: {e}");
            ExitCode::from(2)
        }
    }
}
