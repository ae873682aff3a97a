//! Shared plumbing for the command-line tools.

pub mod admin;

use std::net::{SocketAddr, ToSocketAddrs};

use clap::Args;
use tracing_subscriber::EnvFilter;

/// Port assumed when a proxy is given without one.
pub const SIP_PORT: u16 = 5060;

/// Flags every binary accepts.
#[derive(Debug, Clone, Args)]
pub struct LogArgs {
    /// error, warn, info, debug or trace.
    #[arg(long, default_value = "info")]
    pub log_level: String,
    /// Print one line per SIP message sent or received.
    #[arg(long)]
    pub trace_sip: bool,
}

impl LogArgs {
    pub fn filter(&self) -> String {
        let sip = if self.trace_sip { "info" } else { "off" };
        format!("{},sip={sip}", self.log_level)
    }

    /// Installs the global subscriber; logs go to stderr.
    pub fn init(&self) {
        let filter = EnvFilter::try_new(self.filter()).unwrap_or_else(|_| EnvFilter::new("info"));
        let _ = tracing_subscriber::fmt()
            .with_env_filter(filter)
            .with_writer(std::io::stderr)
            .with_target(true)
            .try_init();
    }
}

/// Resolves the proxy argument of `register`: `host`, `host:port` or an
/// IP literal. The first IPv4 answer wins.
pub fn resolve_proxy(arg: &str) -> Result<SocketAddr, String> {
    if let Ok(a) = arg.parse::<SocketAddr>() {
        return Ok(a);
    }
    let with_port = if arg.rsplit_once(':').is_some_and(|(_, p)| p.parse::<u16>().is_ok()) {
        arg.to_string()
    } else {
        format!("{arg}:{SIP_PORT}")
    };
    let addrs: Vec<SocketAddr> = with_port
        .to_socket_addrs()
        .map_err(|e| format!("cannot resolve {arg}: {e}"))?
        .collect();
    addrs
        .iter()
        .find(|a| a.is_ipv4())
        .or(addrs.first())
        .copied()
        .ok_or_else(|| format!("{arg} has no address"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn proxy_addresses() {
        assert_eq!(
            resolve_proxy("127.0.0.9:5070").unwrap(),
            "127.0.0.9:5070".parse().unwrap()
        );
        assert_eq!(resolve_proxy("127.0.0.9").unwrap(), "127.0.0.9:5060".parse().unwrap());
        assert_eq!(resolve_proxy("localhost:5061").unwrap().port(), 5061);
        assert!(resolve_proxy("no such host").is_err());
    }

    #[test]
    fn sip_trace_is_its_own_target() {
        let quiet = LogArgs {
            log_level: "warn".into(),
            trace_sip: false,
        };
        assert_eq!(quiet.filter(), "warn,sip=off");
        let loud = LogArgs {
            trace_sip: true,
            ..quiet
        };
        assert!(EnvFilter::try_new(loud.filter()).is_ok());
    }
}
