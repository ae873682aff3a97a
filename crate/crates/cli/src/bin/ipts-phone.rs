//! Interactive softphone. Reads commands from stdin, one per line, and
//! prints what happens on stdout.

use std::io::{self, BufRead, Write};
use std::net::SocketAddr;
use std::process::ExitCode;
use std::thread;

use clap::Parser;
use crossbeam_channel::unbounded;
use ipts_cli::{resolve_proxy, LogArgs};
use ipts_core::clock;
use ipts_core::ua::{Phone, PhoneConfig, SoftphoneCommand};

const HELP: &str = "commands: register <ext> <pass> <proxy[:port]> | call <digits> | answer | hold | unhold | \
dtmf <d> | transfer <ext> | forward <ext>|off | hangup | status | help | quit";

#[derive(Parser)]
#[command(name = "ipts-phone", about = "Command-line softphone")]
struct Cli {
    /// Local SIP address.
    #[arg(long, default_value = "127.0.0.1:5070")]
    bind: SocketAddr,
    /// Frequency of the test tone sent as our voice.
    #[arg(long, default_value_t = 440.0)]
    tone: f64,
    #[arg(long, default_value = "pbx")]
    domain: String,
    /// Refuse unanswered calls after this many seconds; 0 rings forever.
    #[arg(long, default_value_t = 0)]
    ring_timeout: u32,
    #[command(flatten)]
    log: LogArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    cli.log.init();
    let (notify, lines) = unbounded::<String>();
    let mut cfg = PhoneConfig::new("phone", cli.bind);
    cfg.tone_hz = cli.tone;
    cfg.domain = cli.domain;
    cfg.ring_timeout_s = cli.ring_timeout;
    cfg.notify = Some(notify);
    let phone = match Phone::start(cfg, clock::system()) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("cannot bind {}: {e}", cli.bind);
            return ExitCode::from(2);
        }
    };
    thread::spawn(move || {
        for l in lines {
            println!("* {l}");
        }
    });
    println!("softphone on {}; type help", phone.sip_addr());
    let stdin = io::stdin();
    for line in stdin.lock().lines() {
        let Ok(line) = line else { break };
        let line = line.trim();
        match line {
            "" => continue,
            "help" => println!("{HELP}"),
            "status" => println!("{:?}", phone.shared().state()),
            _ => match SoftphoneCommand::parse(line) {
                Ok(cmd) => {
                    let quit = cmd == SoftphoneCommand::Quit;
                    let proxy = match &cmd {
                        SoftphoneCommand::Register { proxy, .. } => match resolve_proxy(proxy) {
                            Ok(a) => Some(a),
                            Err(e) => {
                                println!("error: {e}");
                                continue;
                            }
                        },
                        _ => None,
                    };
                    if let Err(e) = phone.command(cmd, proxy) {
                        println!("error: {e}");
                    }
                    if quit {
                        break;
                    }
                }
                Err(e) => println!("error: {e}"),
            },
        }
        let _ = io::stdout().flush();
    }
    phone.stop();
    ExitCode::SUCCESS
}
