//! Subscriber, CDR and voicemail administration.
//!
//! Exit status: 0 on success, 1 for operator errors such as a duplicate or
//! unknown extension, 2 for I/O and corrupt files.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ipts_cli::admin::{self, AdminError, AdminPaths};
use ipts_cli::LogArgs;

#[derive(Parser)]
#[command(name = "ipts-admin", about = "Manage subscribers and inspect records")]
struct Cli {
    /// Proxy INI file; supplies the users file, CDR file and realm.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    users: Option<PathBuf>,
    #[arg(long)]
    cdr: Option<PathBuf>,
    #[arg(long, default_value = "voicemail")]
    vm_dir: PathBuf,
    /// Digest realm used to hash new passwords.
    #[arg(long)]
    realm: Option<String>,
    #[command(flatten)]
    log: LogArgs,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    #[command(subcommand)]
    User(UserCmd),
    #[command(subcommand)]
    Cdr(CdrCmd),
    #[command(subcommand)]
    Vm(VmCmd),
}

#[derive(Subcommand)]
enum UserCmd {
    /// user add <ext> <name> <pass> <internal|external>
    Add {
        ext: String,
        name: String,
        pass: String,
        privilege: String,
    },
    Del {
        ext: String,
    },
    List,
}

#[derive(Subcommand)]
enum CdrCmd {
    List {
        /// Only calls that started at or after this Unix time in ms.
        #[arg(long)]
        since: Option<u64>,
    },
}

#[derive(Subcommand)]
enum VmCmd {
    List { ext: String },
}

fn paths(cli: &Cli) -> Result<AdminPaths, AdminError> {
    let mut p = match &cli.config {
        Some(path) => {
            let cfg = ipts_core::proxy::load_config(path).map_err(|e| AdminError::Malformed {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            AdminPaths::from_proxy(&cfg, cli.vm_dir.clone())
        }
        None => AdminPaths {
            vm_dir: cli.vm_dir.clone(),
            ..AdminPaths::default()
        },
    };
    if let Some(u) = &cli.users {
        p.users = u.clone();
    }
    if let Some(c) = &cli.cdr {
        p.cdr = c.clone();
    }
    if let Some(r) = &cli.realm {
        p.realm = r.clone();
    }
    Ok(p)
}

fn run(cli: &Cli) -> Result<String, AdminError> {
    let p = paths(cli)?;
    Ok(match &cli.cmd {
        Cmd::User(UserCmd::Add {
            ext,
            name,
            pass,
            privilege,
        }) => {
            let s = admin::user_add(&p, ext, name, pass, privilege)?;
            format!("added {} ({})\n", s.extension, s.privilege.as_str())
        }
        Cmd::User(UserCmd::Del { ext }) => {
            admin::user_del(&p, ext)?;
            format!("removed {ext}\n")
        }
        Cmd::User(UserCmd::List) => admin::render_users(&admin::user_list(&p)?),
        Cmd::Cdr(CdrCmd::List { since }) => admin::render_cdrs(&admin::cdr_list(&p, *since)?),
        Cmd::Vm(VmCmd::List { ext }) => admin::render_vm(&admin::vm_list(&p, ext)?),
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // Help and version are not failures; any usage mistake is the
            // operator's, so it gets 1 rather than clap's default 2.
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    cli.log.init();
    match run(&cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("ipts-admin: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
