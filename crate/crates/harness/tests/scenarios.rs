//! Runs every shipped scenario end to end over loopback.
//!
//! Each test gets its own address block so a slow teardown in one can never
//! collide with the next. They still run one at a time: the tone checks are
//! timing sensitive and a saturated CPU makes them flaky.

use std::path::PathBuf;
use std::sync::Mutex;

use ipts_harness::{run_file, Report, RunOptions};

static SERIAL: Mutex<()> = Mutex::new(());

fn scenario(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("scenarios")
        .join(format!("{name}.scn"))
}

fn run(name: &str, net_base: u8, seed: u64, loss: Option<f64>) -> Report {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let opts = RunOptions {
        seed,
        loss_pct: loss,
        net_base,
        bless: false,
        ..RunOptions::default()
    };
    run_file(&scenario(name), &opts).expect("scenario loads")
}

fn assert_passes(report: &Report) {
    assert!(report.passed(), "{}", report.render());
}

#[test]
fn internal_call() {
    assert_passes(&run("internal", 100, 1, None));
}

#[test]
fn external_call() {
    assert_passes(&run("external", 101, 1, None));
}

#[test]
fn music_on_hold() {
    assert_passes(&run("moh", 102, 1, None));
}

#[test]
fn voicemail() {
    assert_passes(&run("voicemail", 103, 1, None));
}

#[test]
fn conference() {
    assert_passes(&run("conference", 104, 1, None));
}

#[test]
fn ivr() {
    assert_passes(&run("ivr", 105, 1, None));
}

#[test]
fn forking() {
    assert_passes(&run("fork", 106, 1, None));
}

#[test]
fn billing_records() {
    assert_passes(&run("cdr", 107, 1, None));
}

#[test]
fn proxy_failover() {
    let r = run("failover", 108, 1, None);
    assert_passes(&r);
    assert_eq!(r.calls_answered, 2);
}

#[test]
fn twenty_percent_loss() {
    let r = run("loss", 109, 3, None);
    assert_passes(&r);
    assert!(r.packets_dropped > 0);
}

#[test]
fn same_seed_same_verdicts() {
    let a = run("loss", 111, 42, None);
    // Same block too: drop decisions hash the addresses.
    let b = run("loss", 111, 42, None);
    assert_eq!(a.verdicts(), b.verdicts());
    assert_eq!(a.ladder, b.ladder);
}
