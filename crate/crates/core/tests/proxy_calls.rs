use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use ipts_core::clock::system;
use ipts_core::media::analysis::tone_energy;
use ipts_core::proxy::{read_cdrs, Disposition, ProxyConfig, ProxyNode};
use ipts_core::registrar::{format_users, Privilege, Subscriber};
use ipts_core::ua::{CallStatus, Phone, PhoneConfig, SoftphoneCommand};

fn wait_for(what: &str, limit: Duration, mut f: impl FnMut() -> bool) {
    let start = Instant::now();
    while !f() {
        assert!(start.elapsed() < limit, "timed out waiting for {what}");
        std::thread::sleep(Duration::from_millis(20));
    }
}

fn addr(s: &str) -> SocketAddr {
    s.parse().unwrap()
}

struct Net {
    _dir: tempfile::TempDir,
    cdr: std::path::PathBuf,
    proxy: ProxyNode,
}

fn proxy(octet: u8, no_answer_ms: u64) -> Net {
    let dir = tempfile::tempdir().unwrap();
    let users = dir.path().join("users.csv");
    let subs: Vec<Subscriber> = ["2001", "2002", "2003"]
        .iter()
        .map(|e| Subscriber::new(e, e, "ipts", &format!("pw{e}"), Privilege::Internal))
        .collect();
    std::fs::write(&users, format_users(&subs)).unwrap();
    let cdr = dir.path().join("cdr.csv");
    let cfg = ProxyConfig {
        name: format!("p{octet}"),
        bind: addr(&format!("127.0.2.{octet}:0")),
        tcp: false,
        users_path: Some(users),
        cdr_path: Some(cdr.clone()),
        no_answer_ms,
        ..ProxyConfig::default()
    };
    let proxy = ProxyNode::start(cfg, system(), None, Some(octet as u64)).unwrap();
    Net { _dir: dir, cdr, proxy }
}

fn phone(ext: &str, octet: u8, tone: f64, proxy: SocketAddr) -> Phone {
    let mut cfg = PhoneConfig::new(ext, addr(&format!("127.0.1.{octet}:0")));
    cfg.tone_hz = tone;
    let p = Phone::start(cfg, system()).unwrap();
    let cmd = SoftphoneCommand::Register {
        ext: ext.into(),
        password: format!("pw{ext}"),
        proxy: "p".into(),
    };
    p.command(cmd, Some(proxy)).unwrap();
    let shared = Arc::clone(p.shared());
    wait_for("registration", Duration::from_secs(5), || {
        shared.state().is_registered()
    });
    p
}

#[test]
fn basic_call_flows_audio_and_writes_cdr() {
    let net = proxy(20, 20_000);
    let pa = net.proxy.addr();
    let a = phone("2001", 20, 600.0, pa);
    let b = phone("2002", 21, 1000.0, pa);

    a.command(SoftphoneCommand::Call("2002".into()), None).unwrap();
    wait_for("ringing", Duration::from_secs(3), || {
        b.shared().state().call == CallStatus::RingingIn
    });
    b.command(SoftphoneCommand::Answer, None).unwrap();
    wait_for("active", Duration::from_secs(3), || {
        a.shared().state().call == CallStatus::Active
    });

    std::thread::sleep(Duration::from_millis(600));
    let heard = b.shared().capture.recent(Duration::from_millis(400));
    assert!(tone_energy(&heard, 600.0) > -20.0, "callee hears caller tone");
    let heard = a.shared().capture.recent(Duration::from_millis(400));
    assert!(tone_energy(&heard, 1000.0) > -20.0, "caller hears callee tone");

    a.command(SoftphoneCommand::Hangup, None).unwrap();
    wait_for("idle", Duration::from_secs(3), || {
        b.shared().state().call == CallStatus::Idle
    });
    wait_for("cdr", Duration::from_secs(3), || {
        !read_cdrs(&net.cdr).unwrap().is_empty()
    });
    let cdrs = read_cdrs(&net.cdr).unwrap();
    assert_eq!(cdrs[0].disposition, Disposition::Answered);
    assert_eq!((cdrs[0].caller.as_str(), cdrs[0].callee.as_str()), ("2001", "2002"));
    assert!(cdrs[0].duration_ms >= 500);
}

#[test]
fn busy_and_unknown_numbers() {
    let net = proxy(21, 20_000);
    let pa = net.proxy.addr();
    let a = phone("2001", 22, 600.0, pa);
    let b = phone("2002", 23, 1000.0, pa);
    let c = phone("2003", 24, 800.0, pa);

    a.command(SoftphoneCommand::Call("2002".into()), None).unwrap();
    wait_for("ringing", Duration::from_secs(3), || {
        b.shared().state().call == CallStatus::RingingIn
    });
    b.command(SoftphoneCommand::Answer, None).unwrap();
    wait_for("active", Duration::from_secs(3), || {
        a.shared().state().call == CallStatus::Active
    });

    c.command(SoftphoneCommand::Call("2002".into()), None).unwrap();
    wait_for("busy", Duration::from_secs(3), || {
        c.shared().log().iter().any(|l| l.starts_with("486"))
    });
    assert_eq!(c.shared().state().call, CallStatus::Idle);

    c.command(SoftphoneCommand::Call("2999".into()), None).unwrap();
    wait_for("404", Duration::from_secs(3), || {
        c.shared().log().iter().any(|l| l.starts_with("404"))
    });
    a.command(SoftphoneCommand::Hangup, None).unwrap();
}

fn connect(a: &Phone, b: &Phone, digits: &str) {
    a.command(SoftphoneCommand::Call(digits.into()), None).unwrap();
    wait_for("ringing", Duration::from_secs(3), || {
        b.shared().state().call == CallStatus::RingingIn
    });
    b.command(SoftphoneCommand::Answer, None).unwrap();
    wait_for("active", Duration::from_secs(3), || {
        a.shared().state().call == CallStatus::Active
    });
}

#[test]
fn forwarding_follows_the_redirect() {
    let net = proxy(22, 20_000);
    let pa = net.proxy.addr();
    let a = phone("2001", 25, 600.0, pa);
    let b = phone("2002", 26, 1000.0, pa);
    let c = phone("2003", 27, 800.0, pa);
    b.command(SoftphoneCommand::Forward(Some("2003".into())), None).unwrap();
    connect(&a, &c, "2002");
    assert_eq!(b.shared().state().call, CallStatus::Idle);
    a.command(SoftphoneCommand::Hangup, None).unwrap();
    wait_for("idle", Duration::from_secs(3), || {
        c.shared().state().call == CallStatus::Idle
    });
}

#[test]
fn transfer_moves_media_to_the_target() {
    let net = proxy(23, 20_000);
    let pa = net.proxy.addr();
    let a = phone("2001", 28, 600.0, pa);
    let b = phone("2002", 29, 1000.0, pa);
    let c = phone("2003", 30, 800.0, pa);
    connect(&a, &b, "2002");
    b.command(SoftphoneCommand::Transfer("2003".into()), None).unwrap();
    wait_for("target ringing", Duration::from_secs(3), || {
        c.shared().state().call == CallStatus::RingingIn
    });
    c.command(SoftphoneCommand::Answer, None).unwrap();
    wait_for("transferor idle", Duration::from_secs(3), || {
        b.shared().state().call == CallStatus::Idle
    });
    std::thread::sleep(Duration::from_millis(700));
    let heard = a.shared().capture.recent(Duration::from_millis(400));
    assert!(tone_energy(&heard, 800.0) > -20.0, "caller now hears the target");
    let heard = c.shared().capture.recent(Duration::from_millis(400));
    assert!(tone_energy(&heard, 600.0) > -20.0, "target hears the caller");
    a.command(SoftphoneCommand::Hangup, None).unwrap();
    wait_for("target idle", Duration::from_secs(3), || {
        c.shared().state().call == CallStatus::Idle
    });
}

#[test]
fn hold_silences_and_unhold_restores() {
    let net = proxy(24, 20_000);
    let pa = net.proxy.addr();
    let a = phone("2001", 31, 600.0, pa);
    let b = phone("2002", 32, 1000.0, pa);
    connect(&a, &b, "2002");
    a.command(SoftphoneCommand::Hold, None).unwrap();
    wait_for("held", Duration::from_secs(3), || {
        a.shared().log().iter().any(|l| l == "held")
    });
    std::thread::sleep(Duration::from_millis(400));
    let heard = b.shared().capture.recent(Duration::from_millis(300));
    assert!(tone_energy(&heard, 600.0) < -40.0, "no caller audio while held");
    a.command(SoftphoneCommand::Unhold, None).unwrap();
    wait_for("resumed", Duration::from_secs(3), || {
        a.shared().log().iter().any(|l| l == "resumed")
    });
    std::thread::sleep(Duration::from_millis(500));
    let heard = b.shared().capture.recent(Duration::from_millis(300));
    assert!(tone_energy(&heard, 600.0) > -20.0);
    a.command(SoftphoneCommand::Hangup, None).unwrap();
}

#[test]
fn caller_cancel_is_recorded() {
    let net = proxy(25, 20_000);
    let pa = net.proxy.addr();
    let a = phone("2001", 33, 600.0, pa);
    let b = phone("2002", 34, 1000.0, pa);
    a.command(SoftphoneCommand::Call("2002".into()), None).unwrap();
    wait_for("ringing", Duration::from_secs(3), || {
        b.shared().state().call == CallStatus::RingingIn
    });
    a.command(SoftphoneCommand::Hangup, None).unwrap();
    wait_for("callee idle", Duration::from_secs(3), || {
        b.shared().state().call == CallStatus::Idle
    });
    wait_for("cdr", Duration::from_secs(3), || {
        !read_cdrs(&net.cdr).unwrap().is_empty()
    });
    assert_eq!(read_cdrs(&net.cdr).unwrap()[0].disposition, Disposition::Cancelled);
}
