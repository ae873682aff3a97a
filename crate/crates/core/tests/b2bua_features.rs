use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use ipts_core::b2bua::{list_mailbox, B2buaConfig, B2buaNode, IvrMenu, MOH_TONE_HZ};
use ipts_core::clock::system;
use ipts_core::media::tone_energy;
use ipts_core::media::wav::read_wav;
use ipts_core::proxy::{ProxyConfig, ProxyNode};
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

struct Pbx {
    dir: tempfile::TempDir,
    proxy: ProxyNode,
    _b2bua: B2buaNode,
}

impl Pbx {
    /// Net `n` uses 127.0.2.(30+n) for the proxy and 127.0.3.(30+n) /
    /// 127.0.4.(30+n) for the B2BUA so tests can run side by side.
    fn start(n: u8, no_answer_ms: u64) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let users = dir.path().join("users.csv");
        let subs: Vec<Subscriber> = ["2001", "2002", "2003", "2004"]
            .iter()
            .map(|e| Subscriber::new(e, e, "ipts", &format!("pw{e}"), Privilege::Internal))
            .collect();
        std::fs::write(&users, format_users(&subs)).unwrap();
        let o = 30 + n;
        let proxy_bind = addr(&format!("127.0.2.{o}:0"));
        // The B2BUA needs the proxy address and the proxy needs the B2BUA's:
        // bind the B2BUA first on a fixed port.
        let b2bua_int = addr(&format!("127.0.3.{o}:5080"));
        let proxy = ProxyNode::start(
            ProxyConfig {
                name: format!("proxy{n}"),
                bind: proxy_bind,
                tcp: false,
                users_path: Some(users),
                cdr_path: Some(dir.path().join("cdr.csv")),
                b2bua_addr: Some(b2bua_int),
                no_answer_ms,
                ..ProxyConfig::default()
            },
            system(),
            None,
            Some(u64::from(n)),
        )
        .unwrap();
        let b2bua = B2buaNode::start(
            B2buaConfig {
                internal_bind: b2bua_int,
                external_bind: addr(&format!("127.0.4.{o}:5080")),
                proxy_addr: Some(proxy.addr()),
                vm_dir: dir.path().join("vm"),
                ivr: IvrMenu {
                    digit_map: [('2', "2002".to_string())].into(),
                    timeout: Duration::from_secs(2),
                    ..IvrMenu::default()
                },
                ..B2buaConfig::default()
            },
            system(),
            None,
            Some(100 + u64::from(n)),
        )
        .unwrap();
        Self {
            dir,
            proxy,
            _b2bua: b2bua,
        }
    }

    fn phone(&self, ext: &str, octet: u8, tone: f64) -> Phone {
        let mut cfg = PhoneConfig::new(ext, addr(&format!("127.0.1.{octet}:0")));
        cfg.tone_hz = tone;
        let p = Phone::start(cfg, system()).unwrap();
        let cmd = SoftphoneCommand::Register {
            ext: ext.into(),
            password: format!("pw{ext}"),
            proxy: "p".into(),
        };
        p.command(cmd, Some(self.proxy.addr())).unwrap();
        let shared = Arc::clone(p.shared());
        wait_for("registration", Duration::from_secs(5), || {
            shared.state().is_registered()
        });
        p
    }

    fn vm_dir(&self) -> PathBuf {
        self.dir.path().join("vm")
    }
}

fn call_feature(p: &Phone, digits: &str) {
    p.command(SoftphoneCommand::Call(digits.into()), None).unwrap();
    wait_for("answer", Duration::from_secs(3), || {
        p.shared().state().call == CallStatus::Active
    });
}

fn energy(p: &Phone, hz: f64) -> f64 {
    tone_energy(&p.shared().capture.recent(Duration::from_millis(300)), hz)
}

#[test]
fn music_on_hold_extension_streams_music() {
    let pbx = Pbx::start(0, 20_000);
    let a = pbx.phone("2001", 40, 600.0);
    call_feature(&a, "4200");
    std::thread::sleep(Duration::from_millis(500));
    assert!(energy(&a, MOH_TONE_HZ) > -20.0);
    a.command(SoftphoneCommand::Hangup, None).unwrap();
}

#[test]
fn hold_on_internal_call_plays_music_to_the_held_party() {
    let pbx = Pbx::start(1, 20_000);
    let a = pbx.phone("2001", 41, 600.0);
    let b = pbx.phone("2002", 42, 1000.0);
    a.command(SoftphoneCommand::Call("2002".into()), None).unwrap();
    wait_for("ringing", Duration::from_secs(3), || {
        b.shared().state().call == CallStatus::RingingIn
    });
    b.command(SoftphoneCommand::Answer, None).unwrap();
    wait_for("active", Duration::from_secs(3), || {
        a.shared().state().call == CallStatus::Active
    });

    a.command(SoftphoneCommand::Hold, None).unwrap();
    wait_for("music", Duration::from_secs(3), || energy(&b, MOH_TONE_HZ) > -20.0);
    // Let the analysis window drop the audio sent before the hold.
    std::thread::sleep(Duration::from_millis(400));
    assert!(energy(&b, 600.0) < -40.0, "holder is silent while held");

    a.command(SoftphoneCommand::Unhold, None).unwrap();
    wait_for("voice back", Duration::from_secs(3), || energy(&b, 600.0) > -20.0);
    std::thread::sleep(Duration::from_millis(400));
    assert!(energy(&b, MOH_TONE_HZ) < -40.0, "music stops after resume");
    a.command(SoftphoneCommand::Hangup, None).unwrap();
}

#[test]
fn no_answer_goes_to_voicemail_and_records() {
    let pbx = Pbx::start(2, 1000);
    let a = pbx.phone("2001", 43, 600.0);
    let b = pbx.phone("2002", 44, 1000.0);
    a.command(SoftphoneCommand::Call("2002".into()), None).unwrap();
    wait_for("ringing", Duration::from_secs(3), || {
        b.shared().state().call == CallStatus::RingingIn
    });
    wait_for("voicemail answers", Duration::from_secs(4), || {
        a.shared().state().call == CallStatus::Active
    });
    wait_for("callee stops ringing", Duration::from_secs(2), || {
        b.shared().state().call == CallStatus::Idle
    });
    // Greeting, then three seconds of message.
    std::thread::sleep(Duration::from_millis(800));
    std::thread::sleep(Duration::from_secs(3));
    a.command(SoftphoneCommand::Hangup, None).unwrap();
    wait_for("index entry", Duration::from_secs(3), || {
        !list_mailbox(&pbx.vm_dir(), "2002").unwrap().is_empty()
    });
    let entries = list_mailbox(&pbx.vm_dir(), "2002").unwrap();
    let samples = read_wav(&pbx.vm_dir().join("2002").join(&entries[0].filename)).unwrap();
    let secs = samples.len() as f64 / 8000.0;
    assert!((2.6..=3.6).contains(&secs), "recorded {secs} s");
    assert!(tone_energy(&samples, 600.0) > -20.0);
}

#[test]
fn hanging_up_during_greeting_leaves_no_message() {
    let pbx = Pbx::start(3, 20_000);
    let a = pbx.phone("2001", 45, 600.0);
    call_feature(&a, "4000");
    std::thread::sleep(Duration::from_millis(200));
    a.command(SoftphoneCommand::Hangup, None).unwrap();
    std::thread::sleep(Duration::from_millis(500));
    assert!(list_mailbox(&pbx.vm_dir(), "2001").unwrap().is_empty());
}

#[test]
fn conference_mixes_everyone_but_yourself() {
    let pbx = Pbx::start(4, 20_000);
    let tones = [500.0, 900.0, 1400.0];
    let phones: Vec<Phone> = ["2001", "2002", "2003"]
        .iter()
        .zip(tones)
        .enumerate()
        .map(|(i, (e, t))| pbx.phone(e, 46 + i as u8, t))
        .collect();
    for p in &phones {
        call_feature(p, "3001");
    }
    std::thread::sleep(Duration::from_millis(700));
    for (i, p) in phones.iter().enumerate() {
        for (j, t) in tones.iter().enumerate() {
            let e = energy(p, *t);
            if i == j {
                assert!(e <= -30.0, "phone {i} hears itself at {e} dB");
            } else {
                assert!(e > -25.0, "phone {i} misses tone {j}: {e} dB");
            }
        }
    }
    phones[2].command(SoftphoneCommand::Hangup, None).unwrap();
    std::thread::sleep(Duration::from_millis(300));
    assert!(energy(&phones[0], tones[2]) < -30.0, "departed tone is gone");
}

#[test]
fn ivr_transfers_on_mapped_digit() {
    let pbx = Pbx::start(5, 20_000);
    let a = pbx.phone("2001", 50, 600.0);
    let b = pbx.phone("2002", 51, 1000.0);
    call_feature(&a, "4100");
    std::thread::sleep(Duration::from_millis(300));
    a.command(SoftphoneCommand::Dtmf('2'), None).unwrap();
    wait_for("transfer rings", Duration::from_secs(3), || {
        b.shared().state().call == CallStatus::RingingIn
    });
    b.command(SoftphoneCommand::Answer, None).unwrap();
    wait_for("caller hears target", Duration::from_secs(3), || {
        energy(&a, 1000.0) > -20.0
    });
    wait_for("target hears caller", Duration::from_secs(3), || {
        energy(&b, 600.0) > -20.0
    });
    b.command(SoftphoneCommand::Hangup, None).unwrap();
    wait_for("caller released", Duration::from_secs(3), || {
        a.shared().state().call == CallStatus::Idle
    });
}

#[test]
fn ivr_hangs_up_after_three_bad_digits() {
    let pbx = Pbx::start(6, 20_000);
    let a = pbx.phone("2001", 52, 600.0);
    call_feature(&a, "4100");
    for d in ['7', '8', '9'] {
        std::thread::sleep(Duration::from_millis(400));
        a.command(SoftphoneCommand::Dtmf(d), None).unwrap();
    }
    wait_for("released", Duration::from_secs(3), || {
        a.shared().state().call == CallStatus::Idle
    });
}
