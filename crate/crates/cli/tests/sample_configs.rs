//! The configs shipped under `config/` must load as-is.

use std::path::PathBuf;

fn config_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../config")
}

#[test]
fn proxy_sample_loads() {
    let cfg = ipts_core::proxy::load_config(&config_dir().join("iptsd.ini")).unwrap();
    assert_eq!(cfg.name, "proxyA");
    assert_eq!(cfg.no_answer_for("2002"), 10_000);
    assert_eq!(cfg.no_answer_for("2001"), 20_000);
    assert!(cfg.journal_path.unwrap().ends_with("bindings.journal"));
    assert_eq!(cfg.b2bua_addr, Some("127.0.3.1:5080".parse().unwrap()));
}

#[test]
fn b2bua_sample_loads() {
    let cfg = ipts_core::b2bua::load_config(&config_dir().join("iptsb.ini")).unwrap();
    assert_eq!(cfg.dialplan.len(), 5);
    assert_eq!(cfg.media_ports, (20000, 20999));
    assert_eq!(cfg.trunk.unwrap().username, "acme");
    assert_eq!(cfg.ivr.digit_map.get(&'2').map(String::as_str), Some("2002"));
}
