use ipts_harness::{HarnessError, Scenario};

#[test]
fn unknown_actor_reports_its_line() {
    let text = "scenario x\nproxy p\nphone alice 2001\n\nalice register p\ncarol call 2001\n";
    match Scenario::parse(text) {
        Err(HarnessError::UnknownActor { line, actor }) => {
            assert_eq!(line, 6);
            assert_eq!(actor, "carol");
        }
        other => panic!("expected unknown actor, got {other:?}"),
    }
}

#[test]
fn wrong_arity_is_a_parse_error() {
    let text = "scenario x\nproxy p\nphone alice 2001\nalice call\n";
    assert!(matches!(
        Scenario::parse(text),
        Err(HarnessError::Parse { line: 4, .. })
    ));
}

#[test]
fn every_shipped_scenario_parses() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios");
    let mut n = 0;
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "scn") {
            Scenario::load(&p).unwrap_or_else(|err| panic!("{}: {err}", p.display()));
            n += 1;
        }
    }
    assert_eq!(n, 10);
}
